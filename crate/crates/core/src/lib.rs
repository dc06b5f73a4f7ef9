//! Factorized score-based diffusion for inferring sleep-stage sequences
//! (hypnograms) from any subset of sensors.
//!
//! The posterior over hypnograms is sampled with a probability-flow ODE whose
//! score is assembled from a global prior denoiser plus, for every observed
//! sensor, the difference between that sensor's likelihood and prior
//! denoisers. Small synthetic worlds with exact posterior enumeration back
//! every numerical claim in the test suite.

pub mod cli;
pub mod dsp;
pub mod error;
pub mod evalkit;
pub mod experiment;
pub mod hypno;
pub mod infogain;
pub mod neural;
pub mod oracle;
pub mod par;
pub mod sampler;
pub mod sched;
pub mod scorekit;
pub mod synth;

pub use error::{Error, Result};
pub use hypno::{Hypnodensity, Hypnogram, SleepStage, NUM_STAGES};
pub use scorekit::{Conditioning, Denoiser, FeatureMatrix, Lambda, SensorBank};
