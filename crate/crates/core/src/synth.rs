//! Synthetic recordings drawn from a [`WorldModel`]: epoch features for the
//! denoisers and, optionally, pulse-train waveforms for the signal pipeline.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dsp::{signal_kind, RawSignal};
use crate::error::{Error, Result};
use crate::hypno::{Hypnogram, EPOCH_SECONDS};
use crate::oracle::WorldModel;
use crate::par::{try_map_indexed, Execution};
use crate::scorekit::FeatureMatrix;
use crate::NUM_STAGES;

/// Renders a quasi-periodic pulse train whose rate follows the stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaveformSpec {
    /// Signal kind from the preprocessing table.
    pub kind: String,
    /// Events per second for W, N1, N2, N3, REM.
    pub rates: [f64; NUM_STAGES],
    pub amplitude: f64,
    pub noise_sd: f64,
    pub fs: f64,
    /// Standard deviation of each interval relative to its mean.
    #[serde(default = "default_jitter")]
    pub jitter: f64,
}

fn default_jitter() -> f64 {
    0.03
}

impl WaveformSpec {
    pub fn validate(&self) -> Result<()> {
        signal_kind(&self.kind)?;
        if self.rates.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return Err(Error::param("waveform rates must be positive"));
        }
        let max_rate = self.rates.iter().cloned().fold(0.0, f64::max);
        if !(self.fs > 2.0 * max_rate) {
            return Err(Error::param(format!(
                "fs {} must exceed twice the largest rate {max_rate}",
                self.fs
            )));
        }
        if !(self.amplitude > 0.0) || !(self.noise_sd >= 0.0) || !(0.0..0.3).contains(&self.jitter) {
            return Err(Error::param("invalid waveform amplitude, noise or jitter"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub world: WorldModel,
    pub n_recordings: usize,
    #[serde(default)]
    pub waveforms: BTreeMap<String, WaveformSpec>,
    #[serde(default)]
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        for spec in self.waveforms.values() {
            spec.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub index: usize,
    pub hypnogram: Hypnogram,
    pub features: BTreeMap<String, FeatureMatrix>,
    pub waveforms: BTreeMap<String, RawSignal>,
}

impl Recording {
    pub fn id(&self) -> String {
        format!("rec{:04}", self.index)
    }

    /// Features in sensor-name order, for the oracle and the sampler.
    pub fn observations(&self) -> Vec<(String, FeatureMatrix)> {
        self.features.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }
}

fn recording_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Pulse train at `spec.fs` covering the hypnogram. Gaussian pulses of
/// width `0.1 / rate` sit at event times whose intervals are `1 / rate` of the
/// current stage with relative jitter.
pub fn render_waveform<R: Rng + ?Sized>(h: &Hypnogram, spec: &WaveformSpec, rng: &mut R) -> Result<RawSignal> {
    spec.validate()?;
    let n = (h.epochs() as f64 * EPOCH_SECONDS * spec.fs).round() as usize;
    let duration = n as f64 / spec.fs;
    let stage_at = |t: f64| {
        let e = ((t / EPOCH_SECONDS) as usize).min(h.epochs() - 1);
        h.stages()[e].index()
    };
    let mut events = Vec::new();
    let mut t = {
        let u: f64 = rng.random();
        u / spec.rates[stage_at(0.0)]
    };
    while t < duration {
        let rate = spec.rates[stage_at(t)];
        events.push((t, rate));
        let z: f64 = StandardNormal.sample(rng);
        t += (1.0 + spec.jitter * z.clamp(-3.0, 3.0)) / rate;
    }
    let mut samples = vec![0.0; n];
    for &(te, rate) in &events {
        let width = 0.1 / rate;
        let lo = ((te - 4.0 * width) * spec.fs).floor().max(0.0) as usize;
        let hi = (((te + 4.0 * width) * spec.fs).ceil() as usize).min(n);
        for (i, s) in samples.iter_mut().enumerate().take(hi).skip(lo) {
            let d = (i as f64 / spec.fs - te) / width;
            *s += spec.amplitude * (-0.5 * d * d).exp();
        }
    }
    for s in samples.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *s += spec.noise_sd * z;
        // exact zeros would read as missing
        if *s == 0.0 {
            *s = f64::MIN_POSITIVE;
        }
    }
    RawSignal::new(samples, spec.fs, &spec.kind)
}

/// Recording `index`: hypnogram from the prior, features per emission model,
/// then waveforms in sensor-name order. Deterministic in `(cfg.seed, index)`.
pub fn gen_recording(cfg: &SynthConfig, index: usize) -> Result<Recording> {
    let mut rng = recording_rng(cfg.seed, index);
    let hypnogram = cfg.world.sample_hypnogram(&mut rng);
    let features = cfg
        .world
        .sensors
        .iter()
        .map(|s| {
            let v = hypnogram
                .stages()
                .iter()
                .map(|st| s.emission.sample(st.index(), &mut rng))
                .collect();
            (s.name.clone(), FeatureMatrix::from_sequence(v))
        })
        .collect();
    let mut waveforms = BTreeMap::new();
    for (name, spec) in &cfg.waveforms {
        waveforms.insert(name.clone(), render_waveform(&hypnogram, spec, &mut rng)?);
    }
    Ok(Recording {
        index,
        hypnogram,
        features,
        waveforms,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitRatio {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitRatio {
    fn default() -> Self {
        SplitRatio {
            train: 7,
            val: 1,
            test: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl SplitRatio {
    /// Split of recording `index`, by `index mod (train + val + test)`.
    pub fn of(&self, index: usize) -> Split {
        let r = index % (self.train + self.val + self.test);
        if r < self.train {
            Split::Train
        } else if r < self.train + self.val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Recording>,
    pub val: Vec<Recording>,
    pub test: Vec<Recording>,
}

pub fn gen_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    gen_dataset_with(cfg, SplitRatio::default(), Execution::default())
}

pub fn gen_dataset_with(cfg: &SynthConfig, ratio: SplitRatio, exec: Execution) -> Result<Dataset> {
    cfg.validate()?;
    if cfg.n_recordings < 3 {
        return Err(Error::param("a dataset needs at least 3 recordings"));
    }
    if ratio.train + ratio.val + ratio.test == 0 {
        return Err(Error::param("split ratio is all zero"));
    }
    let recs = try_map_indexed(cfg.n_recordings, exec, |i| gen_recording(cfg, i))?;
    let mut ds = Dataset {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for r in recs {
        match ratio.of(r.index) {
            Split::Train => ds.train.push(r),
            Split::Val => ds.val.push(r),
            Split::Test => ds.test.push(r),
        }
    }
    Ok(ds)
}
