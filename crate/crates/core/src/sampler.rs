//! Heun probability-flow sampler over hypnodensities and posterior
//! aggregation (majority vote, median statistics).

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::evalkit::{aggregate_stat, overnight_stats, StatReport};
use crate::hypno::{argmax_stages, majority_vote, Hypnodensity, Hypnogram};
use crate::par::{self, Execution};
use crate::sched::{noise_level, time_steps, ScheduleParams};
use crate::scorekit::{fsdm_estimate, tweedie_score, Lambda, Observations, SensorBank, SensorEstimate};

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub schedule: ScheduleParams,
    pub n_samples: usize,
    pub lambda: Lambda,
    pub base_seed: u64,
    pub record_trajectory: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            schedule: ScheduleParams::default(),
            n_samples: 64,
            lambda: Lambda::Auto,
            base_seed: 0,
            record_trajectory: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.n_samples == 0 {
            return Err(Error::param("n_samples must be at least 1"));
        }
        Ok(())
    }
}

/// State entering step `m` and the per-sensor estimates made there.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    pub m: usize,
    pub sigma: f64,
    pub state: Hypnodensity,
    pub sensors: Vec<SensorEstimate>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRun {
    pub state: Hypnodensity,
    pub trajectory: Option<Vec<TrajectoryStep>>,
}

/// Independent generator for sample `index`: one ChaCha stream per index.
pub fn sample_rng(base_seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(index);
    rng
}

/// Draws `y_0 ~ N(0, sigma_max^2 I)` for sample `index`.
pub fn initial_state(epochs: usize, sigma: f64, base_seed: u64, index: u64) -> Hypnodensity {
    let mut rng = sample_rng(base_seed, index);
    let data = (0..epochs * crate::NUM_STAGES)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sigma * z
        })
        .collect();
    Hypnodensity::from_epoch_major(epochs, data).expect("sized by construction")
}

/// Derivative of the probability-flow ODE, `-sigma * score`.
fn drift(estimate: &Hypnodensity, y: &Hypnodensity, sigma: f64) -> Result<Hypnodensity> {
    let mut d = tweedie_score(estimate, y, sigma)?;
    d.scale(-sigma);
    Ok(d)
}

fn check_finite(y: &Hypnodensity, step: usize, sigma: f64) -> Result<()> {
    if y.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { step, sigma })
    }
}

/// One run of the second-order sampler from the seeded initial state.
pub fn sample_one(
    bank: &SensorBank,
    obs: &Observations,
    epochs: usize,
    cfg: &SamplerConfig,
    sample_index: usize,
) -> Result<SampleRun> {
    cfg.validate()?;
    let t = time_steps(&cfg.schedule)?;
    let m_total = cfg.schedule.steps;
    let (sigma0, _) = noise_level(t[0])?;
    let mut y = initial_state(epochs, sigma0, cfg.base_seed, sample_index as u64);
    let mut trajectory = cfg.record_trajectory.then(|| Vec::with_capacity(m_total));

    for m in 0..m_total {
        let (sigma, _) = noise_level(t[m])?;
        let (sigma_next, _) = noise_level(t[m + 1])?;
        let dt = t[m + 1] - t[m];
        let est = fsdm_estimate(&y, sigma, bank, obs, cfg.lambda)?;
        let d = drift(&est.projected, &y, sigma)?;
        let mut next = y.clone();
        next.add_scaled(dt, &d);
        check_finite(&next, m, sigma)?;
        if sigma_next != 0.0 {
            let est2 = fsdm_estimate(&next, sigma_next, bank, obs, cfg.lambda)?;
            let d2 = drift(&est2.projected, &next, sigma_next)?;
            next = y.clone();
            next.add_scaled(0.5 * dt, &d);
            next.add_scaled(0.5 * dt, &d2);
            check_finite(&next, m, sigma_next)?;
        }
        if let Some(tr) = trajectory.as_mut() {
            tr.push(TrajectoryStep {
                m,
                sigma,
                state: y,
                sensors: est.per_sensor,
            });
        }
        y = next;
    }
    Ok(SampleRun { state: y, trajectory })
}

pub fn sample_many(bank: &SensorBank, obs: &Observations, epochs: usize, cfg: &SamplerConfig) -> Result<Vec<SampleRun>> {
    sample_many_with(bank, obs, epochs, cfg, Execution::default())
}

/// `n_samples` runs with indices `0..n`, in index order regardless of `exec`.
pub fn sample_many_with(
    bank: &SensorBank,
    obs: &Observations,
    epochs: usize,
    cfg: &SamplerConfig,
    exec: Execution,
) -> Result<Vec<SampleRun>> {
    cfg.validate()?;
    par::try_map_indexed(cfg.n_samples, exec, |i| sample_one(bank, obs, epochs, cfg, i))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub hypnogram: Hypnogram,
    pub samples: Vec<SampleRun>,
    /// Median over samples of each overnight statistic; `None` when the
    /// statistic is undefined for every sample.
    pub stats: BTreeMap<String, Option<f64>>,
}

/// Samples the posterior, then aggregates with a per-epoch majority vote and
/// per-statistic medians over the first `valid_epochs` epochs.
pub fn infer(
    bank: &SensorBank,
    obs: &Observations,
    epochs: usize,
    valid_epochs: usize,
    cfg: &SamplerConfig,
) -> Result<Inference> {
    let samples = sample_many(bank, obs, epochs, cfg)?;
    aggregate(samples, valid_epochs)
}

pub fn aggregate(samples: Vec<SampleRun>, valid_epochs: usize) -> Result<Inference> {
    let states: Vec<Hypnodensity> = samples.iter().map(|s| s.state.clone()).collect();
    let hypnogram = majority_vote(&states)?;
    let reports = states
        .iter()
        .map(|s| overnight_stats(&argmax_stages(s), valid_epochs))
        .collect::<Result<Vec<StatReport>>>()?;
    let stats = StatReport::NAMES
        .iter()
        .map(|&n| Ok((n.to_string(), aggregate_stat(&reports, n)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(Inference {
        hypnogram,
        samples,
        stats,
    })
}
