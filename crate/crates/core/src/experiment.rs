//! Reproducible experiments on synthetic worlds: the oracle check suites and
//! the sensor degradation sweep.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dsp::{awgn_sd, degrade, DegradeMode};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate_recording, Mask};
use crate::hypno::{argmax_stages, one_hot, Hypnodensity, Hypnogram, NUM_STAGES};
use crate::infogain::{information_gain_from_runs, mean_information_gain};
use crate::oracle::random::{gaussian_sensor, markov_prior, observe, single_atom};
use crate::oracle::{
    encode_index, enumerate_posterior, exact_denoiser, exact_smoothed_score, joint_conditioning, EmissionModel,
    Target, WorldModel,
};
use crate::par::{try_map_indexed, Execution};
use crate::sampler::{aggregate, sample_many, sample_one, SamplerConfig};
use crate::scorekit::{fsdm_denoise, fsdm_estimate, fsdm_score, Conditioning, FeatureMatrix, Lambda, SensorBank};
use crate::synth::{gen_recording, SynthConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    AtMost,
    AtLeast,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub suite: String,
    pub name: String,
    pub measured: f64,
    pub relation: Relation,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    fn new(suite: Suite, name: &str, measured: f64, relation: Relation, tolerance: f64) -> Self {
        let passed = match relation {
            Relation::AtMost => measured <= tolerance,
            Relation::AtLeast => measured >= tolerance,
        };
        Check {
            suite: suite.to_string(),
            name: name.to_string(),
            measured,
            relation,
            tolerance,
            passed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<Check>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    SingleAtom,
    Posterior,
    Factorization,
    Identities,
    All,
}

impl Suite {
    pub const EACH: [Suite; 4] = [Suite::SingleAtom, Suite::Posterior, Suite::Factorization, Suite::Identities];
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::SingleAtom => "single-atom",
            Suite::Posterior => "posterior",
            Suite::Factorization => "factorization",
            Suite::Identities => "identities",
            Suite::All => "all",
        })
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Suite::All]
            .into_iter()
            .chain(Suite::EACH)
            .find(|x| x.to_string() == s)
            .ok_or_else(|| Error::Parse(format!("unknown suite `{s}`")))
    }
}

fn world_rng(seed: u64, suite: u64, index: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ (suite << 32));
    r.set_stream(index as u64);
    r
}

fn random_hypnogram<R: Rng + ?Sized>(rng: &mut R, epochs: usize) -> Hypnogram {
    let idx: Vec<usize> = (0..epochs).map(|_| rng.random_range(0..NUM_STAGES)).collect();
    Hypnogram::from_indices(&idx).expect("indices in range")
}

/// Exact prior plus one exact denoiser per sensor of `world`.
pub fn exact_bank(world: &Arc<WorldModel>) -> Result<SensorBank> {
    let mut bank = SensorBank::new(Arc::new(exact_denoiser(world.clone(), Target::Prior)?));
    for s in &world.sensors {
        bank.add_sensor(s.name.clone(), Arc::new(exact_denoiser(world.clone(), Target::Sensor(s.name.clone()))?))?;
    }
    Ok(bank)
}

/// Exact prior plus a single `joint` denoiser conditioned on all sensors.
pub fn joint_bank(world: &Arc<WorldModel>) -> Result<SensorBank> {
    let prior = Arc::new(exact_denoiser(world.clone(), Target::Prior)?);
    let joint = Arc::new(exact_denoiser(world.clone(), Target::joint_all(world))?);
    SensorBank::new(prior).with_sensor("joint", joint)
}

pub fn features_to_obs(obs: &[(String, FeatureMatrix)]) -> Vec<(String, Conditioning)> {
    obs.iter()
        .map(|(n, f)| (n.clone(), Conditioning::Features(f.clone())))
        .collect()
}

fn sampler(seed: u64, n: usize) -> SamplerConfig {
    SamplerConfig {
        n_samples: n,
        base_seed: seed,
        ..Default::default()
    }
}

/// Max distance of the sampler output from the atom over random single-atom
/// worlds.
fn single_atom_suite(seed: u64) -> Result<Vec<Check>> {
    let errs = try_map_indexed(20, Execution::Parallel, |w| -> Result<f64> {
        let mut rng = world_rng(seed, 1, w);
        let epochs = 1 + w % 6;
        let h = random_hypnogram(&mut rng, epochs);
        let bank = exact_bank(&Arc::new(single_atom(&h)?))?;
        let target = one_hot(&h);
        let mut worst = 0.0f64;
        for s in 0..5 {
            let run = sample_one(&bank, &[], epochs, &sampler(seed.wrapping_add(s), 1), 0)?;
            worst = worst.max(run.state.max_abs_diff(&target));
        }
        Ok(worst)
    })?;
    let worst = errs.into_iter().fold(0.0, f64::max);
    Ok(vec![Check::new(Suite::SingleAtom, "max_inf_norm_to_atom", worst, Relation::AtMost, 1e-6)])
}

fn informative_world<R: Rng + ?Sized>(rng: &mut R, epochs: usize, sd: f64) -> WorldModel {
    WorldModel {
        epochs,
        prior: markov_prior(rng, 2.0),
        sensors: vec![gaussian_sensor(rng, "s", 1.0, sd)],
    }
}

/// Sample histogram over all `5^E` hypnograms.
fn empirical_table(states: &[Hypnodensity], epochs: usize) -> Vec<f64> {
    let mut counts = vec![0.0; NUM_STAGES.pow(epochs as u32)];
    for s in states {
        counts[encode_index(&argmax_stages(s).indices())] += 1.0;
    }
    counts.iter_mut().for_each(|c| *c /= states.len() as f64);
    counts
}

fn posterior_suite(seed: u64) -> Result<Vec<Check>> {
    let tvs = try_map_indexed(10, Execution::Sequential, |w| -> Result<f64> {
        let mut rng = world_rng(seed, 2, w);
        let world = Arc::new(informative_world(&mut rng, 4, 0.5));
        let h = world.sample_hypnogram(&mut rng);
        let obs = observe(&world, &h, &mut rng);
        let post = enumerate_posterior(&world, &obs)?;
        let cond = vec![("joint".to_string(), joint_conditioning(&obs)?)];
        let runs = sample_many(&joint_bank(&world)?, &cond, 4, &sampler(seed.wrapping_add(w as u64), 1024))?;
        let states: Vec<Hypnodensity> = runs.into_iter().map(|r| r.state).collect();
        Ok(post.total_variation(&empirical_table(&states, 4)))
    })?;
    let agree = try_map_indexed(50, Execution::Parallel, |w| -> Result<(usize, usize)> {
        let mut rng = world_rng(seed, 3, w);
        let world = Arc::new(informative_world(&mut rng, 4, 0.2));
        let h = world.sample_hypnogram(&mut rng);
        let obs = observe(&world, &h, &mut rng);
        let oracle = argmax_stages(&enumerate_posterior(&world, &obs)?.marginals());
        let cond = vec![("joint".to_string(), joint_conditioning(&obs)?)];
        let runs = sample_many(&joint_bank(&world)?, &cond, 4, &sampler(seed.wrapping_add(w as u64), 64))?;
        let states: Vec<Hypnodensity> = runs.into_iter().map(|r| r.state).collect();
        let empirical = argmax_stages(&crate::hypno::mean_density(
            &states.iter().map(|s| one_hot(&argmax_stages(s))).collect::<Vec<_>>(),
        )?);
        let hits = oracle.stages().iter().zip(empirical.stages()).filter(|(a, b)| a == b).count();
        Ok((hits, 4))
    })?;
    let (hits, total) = agree.iter().fold((0, 0), |(a, b), (h, t)| (a + h, b + t));
    Ok(vec![
        Check::new(
            Suite::Posterior,
            "max_total_variation",
            tvs.into_iter().fold(0.0, f64::max),
            Relation::AtMost,
            0.1,
        ),
        Check::new(
            Suite::Posterior,
            "marginal_argmax_agreement",
            hits as f64 / total as f64,
            Relation::AtLeast,
            0.95,
        ),
    ])
}

fn relative_l2(a: &Hypnodensity, b: &Hypnodensity) -> f64 {
    let mut d = a.clone();
    d.add_scaled(-1.0, b);
    d.l2_norm() / b.l2_norm().max(f64::MIN_POSITIVE)
}

fn factorization_suite(seed: u64) -> Result<Vec<Check>> {
    let errs = try_map_indexed(10, Execution::Parallel, |w| -> Result<f64> {
        let mut rng = world_rng(seed, 4, w);
        let world = Arc::new(WorldModel {
            epochs: 4,
            prior: markov_prior(&mut rng, 2.0),
            sensors: vec![gaussian_sensor(&mut rng, "a", 1.0, 0.6), gaussian_sensor(&mut rng, "b", 1.0, 0.9)],
        });
        let h = world.sample_hypnogram(&mut rng);
        let raw_obs = observe(&world, &h, &mut rng);
        let obs = features_to_obs(&raw_obs);
        let bank = exact_bank(&world)?;
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let vertex = one_hot(&world.sample_hypnogram(&mut rng));
            let data = vertex
                .as_slice()
                .iter()
                .map(|v| v + rng.random_range(-0.05..=0.05))
                .collect();
            let y = Hypnodensity::from_epoch_major(4, data)?;
            let fsdm = fsdm_score(&y, 0.01, &bank, &obs, Lambda::Fixed(1.0))?;
            let exact = exact_smoothed_score(&world, &raw_obs, &y, 0.01)?;
            worst = worst.max(relative_l2(&fsdm, &exact));
        }
        Ok(worst)
    })?;
    Ok(vec![Check::new(
        Suite::Factorization,
        "max_relative_l2_score",
        errs.into_iter().fold(0.0, f64::max),
        Relation::AtMost,
        1e-3,
    )])
}

fn identities_suite(seed: u64) -> Result<Vec<Check>> {
    let mut rng = world_rng(seed, 5, 0);
    let world = Arc::new(WorldModel {
        epochs: 5,
        prior: markov_prior(&mut rng, 2.0),
        sensors: vec![gaussian_sensor(&mut rng, "s", 1.0, 0.7)],
    });
    let h = world.sample_hypnogram(&mut rng);
    let obs = features_to_obs(&observe(&world, &h, &mut rng));
    let single = Arc::new(exact_denoiser(world.clone(), Target::Sensor("s".into()))?);
    let prior = Arc::new(exact_denoiser(world.clone(), Target::Prior)?);
    let (mut n1, mut dup, mut colsum) = (0.0f64, 0.0f64, 0.0f64);
    for sigma in [0.05, 0.5, 5.0] {
        let data = (0..5 * NUM_STAGES).map(|_| rng.random_range(-0.5..1.5)).collect();
        let y = Hypnodensity::from_epoch_major(5, data)?;
        let bank = SensorBank::new(prior.clone()).with_sensor("s", single.clone())?;
        let combined = fsdm_denoise(&y, sigma, &bank, &obs, Lambda::Auto)?;
        let direct = crate::scorekit::Denoiser::evaluate(single.as_ref(), &y, &obs[0].1, sigma)?;
        n1 = n1.max(combined.max_abs_diff(&direct));
        let base = fsdm_estimate(&y, sigma, &bank, &obs, Lambda::Auto)?.raw;
        for k in [2usize, 4, 8] {
            let mut bank_k = SensorBank::new(prior.clone());
            let mut obs_k = Vec::new();
            for i in 0..k {
                bank_k.add_sensor(format!("s{i}"), single.clone())?;
                obs_k.push((format!("s{i}"), obs[0].1.clone()));
            }
            let raw = fsdm_estimate(&y, sigma, &bank_k, &obs_k, Lambda::Auto)?.raw;
            dup = dup.max(raw.max_abs_diff(&base));
            for col in raw.columns() {
                colsum = colsum.max((col.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    Ok(vec![
        Check::new(Suite::Identities, "single_sensor_equals_likelihood", n1, Relation::AtMost, 1e-12),
        Check::new(Suite::Identities, "duplicated_sensor_invariance", dup, Relation::AtMost, 1e-12),
        Check::new(Suite::Identities, "column_sum_deviation", colsum, Relation::AtMost, 1e-9),
    ])
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<OracleReport> {
    let suites: Vec<Suite> = match suite {
        Suite::All => Suite::EACH.to_vec(),
        s => vec![s],
    };
    let mut checks = Vec::new();
    for s in suites {
        checks.extend(match s {
            Suite::SingleAtom => single_atom_suite(seed)?,
            Suite::Posterior => posterior_suite(seed)?,
            Suite::Factorization => factorization_suite(seed)?,
            Suite::Identities => identities_suite(seed)?,
            Suite::All => unreachable!(),
        });
    }
    Ok(OracleReport {
        seed,
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}

/// One point of a degradation arm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "arm", rename_all = "snake_case")]
pub enum Degradation {
    Clean,
    /// Zeroes the last `fraction` of the night.
    ZeroSpan { fraction: f64 },
    Awgn { snr_db: f64 },
}

impl Degradation {
    pub fn label(&self) -> String {
        match self {
            Degradation::Clean => "clean".into(),
            Degradation::ZeroSpan { fraction } => format!("zero_span_{fraction}"),
            Degradation::Awgn { snr_db } => format!("awgn_{snr_db}db"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub world: WorldModel,
    /// Sensor whose observations are degraded.
    pub sensor: String,
    pub n_recordings: usize,
    pub seed: u64,
    pub sampler: SamplerConfig,
    pub conditions: Vec<Degradation>,
}

impl SweepConfig {
    /// Clean, zero spans of 0.25/0.5/0.75 and noise at 40/20/10/0 dB.
    pub fn standard_conditions() -> Vec<Degradation> {
        let mut c = vec![Degradation::Clean];
        c.extend([0.25, 0.5, 0.75].map(|fraction| Degradation::ZeroSpan { fraction }));
        c.extend([40.0, 20.0, 10.0, 0.0].map(|snr_db| Degradation::Awgn { snr_db }));
        c
    }
}

/// Per-(condition, recording) row for plotting gain against accuracy.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlotRow {
    pub sensor_set: String,
    pub recording: String,
    pub mean_info_gain: f64,
    pub accuracy: f64,
    pub kappa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub condition: Degradation,
    pub label: String,
    pub mean_info_gain: f64,
    pub accuracy: f64,
    pub kappa: f64,
    #[serde(skip)]
    pub rows: Vec<PlotRow>,
}

/// World whose `sensor` emission accounts for additive noise of `noise_sd`.
fn noise_aware(world: &WorldModel, sensor: &str, noise_sd: f64) -> Result<WorldModel> {
    let mut w = world.clone();
    let s = w
        .sensors
        .iter_mut()
        .find(|s| s.name == sensor)
        .ok_or_else(|| Error::UnknownSensor(sensor.to_string()))?;
    match &mut s.emission {
        EmissionModel::Gaussian { sd, .. } => sd.iter_mut().for_each(|v| *v = v.hypot(noise_sd)),
        EmissionModel::Categorical { .. } => {
            return Err(Error::param("additive noise needs a Gaussian emission"));
        }
    }
    Ok(w)
}

/// Degrades one sensor of every synthetic recording and measures that
/// sensor's mean information gain together with the 5-class accuracy and
/// kappa of the combined estimate. Conditions share recordings and sampler
/// seeds, so the comparison between them is paired.
///
/// Exact denoisers are used throughout; under additive noise they are rebuilt
/// for the noise-inflated emission so the denoiser matches the data it sees.
pub fn degradation_sweep(cfg: &SweepConfig) -> Result<Vec<SweepPoint>> {
    cfg.world.validate()?;
    cfg.world.sensor(&cfg.sensor)?;
    if cfg.n_recordings == 0 || cfg.conditions.is_empty() {
        return Err(Error::Empty("degradation sweep needs recordings and conditions".into()));
    }
    let synth = SynthConfig {
        world: cfg.world.clone(),
        n_recordings: cfg.n_recordings,
        waveforms: Default::default(),
        seed: cfg.seed,
    };
    let recordings = try_map_indexed(cfg.n_recordings, Execution::Parallel, |i| gen_recording(&synth, i))?;
    let clean_world = Arc::new(cfg.world.clone());
    let clean_bank = exact_bank(&clean_world)?;
    let epochs = cfg.world.epochs;
    let mut points = Vec::with_capacity(cfg.conditions.len());
    for &condition in &cfg.conditions {
        let rows = try_map_indexed(recordings.len(), Execution::Sequential, |i| -> Result<PlotRow> {
            let rec = &recordings[i];
            let clean = &rec.features[&cfg.sensor];
            let mut bank = None;
            let degraded: Vec<f64> = match condition {
                Degradation::Clean => clean.as_slice().to_vec(),
                Degradation::ZeroSpan { fraction } => degrade(
                    clean.as_slice(),
                    DegradeMode::ZeroSpan {
                        start_frac: 1.0 - fraction,
                        end_frac: 1.0,
                    },
                    0,
                )?,
                Degradation::Awgn { snr_db } => {
                    if let Some(sd) = awgn_sd(clean.as_slice(), snr_db) {
                        bank = Some(exact_bank(&Arc::new(noise_aware(&cfg.world, &cfg.sensor, sd)?))?);
                    }
                    degrade(
                        clean.as_slice(),
                        DegradeMode::Awgn { snr_db },
                        cfg.seed.wrapping_mul(31).wrapping_add(i as u64),
                    )?
                }
            };
            let obs: Vec<(String, Conditioning)> = rec
                .features
                .iter()
                .map(|(n, f)| {
                    let f = if *n == cfg.sensor {
                        FeatureMatrix::from_sequence(degraded.clone())
                    } else {
                        f.clone()
                    };
                    (n.clone(), Conditioning::Features(f))
                })
                .collect();
            let scfg = SamplerConfig {
                base_seed: cfg.sampler.base_seed.wrapping_add((i as u64) << 20),
                record_trajectory: true,
                ..cfg.sampler.clone()
            };
            let runs = sample_many(bank.as_ref().unwrap_or(&clean_bank), &obs, epochs, &scfg)?;
            let gain = information_gain_from_runs(&runs, &cfg.sensor)?;
            let inference = aggregate(runs, epochs)?;
            let ev = evaluate_recording(&rec.id(), &inference.hypnogram, &rec.hypnogram, epochs)?;
            Ok(PlotRow {
                sensor_set: condition.label(),
                recording: rec.id(),
                mean_info_gain: mean_information_gain(&gain, Mask::All)?,
                accuracy: ev.accuracy[0],
                kappa: ev.kappa[0],
            })
        })?;
        let mean = |f: fn(&PlotRow) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
        points.push(SweepPoint {
            condition,
            label: condition.label(),
            mean_info_gain: mean(|r| r.mean_info_gain),
            accuracy: mean(|r| r.accuracy),
            kappa: mean(|r| r.kappa),
            rows,
        });
    }
    Ok(points)
}

pub const PLOT_HEADER: &str = "sensor_set,recording,mean_info_gain,accuracy,kappa";

/// CSV with one row per (sensor set, recording).
pub fn emit_plot_data(rows: &[PlotRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Empty("no evaluation rows to emit".into()));
    }
    let mut out = format!("{PLOT_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.sensor_set, r.recording, r.mean_info_gain, r.accuracy, r.kappa
        ));
    }
    Ok(out)
}

/// Pearson correlation.
pub fn correlation(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::shape("correlation needs two equal series of length at least 2"));
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::param("correlation of a constant series"));
    }
    Ok(sxy / (sxx * syy).sqrt())
}
