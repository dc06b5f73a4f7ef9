//! Small synthetic worlds with exact posteriors.
//!
//! A [`WorldModel`] is a prior over hypnograms (an explicit table or a
//! first-order Markov chain) plus conditionally independent per-epoch sensor
//! emissions. Everything here is exact: posteriors are enumerated over all
//! `5^E` hypnograms and the Bayes-optimal denoiser of the Gaussian-smoothed
//! posterior is available in closed form.
//!
//! Observations are [`FeatureMatrix`] values with one feature per sensor and
//! epoch. A value of exactly `0.0` means "not observed", matching the
//! zero-means-missing convention used for real signals. Categorical symbols
//! are therefore encoded as `k + 1` for symbol index `k`.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypno::{Hypnodensity, Hypnogram, NUM_STAGES};
use crate::par::{self, Execution};
use crate::scorekit::{tweedie_score, Conditioning, Denoiser, FeatureMatrix};

/// Largest epoch count for which `5^E` enumeration is allowed.
pub const ENUMERATION_LIMIT: usize = 8;

/// Floor applied to Gaussian log densities.
pub const LOG_DENSITY_FLOOR: f64 = -745.0;

const NORMALIZATION_TOL: f64 = 1e-9;
const BLOCK: usize = 4096;

type StageRow = [f64; NUM_STAGES];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Prior {
    /// Probability of every hypnogram, indexed with epoch 0 as the most
    /// significant base-5 digit.
    Table { probabilities: Vec<f64> },
    Markov {
        initial: StageRow,
        /// Row-stochastic, `transition[from][to]`.
        transition: [StageRow; NUM_STAGES],
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmissionModel {
    /// `table[stage][symbol]`, rows sum to one.
    Categorical { table: Vec<Vec<f64>> },
    Gaussian { mean: StageRow, sd: StageRow },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorModel {
    pub name: String,
    pub emission: EmissionModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldModel {
    pub epochs: usize,
    pub prior: Prior,
    pub sensors: Vec<SensorModel>,
}

fn log_sum_exp(values: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.into_iter().collect();
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn ln(p: f64) -> f64 {
    if p > 0.0 {
        p.ln()
    } else {
        f64::NEG_INFINITY
    }
}

impl EmissionModel {
    pub fn validate(&self) -> Result<()> {
        match self {
            EmissionModel::Categorical { table } => {
                if table.len() != NUM_STAGES {
                    return Err(Error::param("categorical table needs 5 rows"));
                }
                let k = table[0].len();
                if k == 0 {
                    return Err(Error::param("categorical table needs at least one symbol"));
                }
                for row in table {
                    if row.len() != k || row.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
                        return Err(Error::param("categorical rows must be equal-length and nonnegative"));
                    }
                    if (row.iter().sum::<f64>() - 1.0).abs() > NORMALIZATION_TOL {
                        return Err(Error::param("categorical rows must sum to 1"));
                    }
                }
            }
            EmissionModel::Gaussian { mean, sd } => {
                if mean.iter().any(|m| !m.is_finite()) || sd.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
                    return Err(Error::param("gaussian emission needs finite means and positive sd"));
                }
            }
        }
        Ok(())
    }

    pub fn symbols(&self) -> Option<usize> {
        match self {
            EmissionModel::Categorical { table } => Some(table[0].len()),
            EmissionModel::Gaussian { .. } => None,
        }
    }

    /// Log-likelihood of one observed value under each stage. Missing values
    /// (exact zero, or a categorical code outside `1..=K`) contribute nothing.
    pub fn log_likelihood(&self, x: f64) -> StageRow {
        if x == 0.0 || !x.is_finite() {
            return [0.0; NUM_STAGES];
        }
        match self {
            EmissionModel::Categorical { table } => {
                let code = x.round();
                let k = table[0].len();
                if code < 1.0 || code > k as f64 {
                    return [0.0; NUM_STAGES];
                }
                let sym = code as usize - 1;
                std::array::from_fn(|s| ln(table[s][sym]))
            }
            EmissionModel::Gaussian { mean, sd } => std::array::from_fn(|s| {
                let z = (x - mean[s]) / sd[s];
                let v = -0.5 * z * z - sd[s].ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
                v.max(LOG_DENSITY_FLOOR)
            }),
        }
    }

    /// Draws an observation for `stage`, already encoded as a feature value.
    pub fn sample<R: Rng + ?Sized>(&self, stage: usize, rng: &mut R) -> f64 {
        match self {
            EmissionModel::Categorical { table } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let row = &table[stage];
                for (k, p) in row.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return (k + 1) as f64;
                    }
                }
                row.iter().rposition(|&p| p > 0.0).map_or(1, |k| k + 1) as f64
            }
            EmissionModel::Gaussian { mean, sd } => {
                let n = Normal::new(mean[stage], sd[stage]).expect("validated sd");
                n.sample(rng)
            }
        }
    }
}

/// Decodes a table index into stage indices (epoch 0 most significant).
pub fn decode_index(mut index: usize, epochs: usize, out: &mut [u8]) {
    for e in (0..epochs).rev() {
        out[e] = (index % NUM_STAGES) as u8;
        index /= NUM_STAGES;
    }
}

pub fn encode_index(stages: &[usize]) -> usize {
    stages.iter().fold(0, |acc, &s| acc * NUM_STAGES + s)
}

fn table_size(epochs: usize) -> Result<usize> {
    if epochs > ENUMERATION_LIMIT {
        return Err(Error::Infeasible {
            epochs,
            limit: ENUMERATION_LIMIT,
        });
    }
    Ok(NUM_STAGES.pow(epochs as u32))
}

impl WorldModel {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::param("world needs at least one epoch"));
        }
        match &self.prior {
            Prior::Table { probabilities } => {
                let n = table_size(self.epochs)?;
                if probabilities.len() != n {
                    return Err(Error::param(format!(
                        "prior table needs {n} entries, got {}",
                        probabilities.len()
                    )));
                }
                if probabilities.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
                    return Err(Error::param("prior probabilities must be nonnegative"));
                }
                if (probabilities.iter().sum::<f64>() - 1.0).abs() > NORMALIZATION_TOL {
                    return Err(Error::param("prior table must sum to 1"));
                }
            }
            Prior::Markov { initial, transition } => {
                let rows = std::iter::once(initial).chain(transition.iter());
                for row in rows {
                    if row.iter().any(|&p| !(p >= 0.0 && p.is_finite()))
                        || (row.iter().sum::<f64>() - 1.0).abs() > NORMALIZATION_TOL
                    {
                        return Err(Error::param("markov initial and transition rows must be distributions"));
                    }
                }
            }
        }
        for (i, s) in self.sensors.iter().enumerate() {
            s.emission.validate()?;
            if self.sensors[..i].iter().any(|o| o.name == s.name) {
                return Err(Error::param(format!("duplicate sensor `{}`", s.name)));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let w: WorldModel = serde_json::from_str(text)?;
        w.validate()?;
        Ok(w)
    }

    pub fn sensor(&self, name: &str) -> Result<&SensorModel> {
        self.sensors
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::UnknownSensor(name.to_string()))
    }

    pub fn log_prior(&self, stages: &[usize]) -> f64 {
        match &self.prior {
            Prior::Table { probabilities } => ln(probabilities[encode_index(stages)]),
            Prior::Markov { initial, transition } => {
                let mut lp = ln(initial[stages[0]]);
                for w in stages.windows(2) {
                    lp += ln(transition[w[0]][w[1]]);
                }
                lp
            }
        }
    }

    /// Same world with the prior expanded into an explicit table.
    pub fn to_table(&self) -> Result<WorldModel> {
        let n = table_size(self.epochs)?;
        let mut digits = vec![0u8; self.epochs];
        let probabilities = (0..n)
            .map(|i| {
                decode_index(i, self.epochs, &mut digits);
                let stages: Vec<usize> = digits.iter().map(|&d| d as usize).collect();
                self.log_prior(&stages).exp()
            })
            .collect();
        Ok(WorldModel {
            epochs: self.epochs,
            prior: Prior::Table { probabilities },
            sensors: self.sensors.clone(),
        })
    }

    /// Per-epoch, per-stage log-likelihood summed over the given sensors.
    pub fn evidence(&self, obs: &[(String, FeatureMatrix)]) -> Result<Vec<StageRow>> {
        let mut ev = vec![[0.0; NUM_STAGES]; self.epochs];
        for (name, feats) in obs {
            let sensor = self.sensor(name)?;
            if feats.epochs() != self.epochs || feats.dims() != 1 {
                return Err(Error::shape(format!(
                    "observation of `{name}` must be 1x{}, got {}x{}",
                    self.epochs,
                    feats.dims(),
                    feats.epochs()
                )));
            }
            for (e, row) in ev.iter_mut().enumerate() {
                let ll = sensor.emission.log_likelihood(feats.epoch(e)[0]);
                row.iter_mut().zip(ll).for_each(|(a, b)| *a += b);
            }
        }
        Ok(ev)
    }

    /// Prior per-epoch stage marginals (by enumeration for tables, by
    /// propagation for Markov chains).
    pub fn prior_marginals(&self) -> Result<Hypnodensity> {
        let ev = vec![[0.0; NUM_STAGES]; self.epochs];
        smoothed_marginals(self, &ev)
    }

    pub fn sample_hypnogram<R: Rng + ?Sized>(&self, rng: &mut R) -> Hypnogram {
        let draw = |row: &[f64], rng: &mut R| -> usize {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, p) in row.iter().enumerate() {
                acc += p;
                if u < acc {
                    return i;
                }
            }
            row.iter().rposition(|&p| p > 0.0).unwrap_or(0)
        };
        let stages = match &self.prior {
            Prior::Table { probabilities } => {
                let idx = draw(probabilities, rng);
                let mut digits = vec![0u8; self.epochs];
                decode_index(idx, self.epochs, &mut digits);
                digits.iter().map(|&d| d as usize).collect::<Vec<_>>()
            }
            Prior::Markov { initial, transition } => {
                let mut v = Vec::with_capacity(self.epochs);
                v.push(draw(initial, rng));
                for e in 1..self.epochs {
                    let prev = v[e - 1];
                    v.push(draw(&transition[prev], rng));
                }
                v
            }
        };
        Hypnogram::from_indices(&stages).expect("stage indices in range")
    }
}

/// Exact posterior over all `5^E` hypnograms.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorTable {
    pub epochs: usize,
    pub probabilities: Vec<f64>,
}

impl PosteriorTable {
    pub fn probability(&self, h: &Hypnogram) -> f64 {
        self.probabilities[encode_index(&h.indices())]
    }

    /// Per-epoch stage marginals.
    pub fn marginals(&self) -> Hypnodensity {
        let mut out = Hypnodensity::zeros(self.epochs);
        let mut digits = vec![0u8; self.epochs];
        for (i, &p) in self.probabilities.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            decode_index(i, self.epochs, &mut digits);
            for (e, &d) in digits.iter().enumerate() {
                let v = out.get(d as usize, e) + p;
                out.set(d as usize, e, v);
            }
        }
        out
    }

    /// Half the L1 distance to another table over the same hypnograms.
    pub fn total_variation(&self, other: &[f64]) -> f64 {
        0.5 * self
            .probabilities
            .iter()
            .zip(other)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }
}

/// Unnormalized log weight of every hypnogram: `log p(h) + sum_e ev[e][h_e]`.
fn enumerate_log_weights(world: &WorldModel, ev: &[StageRow], exec: Execution) -> Result<Vec<f64>> {
    let n = table_size(world.epochs)?;
    let blocks = n.div_ceil(BLOCK);
    let parts = par::map_indexed(blocks, exec, |b| {
        let mut digits = vec![0u8; world.epochs];
        let mut stages = vec![0usize; world.epochs];
        (b * BLOCK..((b + 1) * BLOCK).min(n))
            .map(|i| {
                decode_index(i, world.epochs, &mut digits);
                stages.iter_mut().zip(&digits).for_each(|(s, &d)| *s = d as usize);
                let lp = world.log_prior(&stages);
                if lp == f64::NEG_INFINITY {
                    return lp;
                }
                lp + stages.iter().enumerate().map(|(e, &s)| ev[e][s]).sum::<f64>()
            })
            .collect::<Vec<_>>()
    });
    Ok(parts.into_iter().flatten().collect())
}

/// Normalizes log weights in fixed blocks so the result is independent of the
/// thread count.
fn normalize_log_weights(log_w: &[f64]) -> Result<Vec<f64>> {
    let m = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return Err(Error::param("observations have zero probability under the world model"));
    }
    let total: f64 = log_w
        .chunks(BLOCK)
        .map(|c| c.iter().map(|&l| (l - m).exp()).sum::<f64>())
        .sum();
    Ok(log_w.iter().map(|&l| (l - m).exp() / total).collect())
}

pub fn enumerate_posterior(world: &WorldModel, obs: &[(String, FeatureMatrix)]) -> Result<PosteriorTable> {
    enumerate_posterior_with(world, obs, Execution::default())
}

pub fn enumerate_posterior_with(
    world: &WorldModel,
    obs: &[(String, FeatureMatrix)],
    exec: Execution,
) -> Result<PosteriorTable> {
    let ev = world.evidence(obs)?;
    let log_w = enumerate_log_weights(world, &ev, exec)?;
    Ok(PosteriorTable {
        epochs: world.epochs,
        probabilities: normalize_log_weights(&log_w)?,
    })
}

/// Marginals of `p(h) * prod_e exp(ev[e][h_e])`.
fn smoothed_marginals(world: &WorldModel, ev: &[StageRow]) -> Result<Hypnodensity> {
    match &world.prior {
        Prior::Markov { initial, transition } => forward_backward(initial, transition, ev),
        Prior::Table { .. } => {
            let log_w = enumerate_log_weights(world, ev, Execution::Sequential)?;
            let table = PosteriorTable {
                epochs: world.epochs,
                probabilities: normalize_log_weights(&log_w)?,
            };
            Ok(table.marginals())
        }
    }
}

fn forward_backward(initial: &StageRow, transition: &[StageRow; NUM_STAGES], ev: &[StageRow]) -> Result<Hypnodensity> {
    let epochs = ev.len();
    let log_init: StageRow = std::array::from_fn(|s| ln(initial[s]));
    let log_t: [StageRow; NUM_STAGES] = std::array::from_fn(|a| std::array::from_fn(|b| ln(transition[a][b])));

    let mut alpha = vec![[0.0; NUM_STAGES]; epochs];
    alpha[0] = std::array::from_fn(|s| log_init[s] + ev[0][s]);
    for e in 1..epochs {
        let prev = alpha[e - 1];
        alpha[e] = std::array::from_fn(|s| ev[e][s] + log_sum_exp((0..NUM_STAGES).map(|p| prev[p] + log_t[p][s])));
    }
    let mut beta = vec![[0.0; NUM_STAGES]; epochs];
    for e in (0..epochs.saturating_sub(1)).rev() {
        let next = beta[e + 1];
        beta[e] = std::array::from_fn(|s| {
            log_sum_exp((0..NUM_STAGES).map(|n| log_t[s][n] + ev[e + 1][n] + next[n]))
        });
    }
    let mut out = Hypnodensity::zeros(epochs);
    for e in 0..epochs {
        let lp: StageRow = std::array::from_fn(|s| alpha[e][s] + beta[e][s]);
        let z = log_sum_exp(lp);
        if z == f64::NEG_INFINITY {
            return Err(Error::param("observations have zero probability under the world model"));
        }
        for (s, v) in lp.iter().enumerate() {
            out.set(s, e, (v - z).exp());
        }
    }
    Ok(out)
}

/// Which conditional law an exact denoiser smooths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Target {
    /// `p(h)`, conditioning ignored.
    Prior,
    /// `p(h | x_name)`; conditioning is a 1xE feature matrix.
    Sensor(String),
    /// `p(h | x_a, x_b, ...)`; conditioning has one feature row per listed
    /// sensor, in order.
    Joint(Vec<String>),
}

impl Target {
    pub fn joint_all(world: &WorldModel) -> Target {
        Target::Joint(world.sensors.iter().map(|s| s.name.clone()).collect())
    }
}

/// Bayes-optimal denoiser of the Gaussian-smoothed posterior of a world:
/// `sum_h w_h onehot(h)` with `w_h ∝ p(h | cond) exp(-|y - onehot(h)|^2 / 2 sigma^2)`.
#[derive(Debug, Clone)]
pub struct ExactDenoiser {
    world: Arc<WorldModel>,
    target: Target,
}

pub fn exact_denoiser(world: Arc<WorldModel>, target: Target) -> Result<ExactDenoiser> {
    world.validate()?;
    match &target {
        Target::Prior => {}
        Target::Sensor(name) => {
            world.sensor(name)?;
        }
        Target::Joint(names) => {
            for n in names {
                world.sensor(n)?;
            }
        }
    }
    Ok(ExactDenoiser { world, target })
}

impl ExactDenoiser {
    pub fn world(&self) -> &WorldModel {
        &self.world
    }

    pub fn target(&self) -> &Target {
        &self.target
    }

    fn sensor_names(&self) -> &[String] {
        match &self.target {
            Target::Prior => &[],
            Target::Sensor(n) => std::slice::from_ref(n),
            Target::Joint(ns) => ns,
        }
    }

    /// Splits a conditioning matrix into per-sensor observations.
    pub fn observations(&self, cond: &Conditioning) -> Result<Vec<(String, FeatureMatrix)>> {
        let names = self.sensor_names();
        let feats = match cond {
            Conditioning::Absent => return Ok(Vec::new()),
            Conditioning::Features(f) => f,
        };
        if names.is_empty() {
            return Ok(Vec::new());
        }
        if feats.dims() != names.len() {
            return Err(Error::shape(format!(
                "expected {} feature rows, got {}",
                names.len(),
                feats.dims()
            )));
        }
        Ok(names
            .iter()
            .enumerate()
            .map(|(f, n)| (n.clone(), FeatureMatrix::from_sequence(feats.row(f))))
            .collect())
    }
}

impl Denoiser for ExactDenoiser {
    fn evaluate(&self, y_noisy: &Hypnodensity, cond: &Conditioning, sigma: f64) -> Result<Hypnodensity> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::param(format!("sigma must be positive, got {sigma}")));
        }
        if y_noisy.epochs() != self.world.epochs {
            return Err(Error::shape(format!(
                "state has {} epochs, world has {}",
                y_noisy.epochs(),
                self.world.epochs
            )));
        }
        cond.check_epochs(self.world.epochs)?;
        let obs = self.observations(cond)?;
        let mut ev = self.world.evidence(&obs)?;
        // |y - onehot(h)|^2 = const - 2 sum_e y[h_e, e], so only the linear
        // term depends on h.
        let inv_var = 1.0 / (sigma * sigma);
        for (e, row) in ev.iter_mut().enumerate() {
            for (s, v) in row.iter_mut().enumerate() {
                *v += y_noisy.get(s, e) * inv_var;
            }
        }
        smoothed_marginals(&self.world, &ev)
    }
}

/// Score of the sigma-smoothed posterior `p(h | obs)`.
pub fn exact_smoothed_score(
    world: &Arc<WorldModel>,
    obs: &[(String, FeatureMatrix)],
    y: &Hypnodensity,
    sigma: f64,
) -> Result<Hypnodensity> {
    let names: Vec<String> = obs.iter().map(|(n, _)| n.clone()).collect();
    let den = exact_denoiser(world.clone(), Target::Joint(names))?;
    let cond = joint_conditioning(obs)?;
    let d = den.evaluate(y, &cond, sigma)?;
    tweedie_score(&d, y, sigma)
}

/// Stacks per-sensor observation rows into one conditioning matrix.
pub fn joint_conditioning(obs: &[(String, FeatureMatrix)]) -> Result<Conditioning> {
    let Some(first) = obs.first() else {
        return Ok(Conditioning::Absent);
    };
    let epochs = first.1.epochs();
    let dims = obs.len();
    let mut data = vec![0.0; dims * epochs];
    for (f, (_, m)) in obs.iter().enumerate() {
        if m.epochs() != epochs || m.dims() != 1 {
            return Err(Error::shape("joint observations must all be 1xE"));
        }
        for e in 0..epochs {
            data[e * dims + f] = m.epoch(e)[0];
        }
    }
    Ok(Conditioning::Features(FeatureMatrix::new(dims, epochs, data)?))
}

/// Random world generators used by tests, benches and `oracle-check`.
pub mod random {
    use super::*;
    use rand_distr::Gamma;

    fn dirichlet<R: Rng + ?Sized>(rng: &mut R, alpha: &[f64]) -> Vec<f64> {
        let draws: Vec<f64> = alpha
            .iter()
            .map(|&a| Gamma::new(a, 1.0).expect("positive shape").sample(rng).max(1e-300))
            .collect();
        let sum: f64 = draws.iter().sum();
        draws.iter().map(|d| d / sum).collect()
    }

    fn row<R: Rng + ?Sized>(rng: &mut R, alpha: &[f64]) -> StageRow {
        let v = dirichlet(rng, alpha);
        std::array::from_fn(|i| v[i])
    }

    /// Markov prior whose transition matrix puts extra mass on staying put.
    pub fn markov_prior<R: Rng + ?Sized>(rng: &mut R, stickiness: f64) -> Prior {
        let initial = row(rng, &[1.0; NUM_STAGES]);
        let transition = std::array::from_fn(|from| {
            let alpha: Vec<f64> = (0..NUM_STAGES)
                .map(|to| if to == from { 1.0 + stickiness } else { 1.0 })
                .collect();
            row(rng, &alpha)
        });
        Prior::Markov { initial, transition }
    }

    /// Gaussian sensor with stage means a random permutation of
    /// `1, 1 + spacing, ...` and a common standard deviation.
    pub fn gaussian_sensor<R: Rng + ?Sized>(rng: &mut R, name: &str, spacing: f64, sd: f64) -> SensorModel {
        let mut order: Vec<usize> = (0..NUM_STAGES).collect();
        for i in (1..NUM_STAGES).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mean = std::array::from_fn(|s| 1.0 + spacing * order[s] as f64);
        SensorModel {
            name: name.to_string(),
            emission: EmissionModel::Gaussian { mean, sd: [sd; NUM_STAGES] },
        }
    }

    /// Categorical sensor with strictly positive rows; `concentration`
    /// controls how peaked each stage's symbol distribution is.
    pub fn categorical_sensor<R: Rng + ?Sized>(rng: &mut R, name: &str, symbols: usize, concentration: f64) -> SensorModel {
        let table = (0..NUM_STAGES)
            .map(|s| {
                let alpha: Vec<f64> = (0..symbols)
                    .map(|k| if k % NUM_STAGES == s { 1.0 + concentration } else { 1.0 })
                    .collect();
                dirichlet(rng, &alpha).into_iter().map(|p| p.max(1e-6)).collect::<Vec<_>>()
            })
            .map(|r: Vec<f64>| {
                let sum: f64 = r.iter().sum();
                r.into_iter().map(|p| p / sum).collect()
            })
            .collect();
        SensorModel {
            name: name.to_string(),
            emission: EmissionModel::Categorical { table },
        }
    }

    /// World whose prior is a point mass on `h`.
    pub fn single_atom(h: &Hypnogram) -> Result<WorldModel> {
        let n = table_size(h.epochs())?;
        let mut probabilities = vec![0.0; n];
        probabilities[encode_index(&h.indices())] = 1.0;
        Ok(WorldModel {
            epochs: h.epochs(),
            prior: Prior::Table { probabilities },
            sensors: Vec::new(),
        })
    }

    /// Draws one observation sequence per sensor for hypnogram `h`.
    pub fn observe<R: Rng + ?Sized>(world: &WorldModel, h: &Hypnogram, rng: &mut R) -> Vec<(String, FeatureMatrix)> {
        world
            .sensors
            .iter()
            .map(|s| {
                let v = h.stages().iter().map(|st| s.emission.sample(st.index(), rng)).collect();
                (s.name.clone(), FeatureMatrix::from_sequence(v))
            })
            .collect()
    }
}
