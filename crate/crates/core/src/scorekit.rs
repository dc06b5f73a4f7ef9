//! Denoiser contract, Tweedie score conversion and the factorized
//! combination of per-sensor denoisers.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypno::{project_manifold, Hypnodensity};

/// Epoch-aligned sensor features, `dims` values per epoch.
///
/// Stored epoch-major (`data[e * dims + f]`). An epoch whose features are all
/// exactly zero is treated as missing by every denoiser in this crate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    dims: usize,
    epochs: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(dims: usize, epochs: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims * epochs {
            return Err(Error::shape(format!(
                "feature matrix {dims}x{epochs} needs {} values, got {}",
                dims * epochs,
                data.len()
            )));
        }
        Ok(FeatureMatrix { dims, epochs, data })
    }

    pub fn zeros(dims: usize, epochs: usize) -> Self {
        FeatureMatrix {
            dims,
            epochs,
            data: vec![0.0; dims * epochs],
        }
    }

    /// One feature per epoch.
    pub fn from_sequence(values: Vec<f64>) -> Self {
        FeatureMatrix {
            dims: 1,
            epochs: values.len(),
            data: values,
        }
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn epochs(&self) -> usize {
        self.epochs
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn epoch(&self, e: usize) -> &[f64] {
        &self.data[e * self.dims..(e + 1) * self.dims]
    }

    pub fn epoch_mut(&mut self, e: usize) -> &mut [f64] {
        &mut self.data[e * self.dims..(e + 1) * self.dims]
    }

    pub fn epoch_missing(&self, e: usize) -> bool {
        self.epoch(e).iter().all(|&v| v == 0.0)
    }

    /// Values of feature `f` across epochs.
    pub fn row(&self, f: usize) -> Vec<f64> {
        (0..self.epochs).map(|e| self.data[e * self.dims + f]).collect()
    }
}

/// What a denoiser is conditioned on.
#[derive(Debug, Clone, PartialEq)]
pub enum Conditioning {
    Features(FeatureMatrix),
    /// No sensor data; semantically the all-zeros input.
    Absent,
}

impl Conditioning {
    pub fn check_epochs(&self, epochs: usize) -> Result<()> {
        match self {
            Conditioning::Features(f) if f.epochs() != epochs => Err(Error::shape(format!(
                "conditioning has {} epochs, state has {epochs}",
                f.epochs()
            ))),
            _ => Ok(()),
        }
    }
}

/// `evaluate(y_noisy, cond, sigma)` returns an estimate of the clean
/// hypnodensity whose columns lie on the probability simplex.
///
/// Implementations are deterministic and safe to share across threads.
pub trait Denoiser: Send + Sync {
    fn evaluate(&self, y_noisy: &Hypnodensity, cond: &Conditioning, sigma: f64) -> Result<Hypnodensity>;
}

impl<D: Denoiser + ?Sized> Denoiser for Arc<D> {
    fn evaluate(&self, y_noisy: &Hypnodensity, cond: &Conditioning, sigma: f64) -> Result<Hypnodensity> {
        (**self).evaluate(y_noisy, cond, sigma)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for Box<D> {
    fn evaluate(&self, y_noisy: &Hypnodensity, cond: &Conditioning, sigma: f64) -> Result<Hypnodensity> {
        (**self).evaluate(y_noisy, cond, sigma)
    }
}

pub type SharedDenoiser = Arc<dyn Denoiser>;

/// Global prior plus named per-sensor denoisers.
#[derive(Clone)]
pub struct SensorBank {
    global_prior: SharedDenoiser,
    sensors: Vec<(String, SharedDenoiser)>,
}

impl fmt::Debug for SensorBank {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SensorBank")
            .field("sensors", &self.sensors.iter().map(|(n, _)| n).collect::<Vec<_>>())
            .finish_non_exhaustive()
    }
}

impl SensorBank {
    pub fn new(global_prior: SharedDenoiser) -> Self {
        SensorBank {
            global_prior,
            sensors: Vec::new(),
        }
    }

    pub fn with_sensor(mut self, name: impl Into<String>, denoiser: SharedDenoiser) -> Result<Self> {
        self.add_sensor(name, denoiser)?;
        Ok(self)
    }

    pub fn add_sensor(&mut self, name: impl Into<String>, denoiser: SharedDenoiser) -> Result<()> {
        let name = name.into();
        if self.sensors.iter().any(|(n, _)| *n == name) {
            return Err(Error::param(format!("duplicate sensor name `{name}`")));
        }
        self.sensors.push((name, denoiser));
        Ok(())
    }

    pub fn global_prior(&self) -> &dyn Denoiser {
        self.global_prior.as_ref()
    }

    pub fn sensor(&self, name: &str) -> Result<&dyn Denoiser> {
        self.sensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, d)| d.as_ref())
            .ok_or_else(|| Error::UnknownSensor(name.to_string()))
    }

    pub fn sensor_names(&self) -> impl Iterator<Item = &str> {
        self.sensors.iter().map(|(n, _)| n.as_str())
    }
}

/// Observed sensors: (name, conditioning) pairs. Names may repeat.
pub type Observations = [(String, Conditioning)];

/// Weight of the likelihood terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "LambdaRepr", into = "LambdaRepr")]
pub enum Lambda {
    /// `1 / N` for N observations.
    #[default]
    Auto,
    Fixed(f64),
}

impl Lambda {
    pub fn resolve(self, n_obs: usize) -> f64 {
        match self {
            Lambda::Auto if n_obs == 0 => 0.0,
            Lambda::Auto => 1.0 / n_obs as f64,
            Lambda::Fixed(v) => v,
        }
    }
}

impl FromStr for Lambda {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(Lambda::Auto);
        }
        s.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .map(Lambda::Fixed)
            .ok_or_else(|| Error::Parse(format!("lambda must be a number or `auto`, got `{s}`")))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum LambdaRepr {
    Fixed(f64),
    Keyword(String),
}

impl TryFrom<LambdaRepr> for Lambda {
    type Error = Error;

    fn try_from(r: LambdaRepr) -> Result<Self> {
        match r {
            LambdaRepr::Fixed(v) => Ok(Lambda::Fixed(v)),
            LambdaRepr::Keyword(s) => s.parse(),
        }
    }
}

impl From<Lambda> for LambdaRepr {
    fn from(l: Lambda) -> Self {
        match l {
            Lambda::Auto => LambdaRepr::Keyword("auto".into()),
            Lambda::Fixed(v) => LambdaRepr::Fixed(v),
        }
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::param(format!("sigma must be positive and finite, got {sigma}")));
    }
    Ok(())
}

/// `(denoised - y_noisy) / sigma^2`
pub fn tweedie_score(denoised: &Hypnodensity, y_noisy: &Hypnodensity, sigma: f64) -> Result<Hypnodensity> {
    check_sigma(sigma)?;
    denoised.check_same_shape(y_noisy)?;
    let inv = 1.0 / (sigma * sigma);
    let data = denoised
        .as_slice()
        .iter()
        .zip(y_noisy.as_slice())
        .map(|(d, y)| (d - y) * inv)
        .collect();
    Hypnodensity::from_epoch_major(y_noisy.epochs(), data)
}

/// Likelihood and individual-prior estimates of one observed sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorEstimate {
    pub name: String,
    pub likelihood: Hypnodensity,
    pub prior: Hypnodensity,
}

/// All intermediate products of one combined denoiser evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct FsdmEstimate {
    /// Combined estimate before projection.
    pub raw: Hypnodensity,
    /// Combined estimate after projection onto the column simplex constraint.
    pub projected: Hypnodensity,
    pub per_sensor: Vec<SensorEstimate>,
}

/// Evaluates the global prior and every observed sensor, returning the
/// combined estimate together with the per-sensor pieces.
pub fn fsdm_estimate(
    y_noisy: &Hypnodensity,
    sigma: f64,
    bank: &SensorBank,
    obs: &Observations,
    lambda: Lambda,
) -> Result<FsdmEstimate> {
    check_sigma(sigma)?;
    let epochs = y_noisy.epochs();
    // resolve every name up front so an unknown sensor fails before any work
    let denoisers = obs
        .iter()
        .map(|(name, cond)| {
            cond.check_epochs(epochs)?;
            bank.sensor(name)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut raw = bank.global_prior().evaluate(y_noisy, &Conditioning::Absent, sigma)?;
    raw.check_same_shape(y_noisy)?;
    let weight = lambda.resolve(obs.len());
    let mut delta = Hypnodensity::zeros(epochs);
    let mut per_sensor = Vec::with_capacity(obs.len());
    for ((name, cond), denoiser) in obs.iter().zip(denoisers) {
        let likelihood = denoiser.evaluate(y_noisy, cond, sigma)?;
        let prior = denoiser.evaluate(y_noisy, &Conditioning::Absent, sigma)?;
        likelihood.check_same_shape(y_noisy)?;
        prior.check_same_shape(y_noisy)?;
        delta.add_scaled(1.0, &likelihood);
        delta.add_scaled(-1.0, &prior);
        per_sensor.push(SensorEstimate {
            name: name.clone(),
            likelihood,
            prior,
        });
    }
    if !obs.is_empty() {
        raw.add_scaled(weight, &delta);
    }
    let projected = project_manifold(&raw);
    Ok(FsdmEstimate {
        raw,
        projected,
        per_sensor,
    })
}

/// `tau(D_prior + lambda * sum_i (D_i(x_i) - D_i(absent)))`
pub fn fsdm_denoise(
    y_noisy: &Hypnodensity,
    sigma: f64,
    bank: &SensorBank,
    obs: &Observations,
    lambda: Lambda,
) -> Result<Hypnodensity> {
    Ok(fsdm_estimate(y_noisy, sigma, bank, obs, lambda)?.projected)
}

pub fn fsdm_score(
    y_noisy: &Hypnodensity,
    sigma: f64,
    bank: &SensorBank,
    obs: &Observations,
    lambda: Lambda,
) -> Result<Hypnodensity> {
    let denoised = fsdm_denoise(y_noisy, sigma, bank, obs, lambda)?;
    tweedie_score(&denoised, y_noisy, sigma)
}
