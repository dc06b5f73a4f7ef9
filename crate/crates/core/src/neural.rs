//! A small trainable denoiser: windowed affine encoder, two residual blocks
//! with an additive noise-level embedding, and a per-epoch softmax head.
//!
//! All gradients are written out by hand; [`grad_check`] compares them with
//! central differences.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypno::{one_hot, Hypnodensity, NUM_STAGES};
use crate::scorekit::{Conditioning, Denoiser, FeatureMatrix};
use crate::synth::Recording;

pub const FORMAT_TAG: &str = "fsdm-reference-denoiser/v1";

const SKIP_SCALE: f64 = std::f64::consts::FRAC_1_SQRT_2;
const BLOCKS: usize = 2;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    /// Epochs of context on each side.
    pub window_radius: usize,
    /// Width of the noise-level embedding.
    pub channels: usize,
    pub hidden: usize,
    pub sigma_data: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            window_radius: 2,
            channels: 32,
            hidden: 32,
            sigma_data: 0.3160,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels < 4 || self.channels % 2 != 0 {
            return Err(Error::param("channels must be even and at least 4"));
        }
        if self.hidden == 0 {
            return Err(Error::param("hidden width must be positive"));
        }
        if !(self.sigma_data > 0.0 && self.sigma_data.is_finite()) {
            return Err(Error::param("sigma_data must be positive"));
        }
        Ok(())
    }

    fn window(&self) -> usize {
        2 * self.window_radius + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub p_augment: f64,
    pub p_zero: f64,
    pub sigma_log_mean: f64,
    pub sigma_log_sd: f64,
    pub steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            p_augment: 0.5,
            p_zero: 0.1,
            sigma_log_mean: 0.2,
            sigma_log_sd: 1.4,
            steps: 2000,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_augment", self.p_augment), ("p_zero", self.p_zero)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::param(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        if !(self.sigma_log_sd >= 0.0) || !self.sigma_log_mean.is_finite() {
            return Err(Error::param("invalid noise-level distribution"));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::param("invalid optimizer settings"));
        }
        Ok(())
    }
}

/// `[cos(s f), sin(s f)]` with `s = ln(sigma) / 4` and `f_c = 1000^(-c / (C/2 - 1))`.
pub fn timestep_embedding(sigma: f64, channels: usize) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::param(format!("sigma must be positive, got {sigma}")));
    }
    if channels < 4 || channels % 2 != 0 {
        return Err(Error::param("embedding width must be even and at least 4"));
    }
    let half = channels / 2;
    let s = 0.25 * sigma.ln();
    let freqs: Vec<f64> = (0..half)
        .map(|c| 1000f64.powf(-(c as f64) / (half - 1) as f64))
        .collect();
    Ok(freqs
        .iter()
        .map(|f| (s * f).cos())
        .chain(freqs.iter().map(|f| (s * f).sin()))
        .collect())
}

/// `y / sqrt(sigma_data^2 + sigma^2)`.
pub fn input_scale(y: &Hypnodensity, sigma: f64, sigma_data: f64) -> Hypnodensity {
    let mut out = y.clone();
    out.scale(1.0 / (sigma_data * sigma_data + sigma * sigma).sqrt());
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// `out += W x` for row-major `W` (rows x cols).
fn matvec_acc(w: &[f64], cols: usize, x: &[f64], out: &mut [f64]) {
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out += W^T g`.
fn matvec_t_acc(w: &[f64], cols: usize, g: &[f64], out: &mut [f64]) {
    for (r, gr) in g.iter().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        out.iter_mut().zip(row).for_each(|(o, a)| *o += a * gr);
    }
}

/// `dW += g x^T`.
fn outer_acc(dw: &mut [f64], cols: usize, g: &[f64], x: &[f64]) {
    for (r, gr) in g.iter().enumerate() {
        let row = &mut dw[r * cols..(r + 1) * cols];
        row.iter_mut().zip(x).for_each(|(d, xv)| *d += gr * xv);
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Param {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    params: Vec<Param>,
    total: usize,
}

impl Layout {
    fn new(arch: &ArchConfig, features: usize) -> Layout {
        let h = arch.hidden;
        let w = arch.window();
        let mut shapes = vec![
            ("enc_y".to_string(), h, NUM_STAGES * w),
            ("enc_x".to_string(), h, features * w),
            ("enc_b".to_string(), h, 1),
        ];
        for k in 0..BLOCKS {
            shapes.push((format!("block{k}_emb_w"), h, arch.channels));
            shapes.push((format!("block{k}_emb_b"), h, 1));
            shapes.push((format!("block{k}_w"), h, h));
            shapes.push((format!("block{k}_b"), h, 1));
        }
        shapes.push(("out_w".to_string(), NUM_STAGES, h));
        shapes.push(("out_b".to_string(), NUM_STAGES, 1));
        let mut offset = 0;
        let params = shapes
            .into_iter()
            .map(|(name, rows, cols)| {
                let p = Param { name, rows, cols, offset };
                offset += rows * cols;
                p
            })
            .collect();
        Layout { params, total: offset }
    }

    fn get(&self, name: &str) -> &Param {
        self.params.iter().find(|p| p.name == name).expect("layout entry")
    }

    fn range(&self, name: &str) -> std::ops::Range<usize> {
        let p = self.get(name);
        p.offset..p.offset + p.rows * p.cols
    }
}

/// Which conditional law a network is trained for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TrainTarget {
    Prior,
    Sensor(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceDenoiser {
    arch: ArchConfig,
    features: usize,
    sensor: Option<String>,
    layout: Layout,
    params: Vec<f64>,
}

/// One training example: noisy state, conditioning, noise level and the
/// clean one-hot target.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub y_noisy: Hypnodensity,
    pub cond: Conditioning,
    pub sigma: f64,
    pub target: Hypnodensity,
}

struct EpochCache {
    yw: Vec<f64>,
    xw: Vec<f64>,
    pre: [Vec<f64>; BLOCKS],
    u: [Vec<f64>; BLOCKS],
    h_last: Vec<f64>,
    s: Vec<f64>,
    p: [f64; NUM_STAGES],
}

impl ReferenceDenoiser {
    /// Randomly initialized network for `features` conditioning rows.
    pub fn new(arch: ArchConfig, features: usize, sensor: Option<String>, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch, features);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; layout.total];
        for p in &layout.params {
            if p.cols == 1 {
                continue;
            }
            let gain = if p.name == "out_w" { 0.1 } else { 1.0 };
            let sd = gain / (p.cols as f64).sqrt();
            for v in &mut params[p.offset..p.offset + p.rows * p.cols] {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = sd * z;
            }
        }
        Ok(ReferenceDenoiser {
            arch,
            features,
            sensor,
            layout,
            params,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn sensor(&self) -> Option<&str> {
        self.sensor.as_deref()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn parameters(&self) -> &[f64] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn w(&self, name: &str) -> &[f64] {
        &self.params[self.layout.range(name)]
    }

    fn feature_matrix<'a>(&self, cond: &'a Conditioning, epochs: usize) -> Result<Option<&'a FeatureMatrix>> {
        cond.check_epochs(epochs)?;
        match cond {
            Conditioning::Absent => Ok(None),
            Conditioning::Features(_) if self.features == 0 => Ok(None),
            Conditioning::Features(f) => {
                if f.dims() != self.features {
                    return Err(Error::shape(format!(
                        "network expects {} feature rows, got {}",
                        self.features,
                        f.dims()
                    )));
                }
                Ok(Some(f))
            }
        }
    }

    fn forward_cached(&self, y: &Hypnodensity, cond: &Conditioning, sigma: f64) -> Result<Vec<EpochCache>> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::param(format!("sigma must be positive, got {sigma}")));
        }
        let epochs = y.epochs();
        let feats = self.feature_matrix(cond, epochs)?;
        let yin = input_scale(y, sigma, self.arch.sigma_data);
        let temb = timestep_embedding(sigma, self.arch.channels)?;
        let r = self.arch.window_radius as isize;
        let win = self.arch.window();
        let h = self.arch.hidden;
        let fdim = self.features;

        // the embedding contribution does not depend on the epoch
        let emb: Vec<Vec<f64>> = (0..BLOCKS)
            .map(|k| {
                let mut a = self.w(&format!("block{k}_emb_b")).to_vec();
                matvec_acc(self.w(&format!("block{k}_emb_w")), self.arch.channels, &temb, &mut a);
                a
            })
            .collect();

        let mut caches = Vec::with_capacity(epochs);
        for e in 0..epochs {
            let mut yw = vec![0.0; NUM_STAGES * win];
            let mut xw = vec![0.0; fdim * win];
            for (j, off) in (-r..=r).enumerate() {
                let src = e as isize + off;
                if src < 0 || src >= epochs as isize {
                    continue;
                }
                let src = src as usize;
                yw[j * NUM_STAGES..(j + 1) * NUM_STAGES].copy_from_slice(yin.column(src));
                if let Some(f) = feats {
                    xw[j * fdim..(j + 1) * fdim].copy_from_slice(f.epoch(src));
                }
            }
            let mut hv = self.w("enc_b").to_vec();
            matvec_acc(self.w("enc_y"), NUM_STAGES * win, &yw, &mut hv);
            if fdim > 0 {
                matvec_acc(self.w("enc_x"), fdim * win, &xw, &mut hv);
            }
            let mut pre: [Vec<f64>; BLOCKS] = Default::default();
            let mut u: [Vec<f64>; BLOCKS] = Default::default();
            for k in 0..BLOCKS {
                let pk: Vec<f64> = hv.iter().zip(&emb[k]).map(|(a, b)| a + b).collect();
                let uk: Vec<f64> = pk.iter().map(|&x| silu(x)).collect();
                let mut v = self.w(&format!("block{k}_b")).to_vec();
                matvec_acc(self.w(&format!("block{k}_w")), h, &uk, &mut v);
                hv.iter_mut().zip(&v).for_each(|(a, b)| *a = SKIP_SCALE * (*a + b));
                pre[k] = pk;
                u[k] = uk;
            }
            let s: Vec<f64> = hv.iter().map(|&x| silu(x)).collect();
            let mut logits = self.w("out_b").to_vec();
            matvec_acc(self.w("out_w"), h, &s, &mut logits);
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = ex.iter().sum();
            let p = std::array::from_fn(|i| ex[i] / z);
            caches.push(EpochCache {
                yw,
                xw,
                pre,
                u,
                h_last: hv,
                s,
                p,
            });
        }
        Ok(caches)
    }

    pub fn forward(&self, y: &Hypnodensity, cond: &Conditioning, sigma: f64) -> Result<Hypnodensity> {
        let caches = self.forward_cached(y, cond, sigma)?;
        let cols: Vec<[f64; NUM_STAGES]> = caches.iter().map(|c| c.p).collect();
        Ok(Hypnodensity::from_columns(&cols))
    }

    /// Mean per-epoch cross-entropy against the one-hot target.
    pub fn loss(&self, sample: &TrainingSample) -> Result<f64> {
        let out = self.forward(&sample.y_noisy, &sample.cond, sample.sigma)?;
        cross_entropy(&out, &sample.target)
    }

    pub fn loss_and_grad(&self, sample: &TrainingSample) -> Result<(f64, Vec<f64>)> {
        sample.target.check_same_shape(&sample.y_noisy)?;
        let caches = self.forward_cached(&sample.y_noisy, &sample.cond, sample.sigma)?;
        let epochs = caches.len();
        let h = self.arch.hidden;
        let win = self.arch.window();
        let fdim = self.features;
        let temb = timestep_embedding(sample.sigma, self.arch.channels)?;
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        let r = |name: &str| self.layout.range(name);

        let mut d_emb = vec![vec![0.0; h]; BLOCKS];
        for (e, c) in caches.iter().enumerate() {
            let t = sample.target.column(e);
            loss -= t.iter().zip(&c.p).map(|(ti, pi)| ti * pi.max(f64::MIN_POSITIVE).ln()).sum::<f64>();
            let tsum: f64 = t.iter().sum();
            let dl: Vec<f64> = (0..NUM_STAGES).map(|i| (c.p[i] * tsum - t[i]) / epochs as f64).collect();

            grad[r("out_b")].iter_mut().zip(&dl).for_each(|(g, d)| *g += d);
            outer_acc(&mut grad[r("out_w")], h, &dl, &c.s);
            let mut ds = vec![0.0; h];
            matvec_t_acc(self.w("out_w"), h, &dl, &mut ds);
            let mut dh: Vec<f64> = ds.iter().zip(&c.h_last).map(|(g, x)| g * silu_grad(*x)).collect();

            for k in (0..BLOCKS).rev() {
                let dv: Vec<f64> = dh.iter().map(|g| SKIP_SCALE * g).collect();
                let mut dh_in = dv.clone();
                grad[r(&format!("block{k}_b"))].iter_mut().zip(&dv).for_each(|(g, d)| *g += d);
                outer_acc(&mut grad[r(&format!("block{k}_w"))], h, &dv, &c.u[k]);
                let mut du = vec![0.0; h];
                matvec_t_acc(self.w(&format!("block{k}_w")), h, &dv, &mut du);
                for i in 0..h {
                    let dpre = du[i] * silu_grad(c.pre[k][i]);
                    dh_in[i] += dpre;
                    d_emb[k][i] += dpre;
                }
                dh = dh_in;
            }
            grad[r("enc_b")].iter_mut().zip(&dh).for_each(|(g, d)| *g += d);
            outer_acc(&mut grad[r("enc_y")], NUM_STAGES * win, &dh, &c.yw);
            if fdim > 0 {
                outer_acc(&mut grad[r("enc_x")], fdim * win, &dh, &c.xw);
            }
        }
        for (k, de) in d_emb.iter().enumerate() {
            grad[r(&format!("block{k}_emb_b"))].iter_mut().zip(de).for_each(|(g, d)| *g += d);
            outer_acc(&mut grad[r(&format!("block{k}_emb_w"))], self.arch.channels, de, &temb);
        }
        Ok((loss / epochs as f64, grad))
    }

    pub fn to_json(&self) -> Result<String> {
        let weights = self
            .layout
            .params
            .iter()
            .map(|p| {
                (
                    p.name.clone(),
                    WeightArray {
                        rows: p.rows,
                        cols: p.cols,
                        data: self.params[p.offset..p.offset + p.rows * p.cols].to_vec(),
                    },
                )
            })
            .collect();
        let file = ModelFile {
            format: FORMAT_TAG.to_string(),
            arch: self.arch.clone(),
            features: self.features,
            sensor: self.sensor.clone(),
            weights,
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.format != FORMAT_TAG {
            return Err(Error::Parse(format!("unsupported model format `{}`", file.format)));
        }
        file.arch.validate()?;
        let layout = Layout::new(&file.arch, file.features);
        if file.weights.len() != layout.params.len() {
            return Err(Error::Parse("model file has unexpected weight arrays".into()));
        }
        let mut params = vec![0.0; layout.total];
        for p in &layout.params {
            let w = file
                .weights
                .get(&p.name)
                .ok_or_else(|| Error::Parse(format!("model file lacks `{}`", p.name)))?;
            if w.rows != p.rows || w.cols != p.cols || w.data.len() != p.rows * p.cols {
                return Err(Error::Parse(format!("weight `{}` has the wrong shape", p.name)));
            }
            if w.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Parse(format!("weight `{}` is not finite", p.name)));
            }
            params[p.offset..p.offset + w.data.len()].copy_from_slice(&w.data);
        }
        Ok(ReferenceDenoiser {
            arch: file.arch,
            features: file.features,
            sensor: file.sensor,
            layout,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

impl Denoiser for ReferenceDenoiser {
    fn evaluate(&self, y_noisy: &Hypnodensity, cond: &Conditioning, sigma: f64) -> Result<Hypnodensity> {
        self.forward(y_noisy, cond, sigma)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightArray {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format: String,
    arch: ArchConfig,
    features: usize,
    sensor: Option<String>,
    weights: BTreeMap<String, WeightArray>,
}

/// Mean over epochs of `-sum_s target log output`.
pub fn cross_entropy(output: &Hypnodensity, target: &Hypnodensity) -> Result<f64> {
    output.check_same_shape(target)?;
    let total: f64 = output
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .filter(|(_, &t)| t != 0.0)
        .map(|(&p, &t)| -t * p.max(f64::MIN_POSITIVE).ln())
        .sum();
    Ok(total / output.epochs() as f64)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
    b1: f64,
    b2: f64,
}

impl Adam {
    fn new(n: usize, cfg: &TrainConfig) -> Adam {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr: cfg.learning_rate,
            b1: cfg.beta1,
            b2: cfg.beta2,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.b1.powi(self.t);
        let c2 = 1.0 - self.b2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * grad[i];
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + ADAM_EPS);
        }
    }
}

/// Per-step training losses.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

fn conditioning_for(rec: &Recording, target: &TrainTarget) -> Result<Option<FeatureMatrix>> {
    match target {
        TrainTarget::Prior => Ok(None),
        TrainTarget::Sensor(name) => rec
            .features
            .get(name)
            .cloned()
            .map(Some)
            .ok_or_else(|| Error::UnknownSensor(name.clone())),
    }
}

/// Draws one training example. The draw order is fixed: recording, augment
/// flag, zero flag, noise level, noise, span endpoints.
pub fn draw_sample<R: Rng + ?Sized>(
    dataset: &[Recording],
    target: &TrainTarget,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainingSample> {
    let rec = &dataset[rng.random_range(0..dataset.len())];
    let augment = rng.random::<f64>() < cfg.p_augment;
    let zero = rng.random::<f64>() < cfg.p_zero;
    let ln_sigma = Normal::new(cfg.sigma_log_mean, cfg.sigma_log_sd)
        .map_err(|e| Error::param(e.to_string()))?
        .sample(rng);
    let sigma = ln_sigma.exp();
    let clean = one_hot(&rec.hypnogram);
    let epochs = clean.epochs();
    let mut y = clean.clone();
    for v in y.as_mut_slice() {
        let z: f64 = StandardNormal.sample(rng);
        *v += sigma * z;
    }
    let mut k = rng.random_range(0..=epochs);
    let mut l = rng.random_range(0..=epochs);
    if k > l {
        std::mem::swap(&mut k, &mut l);
    }
    let cond = match conditioning_for(rec, target)? {
        None => Conditioning::Absent,
        Some(_) if zero => Conditioning::Absent,
        Some(mut f) => {
            if augment {
                for e in k..l {
                    f.epoch_mut(e).iter_mut().for_each(|v| *v = 0.0);
                }
            }
            Conditioning::Features(f)
        }
    };
    Ok(TrainingSample {
        y_noisy: y,
        cond,
        sigma,
        target: clean,
    })
}

/// Trains a fresh network on `dataset` for `target`.
pub fn train(
    dataset: &[Recording],
    target: &TrainTarget,
    arch: &ArchConfig,
    cfg: &TrainConfig,
) -> Result<(ReferenceDenoiser, TrainLog)> {
    cfg.validate()?;
    let first = dataset.first().ok_or_else(|| Error::Empty("training dataset".into()))?;
    let (features, sensor) = match target {
        TrainTarget::Prior => (0, None),
        TrainTarget::Sensor(name) => {
            let f = conditioning_for(first, target)?.expect("sensor target");
            (f.dims(), Some(name.clone()))
        }
    };
    let mut net = ReferenceDenoiser::new(arch.clone(), features, sensor, cfg.seed)?;
    let mut adam = Adam::new(net.parameter_count(), cfg);
    // separate stream so initialization and data draws do not interact
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut log = TrainLog::default();
    for _ in 0..cfg.steps {
        let sample = draw_sample(dataset, target, cfg, &mut rng)?;
        let (loss, grad) = net.loss_and_grad(&sample)?;
        adam.step(&mut net.params, &grad);
        log.losses.push(loss);
    }
    Ok((net, log))
}

/// Largest relative discrepancy `|a - n| / max(|a| + |n|, 1e-6)` between
/// analytic and central-difference gradients over all parameters.
pub fn grad_check(net: &ReferenceDenoiser, sample: &TrainingSample, eps: f64) -> Result<f64> {
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::param(format!("eps must be in [1e-6, 1e-3], got {eps}")));
    }
    let (_, analytic) = net.loss_and_grad(sample)?;
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for i in 0..net.params.len() {
        let orig = probe.params[i];
        probe.params[i] = orig + eps;
        let lp = probe.loss(sample)?;
        probe.params[i] = orig - eps;
        let lm = probe.loss(sample)?;
        probe.params[i] = orig;
        let numeric = (lp - lm) / (2.0 * eps);
        let rel = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypno::Hypnogram;

    fn rec(h: &[usize], feats: Option<Vec<f64>>) -> Recording {
        let mut features = BTreeMap::new();
        if let Some(f) = feats {
            features.insert("s".to_string(), FeatureMatrix::from_sequence(f));
        }
        Recording {
            index: 0,
            hypnogram: Hypnogram::from_indices(h).unwrap(),
            features,
            waveforms: BTreeMap::new(),
        }
    }

    fn small_arch() -> ArchConfig {
        ArchConfig {
            window_radius: 1,
            channels: 8,
            hidden: 6,
            ..Default::default()
        }
    }

    fn random_y(epochs: usize, seed: u64) -> Hypnodensity {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Hypnodensity::from_epoch_major(epochs, (0..epochs * 5).map(|_| rng.random_range(-0.5..1.5)).collect()).unwrap()
    }

    #[test]
    fn embedding_fixtures() {
        let e = timestep_embedding(1.0, 8).unwrap();
        assert_eq!(&e[..4], &[1.0; 4]);
        assert_eq!(&e[4..], &[0.0; 4]);
        let e = timestep_embedding(4f64.exp(), 4).unwrap();
        let expected = [0.5403023058681398, 0.9999995000000417, 0.8414709848078965, 0.0009999998333333417];
        for (a, b) in e.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(timestep_embedding(0.0, 4).is_err());
        assert!(timestep_embedding(1.0, 5).is_err());
    }

    #[test]
    fn input_scale_fixtures() {
        let y = Hypnodensity::filled(2, 1.0);
        assert_eq!(input_scale(&y, 0.0, 0.316).get(0, 0), 1.0 / 0.316);
        let s = input_scale(&y, 40.0, 0.316).get(3, 1);
        assert!((s - 1.0 / 40.001248180525565).abs() < 1e-15);
        assert_eq!(input_scale(&Hypnodensity::zeros(2), 3.0, 0.316), Hypnodensity::zeros(2));
    }

    #[test]
    fn outputs_are_distributions_and_absent_equals_zeros() {
        let net = ReferenceDenoiser::new(ArchConfig::default(), 2, Some("s".into()), 3).unwrap();
        let y = random_y(7, 1);
        let out = net.forward(&y, &Conditioning::Absent, 0.7).unwrap();
        assert!(out.on_manifold(1e-9));
        assert!(out.as_slice().iter().all(|&v| v >= 0.0));
        let zeros = Conditioning::Features(FeatureMatrix::zeros(2, 7));
        assert_eq!(out, net.forward(&y, &zeros, 0.7).unwrap());
    }

    #[test]
    fn output_is_local() {
        // radius 1: changing epoch 0 leaves epochs 2.. untouched
        let net = ReferenceDenoiser::new(small_arch(), 1, Some("s".into()), 4).unwrap();
        let y = random_y(6, 2);
        let x = FeatureMatrix::from_sequence(vec![0.3, -1.0, 2.0, 0.5, 0.1, 1.1]);
        let a = net.forward(&y, &Conditioning::Features(x.clone()), 0.5).unwrap();
        let mut y2 = y.clone();
        y2.column_mut(0).copy_from_slice(&[3.0, -1.0, 0.0, 0.2, 0.2]);
        let mut x2 = x.clone();
        x2.epoch_mut(0)[0] = -4.0;
        let b = net.forward(&y2, &Conditioning::Features(x2), 0.5).unwrap();
        assert_ne!(a.column(0), b.column(0));
        for e in 2..6 {
            assert_eq!(a.column(e), b.column(e));
        }
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let h = Hypnogram::from_indices(&[0, 3]).unwrap();
        assert_eq!(cross_entropy(&one_hot(&h), &one_hot(&h)).unwrap(), 0.0);
    }

    fn check_sample(features: usize) -> TrainingSample {
        let cond = if features == 0 {
            Conditioning::Absent
        } else {
            Conditioning::Features(FeatureMatrix::new(features, 4, (0..4 * features).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap())
        };
        TrainingSample {
            y_noisy: random_y(4, 9),
            cond,
            sigma: 0.8,
            target: one_hot(&Hypnogram::from_indices(&[1, 1, 4, 0]).unwrap()),
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for features in [0, 2] {
            let net = ReferenceDenoiser::new(small_arch(), features, None, 5).unwrap();
            let err = grad_check(&net, &check_sample(features), 1e-5).unwrap();
            assert!(err < 1e-4, "features {features}: {err}");
        }
    }

    #[test]
    fn finite_difference_error_is_second_order() {
        let net = ReferenceDenoiser::new(small_arch(), 1, None, 6).unwrap();
        let s = check_sample(1);
        let (_, g) = net.loss_and_grad(&s).unwrap();
        let idx = net.layout.range("enc_y").start + 2;
        let fd = |eps: f64| {
            let mut p = net.clone();
            p.params[idx] += eps;
            let a = p.loss(&s).unwrap();
            p.params[idx] -= 2.0 * eps;
            let b = p.loss(&s).unwrap();
            ((a - b) / (2.0 * eps) - g[idx]).abs()
        };
        let ratio = fd(1e-3) / fd(1e-4);
        assert!(ratio > 30.0 && ratio < 300.0, "{ratio}");
    }

    #[test]
    fn json_round_trip() {
        let net = ReferenceDenoiser::new(small_arch(), 2, Some("s".into()), 7).unwrap();
        let back = ReferenceDenoiser::from_json(&net.to_json().unwrap()).unwrap();
        assert_eq!(back, net);
        let bad = net.to_json().unwrap().replace(FORMAT_TAG, "other/v0");
        assert!(ReferenceDenoiser::from_json(&bad).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let data = vec![rec(&[0, 2, 2], Some(vec![1.0, 3.0, 3.0])), rec(&[4, 4, 1], Some(vec![2.0, 2.0, 1.0]))];
        let cfg = TrainConfig {
            steps: 30,
            seed: 11,
            ..Default::default()
        };
        let target = TrainTarget::Sensor("s".into());
        let a = train(&data, &target, &small_arch(), &cfg).unwrap();
        let b = train(&data, &target, &small_arch(), &cfg).unwrap();
        assert_eq!(a, b);
        assert!(train(&[], &target, &small_arch(), &cfg).is_err());
        assert!(train(&data, &TrainTarget::Sensor("nope".into()), &small_arch(), &cfg).is_err());
    }

    #[test]
    fn prior_training_ignores_features() {
        let data = vec![rec(&[0, 2, 2], Some(vec![1.0, 3.0, 3.0]))];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let s = draw_sample(&data, &TrainTarget::Prior, &TrainConfig::default(), &mut rng).unwrap();
            assert_eq!(s.cond, Conditioning::Absent);
        }
    }

    #[test]
    fn augmentation_zeroes_a_span() {
        let data = vec![rec(&[0, 1, 2, 3, 4, 0, 1, 2], Some(vec![1.0; 8]))];
        let cfg = TrainConfig {
            p_augment: 1.0,
            p_zero: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut saw_partial = false;
        for _ in 0..50 {
            let s = draw_sample(&data, &TrainTarget::Sensor("s".into()), &cfg, &mut rng).unwrap();
            let Conditioning::Features(f) = s.cond else { panic!("zeroing disabled") };
            let row = f.row(0);
            let zeros: Vec<usize> = (0..8).filter(|&e| row[e] == 0.0).collect();
            if let (Some(&a), Some(&b)) = (zeros.first(), zeros.last()) {
                assert_eq!(zeros.len(), b - a + 1, "zeroed epochs form one span");
                saw_partial |= zeros.len() < 8;
            }
        }
        assert!(saw_partial);
    }

    #[test]
    fn single_atom_training_learns_the_constant() {
        let h = [3, 0, 4];
        let data = vec![rec(&h, None)];
        let cfg = TrainConfig {
            steps: 2000,
            seed: 3,
            ..Default::default()
        };
        let (net, log) = train(&data, &TrainTarget::Prior, &ArchConfig::default(), &cfg).unwrap();
        let target = one_hot(&Hypnogram::from_indices(&h).unwrap());
        // y drawn from the forward process at sigma = 0.1
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for _ in 0..5 {
            let mut y = target.clone();
            y.as_mut_slice().iter_mut().for_each(|v| {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += 0.1 * z
            });
            let out = net.forward(&y, &Conditioning::Absent, 0.1).unwrap();
            assert!(out.max_abs_diff(&target) < 0.05, "{}", out.max_abs_diff(&target));
        }
        let early: f64 = log.losses[..100].iter().sum::<f64>();
        let late: f64 = log.losses[1900..].iter().sum::<f64>();
        assert!(late < early);
    }

    #[test]
    fn validation_loss_decreases_over_windows() {
        let h = [1, 2];
        let data = vec![rec(&h, None)];
        let target = one_hot(&Hypnogram::from_indices(&h).unwrap());
        let val: Vec<TrainingSample> = (0..8)
            .map(|i| {
                let mut y = random_y(2, 100 + i);
                y.scale(0.3);
                y.add_scaled(1.0, &target);
                TrainingSample {
                    y_noisy: y,
                    cond: Conditioning::Absent,
                    sigma: [0.05, 0.3, 1.0, 5.0][i as usize % 4],
                    target: target.clone(),
                }
            })
            .collect();
        let val_loss = |net: &ReferenceDenoiser| val.iter().map(|s| net.loss(s).unwrap()).sum::<f64>();
        let mut prev = f64::INFINITY;
        for window in 1..=10 {
            let cfg = TrainConfig {
                steps: 10 * window,
                seed: 8,
                ..Default::default()
            };
            let (net, _) = train(&data, &TrainTarget::Prior, &ArchConfig::default(), &cfg).unwrap();
            let l = val_loss(&net);
            assert!(l <= prev, "window {window}: {l} > {prev}");
            prev = l;
        }
    }
}
