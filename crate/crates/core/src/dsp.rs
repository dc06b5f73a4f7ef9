//! Signal preprocessing: scaling, missing-sample handling, Butterworth
//! filtering, polyphase resampling, peak-based rate extraction and controlled
//! degradation.
//!
//! Samples that are exactly `0.0` mark missing data throughout.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypno::EPOCH_SECONDS;

pub const TARGET_FS: f64 = 128.0;
pub const TARGET_EPOCHS: usize = 1792;
pub const CLIP_LIMIT: f64 = 5.0;
pub const FILTER_ORDER: usize = 5;

pub const AMPD_WINDOW_S: f64 = 600.0;
pub const AMPD_OVERLAP_S: f64 = 120.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Cardiac,
    Respiratory,
    Other,
}

impl Category {
    /// Largest AMPD scale in seconds.
    pub fn max_scale_s(self) -> Option<f64> {
        match self {
            Category::Cardiac => Some(5.0),
            Category::Respiratory => Some(60.0),
            Category::Other => None,
        }
    }

    /// Plausible interval range in seconds.
    pub fn valid_interval_s(self) -> Option<(f64, f64)> {
        match self {
            Category::Cardiac => Some((0.3, 2.0)),
            Category::Respiratory => Some((1.0, 30.0)),
            Category::Other => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignalKind {
    pub name: &'static str,
    pub unit: &'static str,
    pub scale: f64,
    pub hp_cutoff: Option<f64>,
    pub lp_cutoff: Option<f64>,
    pub category: Category,
    /// Upsampled by sample-and-hold instead of polyphase resampling.
    pub sample_hold: bool,
}

const fn kind(
    name: &'static str,
    unit: &'static str,
    scale: f64,
    hp_cutoff: Option<f64>,
    lp_cutoff: Option<f64>,
    category: Category,
) -> SignalKind {
    SignalKind {
        name,
        unit,
        scale,
        hp_cutoff,
        lp_cutoff,
        category,
        sample_hold: false,
    }
}

pub static SIGNAL_KINDS: [SignalKind; 18] = [
    kind("eeg", "V", 1e4, Some(0.3), Some(49.0), Category::Other),
    kind("eog", "V", 1e4, Some(0.3), Some(49.0), Category::Other),
    kind("emg_chin", "V", 1e4, Some(10.0), Some(49.0), Category::Other),
    kind("ecg", "V", 1e3, Some(0.3), Some(49.0), Category::Cardiac),
    kind("rip", "V", 1e-2, Some(0.1), Some(15.0), Category::Respiratory),
    kind("thermistor", "V", 1e4, Some(0.1), Some(15.0), Category::Respiratory),
    kind("nasal_cannula", "cmH2O", 1.0, Some(0.03), Some(49.0), Category::Respiratory),
    kind("pap_flow", "cmH2O", 10.0, Some(0.03), Some(49.0), Category::Respiratory),
    kind("suprasternal_notch", "V", 10.0, Some(0.03), Some(49.0), Category::Respiratory),
    kind("esophageal_pressure", "mmHg", 1e-1, Some(0.03), Some(49.0), Category::Respiratory),
    kind("snore", "V", 1e3, Some(10.0), Some(49.0), Category::Other),
    kind("ppg", "V", 1e-2, Some(0.3), Some(49.0), Category::Cardiac),
    SignalKind {
        sample_hold: true,
        ..kind("spo2", "%", 1e-2, None, None, Category::Other)
    },
    kind("emg_fds", "V", 1e4, Some(10.0), Some(49.0), Category::Other),
    kind("emg_legs", "V", 1e4, Some(10.0), Some(49.0), Category::Other),
    kind("emg_scm", "V", 1e4, Some(10.0), Some(49.0), Category::Other),
    kind("ihr", "bpm", 1.0 / 60.0, None, None, Category::Other),
    kind("ibr", "brpm", 1.0 / 60.0, None, None, Category::Other),
];

pub fn signal_kind(name: &str) -> Result<&'static SignalKind> {
    SIGNAL_KINDS
        .iter()
        .find(|k| k.name == name)
        .ok_or_else(|| Error::param(format!("unknown signal kind `{name}`")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawSignal {
    pub samples: Vec<f64>,
    pub fs: f64,
    pub kind: String,
}

impl RawSignal {
    pub fn new(samples: Vec<f64>, fs: f64, kind: &str) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("signal has no samples".into()));
        }
        if !(fs > 0.0 && fs.is_finite()) {
            return Err(Error::param(format!("sampling rate must be positive, got {fs}")));
        }
        signal_kind(kind)?;
        Ok(RawSignal {
            samples,
            fs,
            kind: kind.to_string(),
        })
    }
}

pub fn scale_signal(s: &[f64], kind: &SignalKind) -> Vec<f64> {
    s.iter().map(|v| v * kind.scale).collect()
}

/// Replaces exact zeros by linear interpolation between the nearest nonzero
/// neighbours (nearest value at the edges). Returns the filled signal and the
/// missing indices.
pub fn interpolate_missing(s: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let missing: Vec<usize> = (0..s.len()).filter(|&i| s[i] == 0.0).collect();
    let known: Vec<usize> = (0..s.len()).filter(|&i| s[i] != 0.0).collect();
    if known.is_empty() || missing.is_empty() {
        return (s.to_vec(), missing);
    }
    let mut out = s.to_vec();
    let mut next = 0;
    for &i in &missing {
        while next < known.len() && known[next] < i {
            next += 1;
        }
        out[i] = match (next.checked_sub(1).map(|p| known[p]), known.get(next)) {
            (Some(a), Some(&b)) => {
                let w = (i - a) as f64 / (b - a) as f64;
                s[a] + w * (s[b] - s[a])
            }
            (Some(a), None) => s[a],
            (None, Some(&b)) => s[b],
            (None, None) => unreachable!("known is nonempty"),
        };
    }
    (out, missing)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterMode {
    HighPass,
    LowPass,
}

/// One normalized second-order section (`a0 = 1`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sos {
    pub sections: Vec<Biquad>,
}

/// Digital Butterworth filter via the bilinear transform with frequency
/// prewarping, as a cascade of second-order sections.
pub fn design_butterworth(order: usize, mode: FilterMode, cutoff_hz: f64, fs: f64) -> Result<Sos> {
    if order == 0 {
        return Err(Error::param("filter order must be positive"));
    }
    if !(cutoff_hz > 0.0 && cutoff_hz < fs / 2.0) {
        return Err(Error::param(format!(
            "cutoff {cutoff_hz} Hz must lie strictly between 0 and {} Hz",
            fs / 2.0
        )));
    }
    let k = (std::f64::consts::PI * cutoff_hz / fs).tan();
    let mut sections = Vec::new();
    for i in 0..order / 2 {
        let q = 2.0 * ((2 * i + 1) as f64 * std::f64::consts::PI / (2 * order) as f64).sin();
        let a0 = 1.0 + q * k + k * k;
        let a = [2.0 * (k * k - 1.0) / a0, (1.0 - q * k + k * k) / a0];
        let b = match mode {
            FilterMode::LowPass => [k * k / a0, 2.0 * k * k / a0, k * k / a0],
            FilterMode::HighPass => [1.0 / a0, -2.0 / a0, 1.0 / a0],
        };
        sections.push(Biquad { b, a });
    }
    if order % 2 == 1 {
        let a0 = 1.0 + k;
        let a = [(k - 1.0) / a0, 0.0];
        let b = match mode {
            FilterMode::LowPass => [k / a0, k / a0, 0.0],
            FilterMode::HighPass => [1.0 / a0, -1.0 / a0, 0.0],
        };
        sections.push(Biquad { b, a });
    }
    Ok(Sos { sections })
}

impl Sos {
    /// Causal filtering, transposed direct form II, zero initial state.
    pub fn apply(&self, s: &[f64]) -> Vec<f64> {
        let mut out = s.to_vec();
        for sec in &self.sections {
            let (mut z1, mut z2) = (0.0, 0.0);
            for v in out.iter_mut() {
                let x = *v;
                let y = sec.b[0] * x + z1;
                z1 = sec.b[1] * x - sec.a[0] * y + z2;
                z2 = sec.b[2] * x - sec.a[1] * y;
                *v = y;
            }
        }
        out
    }

    /// Magnitude of the frequency response at `f_hz`.
    pub fn gain(&self, f_hz: f64, fs: f64) -> f64 {
        let w = 2.0 * std::f64::consts::PI * f_hz / fs;
        let (c1, s1, c2, s2) = (w.cos(), w.sin(), (2.0 * w).cos(), (2.0 * w).sin());
        self.sections
            .iter()
            .map(|sec| {
                let nr = sec.b[0] + sec.b[1] * c1 + sec.b[2] * c2;
                let ni = -sec.b[1] * s1 - sec.b[2] * s2;
                let dr = 1.0 + sec.a[0] * c1 + sec.a[1] * c2;
                let di = -sec.a[0] * s1 - sec.a[1] * s2;
                ((nr * nr + ni * ni) / (dr * dr + di * di)).sqrt()
            })
            .product()
    }
}

pub fn apply_filter(filter: &Sos, s: &[f64]) -> Vec<f64> {
    filter.apply(s)
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Rate ratio `fs_to / fs_from` as reduced integers `(up, down)`; both rates
/// must be whole millihertz.
pub fn rational_ratio(fs_from: f64, fs_to: f64) -> Result<(u64, u64)> {
    let to_milli = |f: f64| -> Result<u64> {
        let m = f * 1000.0;
        if !(f > 0.0) || (m - m.round()).abs() > 1e-6 || m.round() > 1e15 {
            return Err(Error::param(format!("rate {f} Hz is not a whole number of millihertz")));
        }
        Ok(m.round() as u64)
    };
    let (a, b) = (to_milli(fs_from)?, to_milli(fs_to)?);
    let g = gcd(a, b);
    Ok((b / g, a / g))
}

/// Zeroth-order modified Bessel function of the first kind.
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < 1e-17 * sum {
            break;
        }
    }
    sum
}

const RESAMPLE_ATTENUATION_DB: f64 = 65.0;

/// Kaiser-windowed sinc lowpass at the upsampled rate, scaled by `up`.
fn resampling_filter(up: u64, down: u64) -> Vec<f64> {
    // band edges relative to the lower of the two Nyquist rates
    let rate = up.max(down) as f64;
    let cutoff = 0.9 / (2.0 * rate);
    let transition = 0.2 / (2.0 * rate);
    let a = RESAMPLE_ATTENUATION_DB;
    let beta = 0.1102 * (a - 8.7);
    let dw = 2.0 * std::f64::consts::PI * transition;
    let mut n = ((a - 8.0) / (2.285 * dw)).ceil() as usize + 1;
    if n % 2 == 0 {
        n += 1;
    }
    let mid = (n - 1) as f64 / 2.0;
    let i0b = bessel_i0(beta);
    (0..n)
        .map(|i| {
            let t = i as f64 - mid;
            let x = 2.0 * cutoff * t;
            let sinc = if t == 0.0 {
                1.0
            } else {
                (std::f64::consts::PI * x).sin() / (std::f64::consts::PI * x)
            };
            let r = t / mid;
            let win = bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / i0b;
            up as f64 * 2.0 * cutoff * sinc * win
        })
        .collect()
}

/// Polyphase windowed-sinc resampling with a centred (zero-delay) filter.
pub fn resample(s: &[f64], fs_from: f64, fs_to: f64) -> Result<Vec<f64>> {
    let (up, down) = rational_ratio(fs_from, fs_to)?;
    if up == down {
        return Ok(s.to_vec());
    }
    let h = resampling_filter(up, down);
    let n_taps = h.len() as i64;
    let delay = (n_taps - 1) / 2;
    let (up, down) = (up as i64, down as i64);
    let n_in = s.len() as i64;
    let n_out = (n_in * up + down - 1) / down;
    Ok((0..n_out)
        .map(|m| {
            // y[m] = sum_j x[j] h[m*down + delay - j*up]
            let t = m * down + delay;
            let j_lo = ((t - n_taps + 1).max(0) + up - 1) / up;
            let j_hi = (t / up).min(n_in - 1);
            (j_lo..=j_hi).map(|j| s[j as usize] * h[(t - j * up) as usize]).sum()
        })
        .collect())
}

/// Repeats every sample `fs_to / fs_from` times; the ratio must be a whole
/// number.
pub fn sample_hold_upsample(s: &[f64], fs_from: f64, fs_to: f64) -> Result<Vec<f64>> {
    let (up, down) = rational_ratio(fs_from, fs_to)?;
    if down != 1 {
        return Err(Error::param(format!(
            "sample-and-hold needs an integer ratio, got {fs_to}/{fs_from}"
        )));
    }
    Ok(s.iter().flat_map(|&v| std::iter::repeat_n(v, up as usize)).collect())
}

/// Maps sample indices to a new rate: input sample `i` covers output samples
/// `round(i r) .. round((i + 1) r)` (at least one), clamped to `len`.
pub fn map_indices(indices: &[usize], fs_from: f64, fs_to: f64, len: usize) -> Vec<usize> {
    let r = fs_to / fs_from;
    let mut out: Vec<usize> = Vec::with_capacity(indices.len());
    for &i in indices {
        let start = (i as f64 * r).round() as usize;
        let end = ((i + 1) as f64 * r).round().max(start as f64 + 1.0) as usize;
        out.extend(start..end.min(len));
    }
    out.sort_unstable();
    out.dedup();
    out
}

pub fn restore_zeros(s: &[f64], missing: &[usize]) -> Vec<f64> {
    let mut out = s.to_vec();
    for &i in missing {
        if let Some(v) = out.get_mut(i) {
            *v = 0.0;
        }
    }
    out
}

pub fn clip(s: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    s.iter().map(|v| v.clamp(lo, hi)).collect()
}

/// Pads with zeros to `target_epochs` epochs at rate `fs`; returns the padded
/// signal and the number of (partially) occupied epochs.
pub fn zero_pad(s: &[f64], target_epochs: usize, fs: f64) -> Result<(Vec<f64>, usize)> {
    let per_epoch = (EPOCH_SECONDS * fs).round() as usize;
    let total = target_epochs * per_epoch;
    if s.len() > total {
        return Err(Error::param(format!(
            "signal of {} samples exceeds {target_epochs} epochs",
            s.len()
        )));
    }
    let valid = s.len().div_ceil(per_epoch);
    let mut out = s.to_vec();
    out.resize(total, 0.0);
    Ok((out, valid))
}

fn detrend(s: &[f64]) -> Vec<f64> {
    let n = s.len() as f64;
    if s.len() < 2 {
        return vec![0.0; s.len()];
    }
    let mx = (n - 1.0) / 2.0;
    let my = s.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, v) in s.iter().enumerate() {
        let dx = i as f64 - mx;
        sxy += dx * (v - my);
        sxx += dx * dx;
    }
    let slope = sxy / sxx;
    s.iter()
        .enumerate()
        .map(|(i, v)| v - my - slope * (i as f64 - mx))
        .collect()
}

/// Local-maxima-scalogram peak detection on one window.
fn ampd_window(x: &[f64], max_scale: usize) -> Vec<usize> {
    let x = detrend(x);
    let n = x.len();
    let l = (n / 2).min(max_scale);
    if l == 0 {
        return Vec::new();
    }
    let is_max = |i: usize, k: usize| i >= k && i + k < n && x[i] > x[i - k] && x[i] > x[i + k];
    // scale with the most local maxima (first one on ties)
    let mut best = (0usize, 1usize);
    for k in 1..=l {
        let count = (k..n.saturating_sub(k)).filter(|&i| is_max(i, k)).count();
        if count > best.0 {
            best = (count, k);
        }
    }
    if best.0 == 0 {
        return Vec::new();
    }
    let lambda = best.1;
    (0..n).filter(|&i| (1..=lambda).all(|k| is_max(i, k))).collect()
}

/// Windowed AMPD. Peaks found in overlapping windows are kept only when they
/// lie beyond the last accepted peak.
pub fn ampd_peaks(s: &[f64], fs: f64, window_s: f64, overlap_s: f64, max_scale_s: f64) -> Result<Vec<usize>> {
    if !(fs > 0.0) || !(window_s > 0.0) || !(overlap_s >= 0.0) || overlap_s >= window_s || !(max_scale_s > 0.0) {
        return Err(Error::param("invalid peak detection settings"));
    }
    let n = s.len();
    let win = ((window_s * fs).round() as usize).max(1);
    let step = ((window_s - overlap_s) * fs).round().max(1.0) as usize;
    let max_scale = ((max_scale_s * fs).round() as usize).max(1);
    let mut peaks: Vec<usize> = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + win).min(n);
        for p in ampd_window(&s[start..end], max_scale) {
            let g = start + p;
            if peaks.last().is_none_or(|&last| g > last) {
                peaks.push(g);
            }
        }
        if end >= n {
            break;
        }
        start += step;
    }
    Ok(peaks)
}

/// Instantaneous rate in events per second, sample-and-hold at `fs`.
///
/// Each interval between consecutive peaks holds from its closing peak until
/// the next one. Intervals outside the plausible range for `category` hold
/// the previous valid value; samples before the first valid interval take its
/// value.
pub fn peaks_to_rate(peaks: &[usize], fs: f64, category: Category, n_samples: usize) -> Result<Vec<f64>> {
    if peaks.len() < 2 {
        return Err(Error::param("rate extraction needs at least two peaks"));
    }
    let (lo, hi) = category.valid_interval_s().unwrap_or((0.0, f64::INFINITY));
    let mut changes: Vec<(usize, f64)> = Vec::new();
    for w in peaks.windows(2) {
        let interval = (w[1] as f64 - w[0] as f64) / fs;
        if interval >= lo && interval <= hi {
            changes.push((w[1], 1.0 / interval));
        }
    }
    let Some(&(_, first)) = changes.first() else {
        return Err(Error::param("no plausible intervals between peaks"));
    };
    let mut out = vec![first; n_samples];
    let mut current = first;
    let mut next = 0;
    for (i, v) in out.iter_mut().enumerate() {
        while next < changes.len() && changes[next].0 <= i {
            current = changes[next].1;
            next += 1;
        }
        *v = current;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum DegradeMode {
    /// Zeroes samples in `[start_frac, end_frac)` of the signal.
    ZeroSpan { start_frac: f64, end_frac: f64 },
    /// Additive white Gaussian noise at `snr_db` relative to the empirical
    /// signal power.
    Awgn { snr_db: f64 },
}

/// Noise standard deviation giving `snr_db` against the mean power of the
/// nonzero samples; `None` when every sample is missing.
pub fn awgn_sd(s: &[f64], snr_db: f64) -> Option<f64> {
    let present: Vec<f64> = s.iter().copied().filter(|&v| v != 0.0).collect();
    if present.is_empty() {
        return None;
    }
    let power = present.iter().map(|v| v * v).sum::<f64>() / present.len() as f64;
    Some((power / 10f64.powf(snr_db / 10.0)).sqrt())
}

/// Applies a degradation. Missing samples (exact zeros) stay missing under
/// additive noise.
pub fn degrade(s: &[f64], mode: DegradeMode, seed: u64) -> Result<Vec<f64>> {
    match mode {
        DegradeMode::ZeroSpan { start_frac, end_frac } => {
            if !(0.0..=1.0).contains(&start_frac) || !(0.0..=1.0).contains(&end_frac) || start_frac > end_frac {
                return Err(Error::param(format!("invalid span [{start_frac}, {end_frac}]")));
            }
            let n = s.len() as f64;
            let a = (start_frac * n).floor() as usize;
            let b = ((end_frac * n).floor() as usize).min(s.len());
            let mut out = s.to_vec();
            out[a..b].iter_mut().for_each(|v| *v = 0.0);
            Ok(out)
        }
        DegradeMode::Awgn { snr_db } => {
            if !snr_db.is_finite() {
                return Err(Error::param("snr must be finite"));
            }
            let Some(sd) = awgn_sd(s, snr_db) else {
                return Ok(s.to_vec());
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok(s.iter()
                .map(|&v| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    if v == 0.0 {
                        0.0
                    } else {
                        v + sd * z
                    }
                })
                .collect())
        }
    }
}

/// Output of the preprocessing pipeline at [`TARGET_FS`].
#[derive(Debug, Clone, PartialEq)]
pub struct Processed {
    pub signal: Vec<f64>,
    pub valid_epochs: usize,
    /// Missing sample indices at the target rate.
    pub missing: Vec<usize>,
    /// Instantaneous rate for cardiac and respiratory kinds.
    pub rate: Option<Vec<f64>>,
}

/// scale, interpolate, resample, high-pass, low-pass, restore zeros, clip,
/// pad. Cardiac and respiratory kinds also yield a rate signal.
pub fn preprocess(raw: &RawSignal, target_epochs: usize) -> Result<Processed> {
    let kind = signal_kind(&raw.kind)?;
    let scaled = scale_signal(&raw.samples, kind);
    let (filled, missing_raw) = interpolate_missing(&scaled);
    let mut s = if kind.sample_hold {
        sample_hold_upsample(&filled, raw.fs, TARGET_FS)?
    } else {
        resample(&filled, raw.fs, TARGET_FS)?
    };
    if let Some(fc) = kind.hp_cutoff {
        s = design_butterworth(FILTER_ORDER, FilterMode::HighPass, fc, TARGET_FS)?.apply(&s);
    }
    if let Some(fc) = kind.lp_cutoff {
        s = design_butterworth(FILTER_ORDER, FilterMode::LowPass, fc, TARGET_FS)?.apply(&s);
    }
    let missing = map_indices(&missing_raw, raw.fs, TARGET_FS, s.len());
    let all_missing = missing.len() == s.len();
    let rate = match kind.category.max_scale_s() {
        Some(max_scale) if !all_missing => {
            let peaks = ampd_peaks(&s, TARGET_FS, AMPD_WINDOW_S, AMPD_OVERLAP_S, max_scale)?;
            let r = peaks_to_rate(&peaks, TARGET_FS, kind.category, s.len()).unwrap_or_else(|_| vec![0.0; s.len()]);
            Some(zero_pad(&restore_zeros(&r, &missing), target_epochs, TARGET_FS)?.0)
        }
        Some(_) => Some(zero_pad(&vec![0.0; s.len()], target_epochs, TARGET_FS)?.0),
        None => None,
    };
    let restored = restore_zeros(&s, &missing);
    let clipped = clip(&restored, -CLIP_LIMIT, CLIP_LIMIT);
    let (signal, valid_epochs) = zero_pad(&clipped, target_epochs, TARGET_FS)?;
    Ok(Processed {
        signal,
        valid_epochs,
        missing,
        rate,
    })
}

/// Mean of each 30 s epoch over its nonzero samples; 0 when the epoch has
/// none (missing).
pub fn epoch_means(s: &[f64], fs: f64, epochs: usize) -> Vec<f64> {
    let per = (EPOCH_SECONDS * fs).round() as usize;
    (0..epochs)
        .map(|e| {
            let chunk = s.get(e * per..((e + 1) * per).min(s.len())).unwrap_or(&[]);
            let present: Vec<f64> = chunk.iter().copied().filter(|&v| v != 0.0).collect();
            if present.is_empty() {
                0.0
            } else {
                present.iter().sum::<f64>() / present.len() as f64
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalSidecar {
    pub fs: f64,
    pub kind: String,
    pub unit: String,
}

/// Writes little-endian f32 samples to `path` and a JSON sidecar next to it
/// (`<path>.json`).
pub fn write_f32(path: &Path, signal: &RawSignal) -> Result<()> {
    let kind = signal_kind(&signal.kind)?;
    let bytes: Vec<u8> = signal.samples.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    std::fs::write(path, bytes)?;
    let sidecar = SignalSidecar {
        fs: signal.fs,
        kind: signal.kind.clone(),
        unit: kind.unit.to_string(),
    };
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)? + "\n")?;
    Ok(())
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    p.into()
}

pub fn read_f32(path: &Path) -> Result<RawSignal> {
    let bytes = std::fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Parse(format!("{} is not a whole number of f32 values", path.display())));
    }
    let samples = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let sidecar: SignalSidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    RawSignal::new(samples, sidecar.fs, &sidecar.kind)
}

/// Single-column CSV, optional non-numeric header line.
pub fn read_csv_column(text: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        match line.parse::<f64>() {
            Ok(v) => out.push(v),
            Err(_) if i == 0 => continue,
            Err(_) => return Err(Error::Parse(format!("line {}: `{line}` is not a number", i + 1))),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn sine(freq: f64, fs: f64, seconds: f64, amp: f64) -> Vec<f64> {
        (0..(fs * seconds) as usize)
            .map(|i| amp * (2.0 * PI * freq * i as f64 / fs).sin())
            .collect()
    }

    /// Amplitude of the `freq` component over whole periods at the end of `s`.
    fn steady_amplitude(s: &[f64], freq: f64, fs: f64, periods: usize) -> f64 {
        let n = ((periods as f64) * fs / freq).round() as usize;
        let start = s.len() - n;
        let (mut c, mut d) = (0.0, 0.0);
        for i in start..s.len() {
            let ph = 2.0 * PI * freq * i as f64 / fs;
            c += s[i] * ph.cos();
            d += s[i] * ph.sin();
        }
        2.0 * (c * c + d * d).sqrt() / n as f64
    }

    #[test]
    fn scaling_fixtures() {
        let eeg = signal_kind("eeg").unwrap();
        assert_eq!(scale_signal(&[1e-4], eeg), vec![1.0]);
        assert!((scale_signal(&[75e-6], eeg)[0] - 0.75).abs() < 1e-12);
        assert_eq!(scale_signal(&[0.3, -2.0], signal_kind("nasal_cannula").unwrap()), vec![0.3, -2.0]);
        assert!(signal_kind("bogus").is_err());
    }

    #[test]
    fn interpolation_fixtures() {
        assert_eq!(interpolate_missing(&[1.0, 0.0, 3.0]), (vec![1.0, 2.0, 3.0], vec![1]));
        assert_eq!(interpolate_missing(&[0.0, 0.0, 5.0]), (vec![5.0; 3], vec![0, 1]));
        assert_eq!(interpolate_missing(&[2.0, 0.0, 0.0]), (vec![2.0; 3], vec![1, 2]));
        assert_eq!(interpolate_missing(&[1.0, 2.0]), (vec![1.0, 2.0], vec![]));
        assert_eq!(interpolate_missing(&[0.0, 0.0]), (vec![0.0, 0.0], vec![0, 1]));
    }

    #[test]
    fn lowpass_cutoff_and_dc() {
        let lp = design_butterworth(5, FilterMode::LowPass, 49.0, 128.0).unwrap();
        let y = lp.apply(&sine(49.0, 128.0, 20.0, 1.0));
        let db = 20.0 * steady_amplitude(&y, 49.0, 128.0, 400).log10();
        assert!((-3.2..=-2.8).contains(&db), "{db}");
        let dc = lp.apply(&vec![1.0; 2000]);
        assert!((dc[1999] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn highpass_rejects_dc() {
        let hp = design_butterworth(5, FilterMode::HighPass, 0.3, 128.0).unwrap();
        let y = hp.apply(&vec![1.0; 128 * 200]);
        let tail = y[y.len() - 1280..].iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(20.0 * tail.log10() < -60.0);
    }

    #[test]
    fn analytic_gain_at_cutoff() {
        for fc in [0.03, 0.1, 0.3, 10.0, 15.0, 49.0] {
            for mode in [FilterMode::LowPass, FilterMode::HighPass] {
                let f = design_butterworth(5, mode, fc, 128.0).unwrap();
                let db = 20.0 * f.gain(fc, 128.0).log10();
                assert!((db + 3.0103).abs() < 1e-6, "{fc} {mode:?}: {db}");
            }
        }
        assert!(design_butterworth(5, FilterMode::LowPass, 64.0, 128.0).is_err());
        assert!(design_butterworth(5, FilterMode::LowPass, 0.0, 128.0).is_err());
    }

    #[test]
    fn stopband_is_monotone() {
        let lp = design_butterworth(5, FilterMode::LowPass, 15.0, 128.0).unwrap();
        let g: Vec<f64> = (15..64).map(|f| lp.gain(f as f64, 128.0)).collect();
        assert!(g.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn resample_passband_and_identity() {
        let s = sine(10.0, 256.0, 20.0, 1.0);
        let y = resample(&s, 256.0, 128.0).unwrap();
        assert_eq!(y.len(), 1280 * 2);
        let mid = &y[256..y.len() - 256];
        let amp = steady_amplitude(mid, 10.0, 128.0, 150);
        assert!((amp - 1.0).abs() < 0.01, "{amp}");
        // frequency: the 10 Hz bin dominates its neighbours
        assert!(steady_amplitude(mid, 10.5, 128.0, 150) < 0.1);
        assert_eq!(resample(&s, 256.0, 256.0).unwrap(), s);
    }

    #[test]
    fn resample_odd_ratio() {
        let s = sine(2.0, 500.0, 10.0, 1.0);
        let y = resample(&s, 500.0, 128.0).unwrap();
        assert_eq!(y.len(), 1280);
        let amp = steady_amplitude(&y[..1024], 2.0, 128.0, 12);
        assert!((amp - 1.0).abs() < 0.01, "{amp}");
        assert!(resample(&s, 100.0001234, 128.0).is_err());
    }

    #[test]
    fn sample_hold_repeats() {
        let y = sample_hold_upsample(&[0.9, 0.95], 32.0, 128.0).unwrap();
        assert_eq!(y, vec![0.9, 0.9, 0.9, 0.9, 0.95, 0.95, 0.95, 0.95]);
        assert!(sample_hold_upsample(&[1.0], 48.0, 128.0).is_err());
    }

    #[test]
    fn clip_pad_restore() {
        assert_eq!(clip(&[7.0, -9.0, 1.5], -5.0, 5.0), vec![5.0, -5.0, 1.5]);
        let (p, valid) = zero_pad(&vec![1.0; 10 * 30 * 128], 1792, 128.0).unwrap();
        assert_eq!((p.len(), valid), (1792 * 30 * 128, 10));
        assert!(zero_pad(&vec![1.0; 3 * 3840 + 1], 3, 128.0).is_err());
        let r = restore_zeros(&[1.0, 2.0, 3.0, 4.0], &[1, 3]);
        assert_eq!(r.iter().filter(|&&v| v == 0.0).count(), 2);
    }

    #[test]
    fn index_mapping() {
        assert_eq!(map_indices(&[1], 32.0, 128.0, 100), vec![4, 5, 6, 7]);
        assert_eq!(map_indices(&[2, 3], 256.0, 128.0, 100), vec![1, 2]);
        assert_eq!(map_indices(&[99], 1.0, 1.0, 50), Vec::<usize>::new());
    }

    #[test]
    fn ampd_on_sine_and_constant() {
        let peaks = ampd_peaks(&sine(1.0, 64.0, 10.0, 1.0), 64.0, 600.0, 120.0, 5.0).unwrap();
        assert!((9..=11).contains(&peaks.len()), "{}", peaks.len());
        assert!(ampd_peaks(&vec![2.0; 640], 64.0, 600.0, 120.0, 5.0).unwrap().is_empty());
    }

    #[test]
    fn ampd_finds_the_dominant_period() {
        let fs = 64.0;
        let s: Vec<f64> = (0..640)
            .map(|i| {
                let t = i as f64 / fs;
                (2.0 * PI * t).sin() + 0.1 * (2.0 * PI * 8.0 * t).sin()
            })
            .collect();
        // maxima of the 1 Hz component sit at t = 0.25 + k
        let expected: Vec<f64> = (0..10).map(|k| 0.25 + k as f64).collect();
        let peaks = ampd_peaks(&s, fs, 600.0, 120.0, 5.0).unwrap();
        assert!(peaks.len() >= 9 && peaks.len() <= 10, "{peaks:?}");
        for p in peaks {
            let t = p as f64 / fs;
            assert!(expected.iter().any(|e| (e - t).abs() < 0.1), "{t}");
        }
    }

    #[test]
    fn windows_overlap_without_duplicates() {
        let s = sine(1.0, 16.0, 1500.0, 1.0);
        let peaks = ampd_peaks(&s, 16.0, 600.0, 120.0, 5.0).unwrap();
        assert!(peaks.windows(2).all(|w| w[1] > w[0]));
        assert!((1497..=1500).contains(&peaks.len()), "{}", peaks.len());
    }

    #[test]
    fn rate_fixtures() {
        let fs = 128.0;
        let uniform: Vec<usize> = (0..10).map(|k| k * 128).collect();
        let r = peaks_to_rate(&uniform, fs, Category::Cardiac, 1280).unwrap();
        assert!(r.iter().all(|&v| v == 1.0));
        // a planted 0.25 s interval
        let planted = [0, 128, 256, 288, 416, 544];
        let r = peaks_to_rate(&planted, fs, Category::Cardiac, 700).unwrap();
        assert!(r.iter().all(|&v| v == 1.0));
        let resp: Vec<usize> = (0..6).map(|k| k * 512).collect();
        let r = peaks_to_rate(&resp, fs, Category::Respiratory, 3000).unwrap();
        assert!(r.iter().all(|&v| v == 0.25));
        assert!(peaks_to_rate(&[5], fs, Category::Cardiac, 10).is_err());
    }

    #[test]
    fn degrade_fixtures() {
        let s = sine(1.3, 128.0, 30.0, 1.0);
        assert!(degrade(&s, DegradeMode::ZeroSpan { start_frac: 0.0, end_frac: 1.0 }, 0)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
        let half = degrade(&s, DegradeMode::ZeroSpan { start_frac: 0.5, end_frac: 1.0 }, 0).unwrap();
        assert!(half[s.len() / 2..].iter().all(|&v| v == 0.0));
        assert_eq!(&half[..100], &s[..100]);
        let noisy = degrade(&s, DegradeMode::Awgn { snr_db: 60.0 }, 3).unwrap();
        let rms = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
        assert!((rms(&noisy) - rms(&s)).abs() / rms(&s) < 0.002);
        assert_eq!(noisy, degrade(&s, DegradeMode::Awgn { snr_db: 60.0 }, 3).unwrap());
        assert!(degrade(&s, DegradeMode::ZeroSpan { start_frac: 0.6, end_frac: 0.2 }, 0).is_err());
    }

    #[test]
    fn preprocess_all_zero_and_unfiltered() {
        let raw = RawSignal::new(vec![0.0; 256 * 60], 256.0, "ecg").unwrap();
        let p = preprocess(&raw, 4).unwrap();
        assert!(p.signal.iter().all(|&v| v == 0.0));
        assert!(p.rate.unwrap().iter().all(|&v| v == 0.0));

        let spo2 = RawSignal::new(vec![97.0; 32 * 60], 32.0, "spo2").unwrap();
        let p = preprocess(&spo2, 3).unwrap();
        assert_eq!(p.valid_epochs, 2);
        assert!(p.signal[..128 * 60].iter().all(|&v| (v - 0.97).abs() < 1e-12));
        assert!(p.rate.is_none());
    }

    #[test]
    fn preprocess_restores_missing_samples() {
        let mut s = sine(0.5, 100.0, 60.0, 1.0);
        s.iter_mut().skip(1000).take(200).for_each(|v| *v = 0.0);
        s[3] = 0.0;
        let raw = RawSignal::new(s, 100.0, "nasal_cannula").unwrap();
        let p = preprocess(&raw, 2).unwrap();
        assert!(!p.missing.is_empty());
        assert!(p.missing.iter().all(|&i| p.signal[i] == 0.0));
        assert!(p.signal.iter().all(|v| v.abs() <= 5.0));
    }

    #[test]
    fn preprocess_is_idempotent_in_band() {
        let s: Vec<f64> = sine(1.0, 128.0, 120.0, 0.8).iter().map(|v| v + 1e-3).collect();
        let raw = RawSignal::new(s, 128.0, "nasal_cannula").unwrap();
        let once = preprocess(&raw, 4).unwrap();
        let again = preprocess(&RawSignal::new(once.signal[..128 * 120].to_vec(), 128.0, "nasal_cannula").unwrap(), 4).unwrap();
        let rms = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
        let a = rms(&once.signal[128 * 60..128 * 120]);
        let b = rms(&again.signal[128 * 60..128 * 120]);
        assert!((a - b).abs() / a < 0.01, "{a} {b}");
    }

    #[test]
    fn f32_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sig.f32");
        let raw = RawSignal::new(vec![0.5, -1.25, 3.0], 64.0, "ppg").unwrap();
        write_f32(&path, &raw).unwrap();
        assert_eq!(read_f32(&path).unwrap(), raw);
        assert_eq!(read_csv_column("value\n1.5\n-2\n").unwrap(), vec![1.5, -2.0]);
        assert!(read_csv_column("1\nx\n").is_err());
    }

    proptest! {
        #[test]
        fn filters_are_linear(a in -100.0f64..100.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s: Vec<f64> = (0..300).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); z }).collect();
            let f = design_butterworth(5, FilterMode::HighPass, 0.3, 128.0).unwrap();
            let ys = f.apply(&s);
            let scaled: Vec<f64> = s.iter().map(|v| a * v).collect();
            let ya = f.apply(&scaled);
            let norm = ys.iter().map(|v| (a * v).abs()).fold(1e-300, f64::max);
            for (p, q) in ya.iter().zip(&ys) {
                prop_assert!((p - a * q).abs() <= 1e-9 * norm);
            }
        }

        #[test]
        fn rate_is_positive_and_piecewise_constant(gaps in prop::collection::vec(20usize..300, 2..30)) {
            let mut peaks = vec![0usize];
            for g in &gaps {
                peaks.push(peaks.last().unwrap() + g);
            }
            let n = peaks.last().unwrap() + 50;
            if let Ok(r) = peaks_to_rate(&peaks, 128.0, Category::Cardiac, n) {
                prop_assert!(r.iter().all(|&v| v > 0.0));
                let changes = r.windows(2).filter(|w| w[0] != w[1]).count();
                prop_assert!(changes < peaks.len());
            }
        }
    }
}
