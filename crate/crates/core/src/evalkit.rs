//! Agreement metrics, overnight sleep statistics and Bland-Altman analysis.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypno::{Hypnogram, SleepStage, EPOCH_SECONDS, NUM_STAGES};

const EPOCH_MINUTES: f64 = EPOCH_SECONDS / 60.0;
const LOA_MULTIPLIER: f64 = 1.96;

/// Class granularity used when comparing hypnograms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeScheme {
    Five,
    /// N1 and N2 merged.
    Four,
    /// All NREM merged.
    Three,
    /// Sleep versus wake.
    Two,
}

impl MergeScheme {
    pub const ALL: [MergeScheme; 4] = [MergeScheme::Five, MergeScheme::Four, MergeScheme::Three, MergeScheme::Two];

    pub fn classes(self) -> usize {
        match self {
            MergeScheme::Five => 5,
            MergeScheme::Four => 4,
            MergeScheme::Three => 3,
            MergeScheme::Two => 2,
        }
    }

    pub fn class_of(self, stage: SleepStage) -> usize {
        use SleepStage::*;
        match (self, stage) {
            (MergeScheme::Five, s) => s.index(),
            (_, W) => 0,
            (MergeScheme::Four, N1 | N2) => 1,
            (MergeScheme::Four, N3) => 2,
            (MergeScheme::Four, R) => 3,
            (MergeScheme::Three, N1 | N2 | N3) => 1,
            (MergeScheme::Three, R) => 2,
            (MergeScheme::Two, _) => 1,
        }
    }

    pub fn labels(self) -> &'static [&'static str] {
        match self {
            MergeScheme::Five => &["W", "N1", "N2", "N3", "R"],
            MergeScheme::Four => &["W", "N1/N2", "N3", "R"],
            MergeScheme::Three => &["W", "NREM", "R"],
            MergeScheme::Two => &["Wake", "Sleep"],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MergeScheme::Five => "five",
            MergeScheme::Four => "four",
            MergeScheme::Three => "three",
            MergeScheme::Two => "two",
        }
    }
}

impl fmt::Display for MergeScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MergeScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MergeScheme::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Parse(format!("unknown merge scheme `{s}`")))
    }
}

pub fn merge_classes(h: &Hypnogram, scheme: MergeScheme) -> Vec<usize> {
    h.stages().iter().map(|&s| scheme.class_of(s)).collect()
}

/// Which epochs take part in a comparison.
#[derive(Debug, Clone, Copy)]
pub enum Mask<'a> {
    All,
    /// The first `n` epochs; the remainder is padding.
    Prefix(usize),
    Explicit(&'a [bool]),
}

impl Mask<'_> {
    pub fn includes(&self, e: usize) -> bool {
        match self {
            Mask::All => true,
            Mask::Prefix(n) => e < *n,
            Mask::Explicit(m) => m.get(e).copied().unwrap_or(false),
        }
    }
}

/// `counts[reference][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    pub counts: Vec<Vec<u64>>,
}

impl Confusion {
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.len();
        if k == 0 || counts.iter().any(|r| r.len() != k) {
            return Err(Error::shape("confusion matrix must be square and nonempty"));
        }
        if counts.iter().flatten().all(|&c| c == 0) {
            return Err(Error::Empty("no epochs to compare".into()));
        }
        Ok(Confusion { counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let diag: u64 = (0..self.counts.len()).map(|i| self.counts[i][i]).sum();
        diag as f64 / self.total() as f64
    }

    /// Cohen's kappa. When both raters use a single identical class the
    /// chance agreement is 1 and the statistic is undefined; 0 is returned.
    pub fn kappa(&self) -> f64 {
        // (n * agree - chance) / (n^2 - chance), all in exact integers
        let k = self.counts.len();
        let n = self.total() as u128;
        let agree: u128 = (0..k).map(|i| self.counts[i][i] as u128).sum();
        let chance: u128 = (0..k)
            .map(|i| {
                let row: u64 = self.counts[i].iter().sum();
                let col: u64 = self.counts.iter().map(|r| r[i]).sum();
                row as u128 * col as u128
            })
            .sum();
        if chance == n * n {
            return 0.0;
        }
        ((n * agree) as i128 - chance as i128) as f64 / (n * n - chance) as f64
    }

    /// Per-class F1; a class absent from both raters scores 1.
    pub fn f1(&self) -> Vec<f64> {
        let k = self.counts.len();
        (0..k)
            .map(|c| {
                let tp = self.counts[c][c] as f64;
                let ref_n: u64 = self.counts[c].iter().sum();
                let pred_n: u64 = self.counts.iter().map(|r| r[c]).sum();
                if ref_n == 0 && pred_n == 0 {
                    1.0
                } else {
                    2.0 * tp / (ref_n + pred_n) as f64
                }
            })
            .collect()
    }
}

pub fn confusion(pred: &Hypnogram, reference: &Hypnogram, scheme: MergeScheme, mask: Mask<'_>) -> Result<Confusion> {
    if pred.epochs() != reference.epochs() {
        return Err(Error::shape(format!(
            "prediction has {} epochs, reference has {}",
            pred.epochs(),
            reference.epochs()
        )));
    }
    let k = scheme.classes();
    let mut counts = vec![vec![0u64; k]; k];
    for (e, (p, r)) in pred.stages().iter().zip(reference.stages()).enumerate() {
        if mask.includes(e) {
            counts[scheme.class_of(*r)][scheme.class_of(*p)] += 1;
        }
    }
    Confusion::from_counts(counts)
}

pub fn accuracy(pred: &Hypnogram, reference: &Hypnogram, scheme: MergeScheme, mask: Mask<'_>) -> Result<f64> {
    Ok(confusion(pred, reference, scheme, mask)?.accuracy())
}

pub fn cohens_kappa(pred: &Hypnogram, reference: &Hypnogram, scheme: MergeScheme, mask: Mask<'_>) -> Result<f64> {
    Ok(confusion(pred, reference, scheme, mask)?.kappa())
}

pub fn f1_per_class(pred: &Hypnogram, reference: &Hypnogram, mask: Mask<'_>) -> Result<[f64; NUM_STAGES]> {
    let f = confusion(pred, reference, MergeScheme::Five, mask)?.f1();
    Ok(std::array::from_fn(|i| f[i]))
}

/// Overnight statistics in minutes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatReport {
    pub tst_min: f64,
    /// Absent when the recording never leaves wake.
    pub sol_min: Option<f64>,
    pub waso_min: f64,
    /// Absent when there is no R epoch.
    pub rem_latency_min: Option<f64>,
    pub time_in_rem_min: f64,
    pub stage_min: [f64; NUM_STAGES],
}

impl StatReport {
    pub const NAMES: [&'static str; 5] = ["tst_min", "sol_min", "waso_min", "rem_latency_min", "time_in_rem_min"];

    pub fn get(&self, name: &str) -> Result<Option<f64>> {
        Ok(match name {
            "tst_min" => Some(self.tst_min),
            "sol_min" => self.sol_min,
            "waso_min" => Some(self.waso_min),
            "rem_latency_min" => self.rem_latency_min,
            "time_in_rem_min" => Some(self.time_in_rem_min),
            _ => return Err(Error::param(format!("unknown statistic `{name}`"))),
        })
    }
}

/// Statistics over the first `valid_epochs` epochs.
pub fn overnight_stats(h: &Hypnogram, valid_epochs: usize) -> Result<StatReport> {
    if valid_epochs == 0 || valid_epochs > h.epochs() {
        return Err(Error::param(format!(
            "valid_epochs must be in 1..={}, got {valid_epochs}",
            h.epochs()
        )));
    }
    let stages = &h.stages()[..valid_epochs];
    let mut stage_min = [0.0; NUM_STAGES];
    for s in stages {
        stage_min[s.index()] += EPOCH_MINUTES;
    }
    let first_sleep = stages.iter().position(|s| s.is_sleep());
    let last_sleep = stages.iter().rposition(|s| s.is_sleep());
    let (sol_min, waso_min, rem_latency_min) = match (first_sleep, last_sleep) {
        (Some(a), Some(b)) => {
            let waso = stages[a..=b].iter().filter(|s| !s.is_sleep()).count();
            let rem = stages[a..].iter().position(|&s| s == SleepStage::R);
            (
                Some(a as f64 * EPOCH_MINUTES),
                waso as f64 * EPOCH_MINUTES,
                rem.map(|r| r as f64 * EPOCH_MINUTES),
            )
        }
        _ => (None, 0.0, None),
    };
    let sleep_epochs = stages.iter().filter(|s| s.is_sleep()).count();
    Ok(StatReport {
        tst_min: sleep_epochs as f64 * EPOCH_MINUTES,
        sol_min,
        waso_min,
        rem_latency_min,
        time_in_rem_min: stage_min[SleepStage::R.index()],
        stage_min,
    })
}

/// Median; midpoint of the two central values for even counts.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("median of no values".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Median of the present values; absent if none are present.
pub fn aggregate_values(values: &[Option<f64>]) -> Result<Option<f64>> {
    if values.is_empty() {
        return Err(Error::Empty("no samples to aggregate".into()));
    }
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    if present.is_empty() {
        return Ok(None);
    }
    median(&present).map(Some)
}

pub fn aggregate_stat(samples: &[StatReport], stat_name: &str) -> Result<Option<f64>> {
    let values = samples.iter().map(|r| r.get(stat_name)).collect::<Result<Vec<_>>>()?;
    aggregate_values(&values)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlandAltman {
    pub bias: f64,
    pub loa_low: f64,
    pub loa_high: f64,
}

/// Bias and 95% limits of agreement of `estimate - reference`.
pub fn bland_altman(pairs: &[(f64, f64)]) -> Result<BlandAltman> {
    if pairs.len() < 2 {
        return Err(Error::Empty("bland-altman needs at least two pairs".into()));
    }
    let n = pairs.len() as f64;
    let d: Vec<f64> = pairs.iter().map(|(e, r)| e - r).collect();
    let bias = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - bias) * (x - bias)).sum::<f64>() / (n - 1.0);
    let half = LOA_MULTIPLIER * var.sqrt();
    Ok(BlandAltman {
        bias,
        loa_low: bias - half,
        loa_high: bias + half,
    })
}

/// Per-recording agreement summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingEval {
    pub recording: String,
    pub valid_epochs: usize,
    pub accuracy: [f64; 4],
    pub kappa: [f64; 4],
    pub f1: [f64; NUM_STAGES],
    pub predicted: StatReport,
    pub reference: StatReport,
}

pub fn evaluate_recording(id: &str, pred: &Hypnogram, reference: &Hypnogram, valid_epochs: usize) -> Result<RecordingEval> {
    let mask = Mask::Prefix(valid_epochs);
    let mut acc = [0.0; 4];
    let mut kap = [0.0; 4];
    for (i, scheme) in MergeScheme::ALL.into_iter().enumerate() {
        let c = confusion(pred, reference, scheme, mask)?;
        acc[i] = c.accuracy();
        kap[i] = c.kappa();
    }
    Ok(RecordingEval {
        recording: id.to_string(),
        valid_epochs,
        accuracy: acc,
        kappa: kap,
        f1: f1_per_class(pred, reference, mask)?,
        predicted: overnight_stats(pred, valid_epochs)?,
        reference: overnight_stats(reference, valid_epochs)?,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl RecordingEval {
    pub fn csv_header() -> String {
        let mut cols = vec!["recording".to_string(), "valid_epochs".to_string()];
        for s in MergeScheme::ALL {
            cols.push(format!("accuracy_{s}"));
        }
        for s in MergeScheme::ALL {
            cols.push(format!("kappa_{s}"));
        }
        for st in SleepStage::ALL {
            cols.push(format!("f1_{}", st.label()));
        }
        for side in ["pred", "ref"] {
            for name in StatReport::NAMES {
                cols.push(format!("{side}_{name}"));
            }
        }
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![self.recording.clone(), self.valid_epochs.to_string()];
        cols.extend(self.accuracy.iter().map(f64::to_string));
        cols.extend(self.kappa.iter().map(f64::to_string));
        cols.extend(self.f1.iter().map(f64::to_string));
        for r in [&self.predicted, &self.reference] {
            for name in StatReport::NAMES {
                cols.push(opt(r.get(name).expect("known statistic")));
            }
        }
        cols.join(",")
    }
}
