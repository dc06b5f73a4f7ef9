//! Sleep stages, hypnograms and hypnodensities.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_STAGES: usize = 5;

/// Seconds per scoring epoch.
pub const EPOCH_SECONDS: f64 = 30.0;

/// Column sums below this magnitude are treated as degenerate by
/// [`project_manifold`].
pub const DEGENERATE_COLUMN_SUM: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SleepStage {
    W = 0,
    N1 = 1,
    N2 = 2,
    N3 = 3,
    R = 4,
}

impl SleepStage {
    pub const ALL: [SleepStage; NUM_STAGES] = [
        SleepStage::W,
        SleepStage::N1,
        SleepStage::N2,
        SleepStage::N3,
        SleepStage::R,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<SleepStage> {
        Self::ALL.get(i).copied()
    }

    pub fn label(self) -> &'static str {
        match self {
            SleepStage::W => "W",
            SleepStage::N1 => "N1",
            SleepStage::N2 => "N2",
            SleepStage::N3 => "N3",
            SleepStage::R => "R",
        }
    }

    pub fn is_sleep(self) -> bool {
        self != SleepStage::W
    }
}

impl fmt::Display for SleepStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for SleepStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "W" => Ok(SleepStage::W),
            "N1" => Ok(SleepStage::N1),
            "N2" => Ok(SleepStage::N2),
            "N3" => Ok(SleepStage::N3),
            "R" => Ok(SleepStage::R),
            other => Err(Error::Parse(format!("unknown stage label `{other}`"))),
        }
    }
}

/// A sequence of 30 s stage labels, at least one epoch long.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Hypnogram {
    stages: Vec<SleepStage>,
}

impl Hypnogram {
    pub fn new(stages: Vec<SleepStage>) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::Empty("hypnogram needs at least one epoch".into()));
        }
        Ok(Hypnogram { stages })
    }

    pub fn from_indices(indices: &[usize]) -> Result<Self> {
        let stages = indices
            .iter()
            .map(|&i| {
                SleepStage::from_index(i)
                    .ok_or_else(|| Error::param(format!("stage index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Hypnogram::new(stages)
    }

    pub fn stages(&self) -> &[SleepStage] {
        &self.stages
    }

    pub fn epochs(&self) -> usize {
        self.stages.len()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.index()).collect()
    }

    /// Parses the text format: one label per line, blank lines ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let stages = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(SleepStage::from_str)
            .collect::<Result<Vec<_>>>()?;
        Hypnogram::new(stages)
    }

    /// One label per line, newline-terminated.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.stages.len() * 3);
        for s in &self.stages {
            out.push_str(s.label());
            out.push('\n');
        }
        out
    }
}

/// A 5×E real matrix indexed by (stage, epoch).
///
/// Storage is epoch-major: the five stage values of one epoch are contiguous.
/// The same type carries scores and other stage-indexed matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypnodensity {
    epochs: usize,
    data: Vec<f64>,
}

impl Hypnodensity {
    pub fn zeros(epochs: usize) -> Self {
        Hypnodensity {
            epochs,
            data: vec![0.0; epochs * NUM_STAGES],
        }
    }

    pub fn filled(epochs: usize, value: f64) -> Self {
        Hypnodensity {
            epochs,
            data: vec![value; epochs * NUM_STAGES],
        }
    }

    /// Builds from epoch-major data (`data[e * 5 + s]`).
    pub fn from_epoch_major(epochs: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != epochs * NUM_STAGES {
            return Err(Error::shape(format!(
                "expected {} values for {epochs} epochs, got {}",
                epochs * NUM_STAGES,
                data.len()
            )));
        }
        Ok(Hypnodensity { epochs, data })
    }

    pub fn from_columns(columns: &[[f64; NUM_STAGES]]) -> Self {
        Hypnodensity {
            epochs: columns.len(),
            data: columns.iter().flatten().copied().collect(),
        }
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

    pub fn get(&self, stage: usize, epoch: usize) -> f64 {
        self.data[epoch * NUM_STAGES + stage]
    }

    pub fn set(&mut self, stage: usize, epoch: usize, value: f64) {
        self.data[epoch * NUM_STAGES + stage] = value;
    }

    pub fn column(&self, epoch: usize) -> &[f64] {
        &self.data[epoch * NUM_STAGES..(epoch + 1) * NUM_STAGES]
    }

    pub fn column_mut(&mut self, epoch: usize) -> &mut [f64] {
        &mut self.data[epoch * NUM_STAGES..(epoch + 1) * NUM_STAGES]
    }

    pub fn columns(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(NUM_STAGES)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn on_manifold(&self, tol: f64) -> bool {
        self.columns().all(|c| (c.iter().sum::<f64>() - 1.0).abs() <= tol)
    }

    pub fn is_one_hot(&self) -> bool {
        self.on_manifold(0.0)
            && self
                .columns()
                .all(|c| c.iter().filter(|&&v| v == 1.0).count() == 1 && c.iter().all(|&v| v == 0.0 || v == 1.0))
    }

    pub fn check_same_shape(&self, other: &Hypnodensity) -> Result<()> {
        if self.epochs != other.epochs {
            return Err(Error::shape(format!(
                "epoch count mismatch: {} vs {}",
                self.epochs, other.epochs
            )));
        }
        Ok(())
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: f64, other: &Hypnodensity) {
        debug_assert_eq!(self.epochs, other.epochs);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn max_abs_diff(&self, other: &Hypnodensity) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub fn one_hot(h: &Hypnogram) -> Hypnodensity {
    let mut y = Hypnodensity::zeros(h.epochs());
    for (e, s) in h.stages().iter().enumerate() {
        y.set(s.index(), e, 1.0);
    }
    y
}

/// Divides every column by its sum. Columns whose sum is within
/// [`DEGENERATE_COLUMN_SUM`] of zero become uniform. Negative entries are kept.
pub fn project_manifold(y: &Hypnodensity) -> Hypnodensity {
    let mut out = y.clone();
    for col in out.data.chunks_exact_mut(NUM_STAGES) {
        let sum: f64 = col.iter().sum();
        if sum.abs() < DEGENERATE_COLUMN_SUM {
            col.fill(1.0 / NUM_STAGES as f64);
        } else {
            col.iter_mut().for_each(|v| *v /= sum);
        }
    }
    out
}

fn argmax_column(col: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in col.iter().enumerate().skip(1) {
        // strict comparison keeps the lowest index on ties
        if v > col[best] {
            best = i;
        }
    }
    best
}

/// Per-epoch argmax; ties resolve toward the lowest stage index.
pub fn argmax_stages(y: &Hypnodensity) -> Hypnogram {
    let stages = y
        .columns()
        .map(|c| SleepStage::ALL[argmax_column(c)])
        .collect::<Vec<_>>();
    Hypnogram { stages }
}

/// Element-wise mean of the samples.
pub fn mean_density(samples: &[Hypnodensity]) -> Result<Hypnodensity> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Empty("no samples to average".into()))?;
    let mut acc = Hypnodensity::zeros(first.epochs());
    for s in samples {
        acc.check_same_shape(s)?;
        acc.add_scaled(1.0, s);
    }
    acc.scale(1.0 / samples.len() as f64);
    Ok(acc)
}

/// Argmax of the element-wise mean of the samples.
pub fn majority_vote(samples: &[Hypnodensity]) -> Result<Hypnogram> {
    if samples.is_empty() {
        return Err(Error::Empty("majority vote of zero samples".into()));
    }
    if samples.iter().any(|s| s.epochs() == 0) {
        return Err(Error::Empty("samples have zero epochs".into()));
    }
    // Sum in a canonical order so the result does not depend on sample order.
    let epochs = samples[0].epochs();
    for s in samples {
        samples[0].check_same_shape(s)?;
    }
    let mut mean = Hypnodensity::zeros(epochs);
    for i in 0..epochs * NUM_STAGES {
        let mut vals: Vec<f64> = samples.iter().map(|s| s.data[i]).collect();
        vals.sort_by(f64::total_cmp);
        mean.data[i] = vals.iter().sum::<f64>() / samples.len() as f64;
    }
    Ok(argmax_stages(&mean))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use SleepStage::*;

    fn hyp(stages: &[SleepStage]) -> Hypnogram {
        Hypnogram::new(stages.to_vec()).unwrap()
    }

    #[test]
    fn one_hot_examples() {
        let y = one_hot(&hyp(&[W]));
        assert_eq!(y.column(0), &[1.0, 0.0, 0.0, 0.0, 0.0]);
        let y = one_hot(&hyp(&[R, N2]));
        assert_eq!(y.column(0), &[0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(y.column(1), &[0.0, 0.0, 1.0, 0.0, 0.0]);
        assert!(y.is_one_hot());
    }

    #[test]
    fn projection_examples() {
        let y = Hypnodensity::from_columns(&[
            [0.4, 0.3, 0.2, 0.05, 0.05],
            [2.0, 1.0, 1.0, 0.5, 0.5],
            [0.0; 5],
        ]);
        let p = project_manifold(&y);
        for (a, b) in p.column(0).iter().zip([0.4, 0.3, 0.2, 0.05, 0.05]) {
            assert!((a - b).abs() < 1e-15);
        }
        for (a, b) in p.column(1).iter().zip([0.4, 0.2, 0.2, 0.1, 0.1]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(p.column(2), &[0.2; 5]);
        assert!(p.on_manifold(1e-9));
    }

    #[test]
    fn projection_keeps_negative_entries() {
        let y = Hypnodensity::from_columns(&[[1.5, -0.25, 0.25, 0.0, 0.0]]);
        let p = project_manifold(&y);
        assert!((p.get(1, 0) + 0.25 / 1.5).abs() < 1e-15);
    }

    #[test]
    fn argmax_examples() {
        let y = Hypnodensity::from_columns(&[
            [0.1, 0.5, 0.2, 0.1, 0.1],
            [0.5, 0.5, 0.0, 0.0, 0.0],
        ]);
        assert_eq!(argmax_stages(&y).stages(), &[N1, W]);
    }

    #[test]
    fn majority_vote_examples() {
        let a = one_hot(&hyp(&[W, N3]));
        let b = one_hot(&hyp(&[W, R]));
        let c = one_hot(&hyp(&[N2, R]));
        assert_eq!(majority_vote(&[a.clone()]).unwrap(), argmax_stages(&a));
        assert_eq!(majority_vote(&[a.clone(), b.clone(), c.clone()]).unwrap().stages(), &[W, R]);
        assert_eq!(
            majority_vote(&[c.clone(), a.clone(), b.clone()]).unwrap(),
            majority_vote(&[a, b, c]).unwrap()
        );
        assert!(matches!(majority_vote(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn text_format() {
        let h = hyp(&[W, N1, N2, N3, R]);
        let text = h.to_text();
        assert_eq!(text, "W\nN1\nN2\nN3\nR\n");
        assert_eq!(Hypnogram::parse(&text).unwrap(), h);
        assert!(Hypnogram::parse("W\nN4\n").is_err());
        assert!(Hypnogram::parse("").is_err());
    }

    fn arb_hypnogram() -> impl Strategy<Value = Hypnogram> {
        prop::collection::vec(0usize..5, 1..20).prop_map(|v| Hypnogram::from_indices(&v).unwrap())
    }

    fn arb_density() -> impl Strategy<Value = Hypnodensity> {
        (1usize..8).prop_flat_map(|e| {
            prop::collection::vec(-2.0f64..3.0, e * NUM_STAGES)
                .prop_map(move |d| Hypnodensity::from_epoch_major(e, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn argmax_inverts_one_hot(h in arb_hypnogram()) {
            prop_assert_eq!(argmax_stages(&one_hot(&h)), h.clone());
            let y = one_hot(&h);
            prop_assert_eq!(one_hot(&argmax_stages(&y)), y);
        }

        #[test]
        fn projection_is_idempotent(y in arb_density()) {
            let once = project_manifold(&y);
            let twice = project_manifold(&once);
            // the second pass re-sums with cancellation, so the bound scales with the l1 mass
            let max = once.as_slice().iter().fold(1.0f64, |m, v| m.max(v.abs()));
            let l1: f64 = once.as_slice().iter().map(|v| v.abs()).sum();
            prop_assert!(once.max_abs_diff(&twice) <= 1e-14 * max * l1.max(1.0));
        }

        #[test]
        fn projection_preserves_argmax_for_nonnegative(
            d in prop::collection::vec(0.001f64..1.0, 5 * 6)
        ) {
            let y = Hypnodensity::from_epoch_major(6, d).unwrap();
            prop_assert_eq!(argmax_stages(&project_manifold(&y)), argmax_stages(&y));
        }

        #[test]
        fn majority_vote_is_permutation_invariant(
            hs in prop::collection::vec(prop::collection::vec(0usize..5, 4), 1..9),
            rot in 0usize..8,
        ) {
            let samples: Vec<_> = hs.iter().map(|v| one_hot(&Hypnogram::from_indices(v).unwrap())).collect();
            let mut rotated = samples.clone();
            let k = rot % rotated.len();
            rotated.rotate_left(k);
            rotated.reverse();
            prop_assert_eq!(majority_vote(&samples).unwrap(), majority_vote(&rotated).unwrap());
        }
    }
}
