//! Brute-force reference computations written independently of the library's
//! oracle module: direct products over every hypnogram, no forward-backward.

#![allow(dead_code)]

use fsdm::hypno::Hypnodensity;
use fsdm::oracle::{EmissionModel, Prior, WorldModel};
use fsdm::NUM_STAGES;

pub fn stages_of(mut index: usize, epochs: usize) -> Vec<usize> {
    let mut out = vec![0; epochs];
    for e in (0..epochs).rev() {
        out[e] = index % NUM_STAGES;
        index /= NUM_STAGES;
    }
    out
}

pub fn index_of(stages: &[usize]) -> usize {
    stages.iter().fold(0, |acc, &s| acc * NUM_STAGES + s)
}

fn prior_probability(prior: &Prior, h: &[usize]) -> f64 {
    match prior {
        Prior::Table { probabilities } => probabilities[index_of(h)],
        Prior::Markov { initial, transition } => {
            let mut p = initial[h[0]];
            for w in h.windows(2) {
                p *= transition[w[0]][w[1]];
            }
            p
        }
    }
}

fn emission_density(em: &EmissionModel, stage: usize, x: f64) -> f64 {
    if x == 0.0 {
        return 1.0;
    }
    match em {
        EmissionModel::Categorical { table } => {
            let k = x.round() as usize;
            if k == 0 || k > table[stage].len() {
                1.0
            } else {
                table[stage][k - 1]
            }
        }
        EmissionModel::Gaussian { mean, sd } => {
            let z = (x - mean[stage]) / sd[stage];
            (-0.5 * z * z).exp() / (sd[stage] * (2.0 * std::f64::consts::PI).sqrt())
        }
    }
}

/// Log of `p(h) * prod p(x | h)` for every hypnogram, plus an optional
/// Gaussian smoothing term `-|y - onehot(h)|^2 / (2 sigma^2)`.
pub fn log_weights(world: &WorldModel, obs: &[(String, Vec<f64>)], smooth: Option<(&Hypnodensity, f64)>) -> Vec<f64> {
    let e = world.epochs;
    (0..NUM_STAGES.pow(e as u32))
        .map(|i| {
            let h = stages_of(i, e);
            let mut w = prior_probability(&world.prior, &h).ln();
            for (name, xs) in obs {
                let em = &world.sensors.iter().find(|s| &s.name == name).expect("sensor").emission;
                for (t, &x) in xs.iter().enumerate() {
                    w += emission_density(em, h[t], x).ln();
                }
            }
            if let Some((y, sigma)) = smooth {
                let mut d2 = 0.0;
                for t in 0..e {
                    for s in 0..NUM_STAGES {
                        let target = if h[t] == s { 1.0 } else { 0.0 };
                        d2 += (y.get(s, t) - target).powi(2);
                    }
                }
                w -= d2 / (2.0 * sigma * sigma);
            }
            w
        })
        .collect()
}

pub fn normalize_log(w: &[f64]) -> Vec<f64> {
    let m = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let p: Vec<f64> = w.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = p.iter().sum();
    p.iter().map(|v| v / z).collect()
}

pub fn posterior(world: &WorldModel, obs: &[(String, Vec<f64>)]) -> Vec<f64> {
    normalize_log(&log_weights(world, obs, None))
}

pub fn marginals(p: &[f64], epochs: usize) -> Vec<[f64; NUM_STAGES]> {
    let mut m = vec![[0.0; NUM_STAGES]; epochs];
    for (i, &w) in p.iter().enumerate() {
        for (t, s) in stages_of(i, epochs).into_iter().enumerate() {
            m[t][s] += w;
        }
    }
    m
}

/// `E[onehot(h) | y, obs]` under the sigma-smoothed posterior.
pub fn smoothed_mean(world: &WorldModel, obs: &[(String, Vec<f64>)], y: &Hypnodensity, sigma: f64) -> Hypnodensity {
    let e = world.epochs;
    let p = normalize_log(&log_weights(world, obs, Some((y, sigma))));
    let m = marginals(&p, e);
    let mut out = Hypnodensity::zeros(e);
    for (t, col) in m.iter().enumerate() {
        for (s, &v) in col.iter().enumerate() {
            out.set(s, t, v);
        }
    }
    out
}

pub fn argmax(col: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..col.len() {
        if col[i] > col[best] {
            best = i;
        }
    }
    best
}
