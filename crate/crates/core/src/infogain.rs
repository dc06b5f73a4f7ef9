//! Per-sensor, per-epoch information gain: the cosine distance between a
//! sensor's likelihood and individual-prior estimates, averaged over the
//! states visited by the sampler.

use crate::error::{Error, Result};
use crate::evalkit::Mask;
use crate::sampler::{sample_many, SampleRun, SamplerConfig};
use crate::scorekit::{Observations, SensorBank};

const MIN_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct InfoGain {
    pub sensor: String,
    pub values: Vec<f64>,
    pub n_trajectories: usize,
}

/// `1 - a.b / (|a| |b|)`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine distance needs equal lengths"));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < MIN_NORM || nb < MIN_NORM {
        return Err(Error::param("cosine distance of a zero vector"));
    }
    if a == b {
        return Ok(0.0);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((1.0 - dot / (na * nb)).max(0.0))
}

/// Information gain of `sensor` from already recorded trajectories.
pub fn information_gain_from_runs(runs: &[SampleRun], sensor: &str) -> Result<InfoGain> {
    if runs.is_empty() {
        return Err(Error::Empty("no trajectories".into()));
    }
    let mut total: Option<Vec<f64>> = None;
    for run in runs {
        let tr = run
            .trajectory
            .as_ref()
            .ok_or_else(|| Error::param("information gain needs recorded trajectories"))?;
        let epochs = run.state.epochs();
        let mut per_run = vec![0.0; epochs];
        for step in tr {
            let est = step
                .sensors
                .iter()
                .find(|s| s.name == sensor)
                .ok_or_else(|| Error::UnknownSensor(sensor.to_string()))?;
            for (e, v) in per_run.iter_mut().enumerate() {
                *v += cosine_distance(est.likelihood.column(e), est.prior.column(e))?;
            }
        }
        per_run.iter_mut().for_each(|v| *v /= tr.len() as f64);
        match total.as_mut() {
            None => total = Some(per_run),
            Some(t) => t.iter_mut().zip(&per_run).for_each(|(a, b)| *a += b),
        }
    }
    let mut values = total.expect("nonempty runs");
    values.iter_mut().for_each(|v| *v /= runs.len() as f64);
    Ok(InfoGain {
        sensor: sensor.to_string(),
        values,
        n_trajectories: runs.len(),
    })
}

/// Runs the sampler with trajectory recording and measures the gain of
/// `sensor`, which must be one of the observations.
pub fn information_gain(
    bank: &SensorBank,
    obs: &Observations,
    epochs: usize,
    sensor: &str,
    cfg: &SamplerConfig,
) -> Result<InfoGain> {
    if !obs.iter().any(|(n, _)| n == sensor) {
        return Err(Error::UnknownSensor(sensor.to_string()));
    }
    let cfg = SamplerConfig {
        record_trajectory: true,
        ..cfg.clone()
    };
    let runs = sample_many(bank, obs, epochs, &cfg)?;
    information_gain_from_runs(&runs, sensor)
}

pub fn mean_information_gain(gain: &InfoGain, mask: Mask<'_>) -> Result<f64> {
    let picked: Vec<f64> = gain
        .values
        .iter()
        .enumerate()
        .filter(|(e, _)| mask.includes(*e))
        .map(|(_, v)| *v)
        .collect();
    if picked.is_empty() {
        return Err(Error::Empty("no valid epochs for mean information gain".into()));
    }
    Ok(picked.iter().sum::<f64>() / picked.len() as f64)
}

/// `epoch,value` rows.
pub fn to_csv(gain: &InfoGain) -> String {
    let mut out = String::from("epoch,value\n");
    for (e, v) in gain.values.iter().enumerate() {
        out.push_str(&format!("{e},{v}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::random::*;
    use crate::oracle::{enumerate_posterior, exact_denoiser, EmissionModel, SensorModel, Target, WorldModel};
    use crate::sampler::sample_rng;
    use crate::scorekit::{Conditioning, FeatureMatrix};
    use crate::NUM_STAGES;
    use std::sync::Arc;

    fn bank_for(world: &Arc<WorldModel>) -> SensorBank {
        let prior = Arc::new(exact_denoiser(world.clone(), Target::Prior).unwrap());
        let mut bank = SensorBank::new(prior);
        for s in &world.sensors {
            let d = Arc::new(exact_denoiser(world.clone(), Target::Sensor(s.name.clone())).unwrap());
            bank.add_sensor(s.name.clone(), d).unwrap();
        }
        bank
    }

    fn cfg(n: usize) -> SamplerConfig {
        SamplerConfig {
            n_samples: n,
            base_seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn cosine_fixtures() {
        assert!(cosine_distance(&[0.2, 0.3, 0.1, 0.1, 0.3], &[0.2, 0.3, 0.1, 0.1, 0.3]).unwrap() < 1e-15);
        assert_eq!(cosine_distance(&[1.0, 0.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0, 0.0]).unwrap(), 1.0);
        let d = cosine_distance(&[0.5, 0.5, 0.0, 0.0, 0.0], &[1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((d - 0.29289321881345254).abs() < 1e-15);
        assert!(cosine_distance(&[0.0; 5], &[1.0, 0.0, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn mean_gain_fixtures() {
        let g = InfoGain {
            sensor: "s".into(),
            values: vec![0.0, 0.0, 0.4, 0.4],
            n_trajectories: 1,
        };
        assert!((mean_information_gain(&g, Mask::All).unwrap() - 0.2).abs() < 1e-15);
        let c = InfoGain {
            values: vec![0.3; 6],
            ..g.clone()
        };
        assert!((mean_information_gain(&c, Mask::Prefix(4)).unwrap() - 0.3).abs() < 1e-15);
        assert!(mean_information_gain(&g, Mask::Prefix(0)).is_err());
        assert_eq!(to_csv(&g).lines().count(), 5);
    }

    #[test]
    fn zero_evidence_sensor_has_zero_gain() {
        let mut r = sample_rng(1, 0);
        let world = Arc::new(WorldModel {
            epochs: 3,
            prior: markov_prior(&mut r, 2.0),
            sensors: vec![SensorModel {
                name: "flat".into(),
                emission: EmissionModel::Categorical {
                    table: vec![vec![0.25; 4]; NUM_STAGES],
                },
            }],
        });
        let bank = bank_for(&world);
        let obs = vec![("flat".to_string(), Conditioning::Features(FeatureMatrix::from_sequence(vec![1.0, 3.0, 2.0])))];
        let g = information_gain(&bank, &obs, 3, "flat", &cfg(4)).unwrap();
        assert!(g.values.iter().all(|v| v.abs() < 1e-9));
        assert_eq!(g.n_trajectories, 4);
    }

    #[test]
    fn informative_sensor_gains_where_posterior_moves() {
        let mut r = sample_rng(2, 0);
        let table: Vec<Vec<f64>> = (0..NUM_STAGES)
            .map(|s| (0..NUM_STAGES).map(|k| if k == s { 1.0 } else { 0.0 }).collect())
            .collect();
        let world = Arc::new(WorldModel {
            epochs: 3,
            prior: markov_prior(&mut r, 1.0),
            sensors: vec![SensorModel {
                name: "d".into(),
                emission: EmissionModel::Categorical { table },
            }],
        });
        let h = world.sample_hypnogram(&mut r);
        let obs = observe(&world, &h, &mut r);
        let post = enumerate_posterior(&world, &obs).unwrap().marginals();
        let prior = enumerate_posterior(&world, &[]).unwrap().marginals();
        let o = vec![("d".to_string(), Conditioning::Features(obs[0].1.clone()))];
        let g = information_gain(&bank_for(&world), &o, 3, "d", &cfg(4)).unwrap();
        for e in 0..3 {
            let moved = (0..NUM_STAGES).any(|s| (post.get(s, e) - prior.get(s, e)).abs() > 1e-6);
            assert_eq!(g.values[e] > 0.0, moved, "epoch {e}");
            assert!((0.0..=1.0).contains(&g.values[e]));
        }
    }

    #[test]
    fn absent_observation_has_zero_gain() {
        let mut r = sample_rng(3, 0);
        let world = Arc::new(WorldModel {
            epochs: 2,
            prior: markov_prior(&mut r, 2.0),
            sensors: vec![gaussian_sensor(&mut r, "g", 1.0, 0.4)],
        });
        let obs = vec![("g".to_string(), Conditioning::Absent)];
        let g = information_gain(&bank_for(&world), &obs, 2, "g", &cfg(3)).unwrap();
        assert!(g.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn averaging_order_and_errors() {
        let mut r = sample_rng(4, 0);
        let world = Arc::new(WorldModel {
            epochs: 2,
            prior: markov_prior(&mut r, 2.0),
            sensors: vec![gaussian_sensor(&mut r, "g", 1.0, 0.4)],
        });
        let bank = bank_for(&world);
        let h = world.sample_hypnogram(&mut r);
        let obs = observe(&world, &h, &mut r);
        let o = vec![("g".to_string(), Conditioning::Features(obs[0].1.clone()))];
        let c = SamplerConfig {
            record_trajectory: true,
            ..cfg(3)
        };
        let runs = sample_many(&bank, &o, 2, &c).unwrap();
        let all = information_gain_from_runs(&runs, "g").unwrap();
        let singles: Vec<InfoGain> = runs
            .chunks(1)
            .map(|r| information_gain_from_runs(r, "g").unwrap())
            .collect();
        for e in 0..2 {
            let m = singles.iter().map(|s| s.values[e]).sum::<f64>() / 3.0;
            assert!((m - all.values[e]).abs() < 1e-12);
        }
        assert!(information_gain(&bank, &o, 2, "missing", &cfg(1)).is_err());
    }
}
