//! Discrete time grid for the probability-flow ODE.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleParams {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    /// Number of integration steps M; the grid has M + 1 points.
    pub steps: usize,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams {
            sigma_min: 1e-4,
            sigma_max: 40.0,
            rho: 7.0,
            steps: 32,
        }
    }
}

impl ScheduleParams {
    pub fn validate(&self) -> Result<()> {
        let finite = self.sigma_min.is_finite() && self.sigma_max.is_finite() && self.rho.is_finite();
        if !finite || self.sigma_min <= 0.0 || self.sigma_min >= self.sigma_max {
            return Err(Error::param(format!(
                "need 0 < sigma_min < sigma_max, got {} and {}",
                self.sigma_min, self.sigma_max
            )));
        }
        if self.rho <= 0.0 {
            return Err(Error::param(format!("rho must be positive, got {}", self.rho)));
        }
        if self.steps < 2 {
            return Err(Error::param(format!("need at least 2 steps, got {}", self.steps)));
        }
        Ok(())
    }
}

/// Karras time grid `t_0 = sigma_max > ... > t_{M-1} = sigma_min > t_M = 0`.
///
/// Interior points interpolate linearly in `t^(1/rho)`; both nonzero
/// endpoints are pinned to the parameters exactly.
pub fn time_steps(p: &ScheduleParams) -> Result<Vec<f64>> {
    p.validate()?;
    let m_total = p.steps;
    let inv_rho = 1.0 / p.rho;
    let hi = p.sigma_max.powf(inv_rho);
    let lo = p.sigma_min.powf(inv_rho);
    let mut t = Vec::with_capacity(m_total + 1);
    for m in 0..m_total {
        let v = if m == 0 {
            p.sigma_max
        } else if m == m_total - 1 {
            p.sigma_min
        } else {
            let frac = m as f64 / (m_total - 1) as f64;
            (hi + frac * (lo - hi)).powf(p.rho)
        };
        t.push(v);
    }
    t.push(0.0);
    Ok(t)
}

/// `sigma(t) = t`, `sigma'(t) = 1`.
pub fn noise_level(t: f64) -> Result<(f64, f64)> {
    if t.is_nan() || t < 0.0 {
        return Err(Error::param(format!("time must be nonnegative, got {t}")));
    }
    Ok((t, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_grid_endpoints() {
        let t = time_steps(&ScheduleParams::default()).unwrap();
        assert_eq!(t.len(), 33);
        assert_eq!(t[0], 40.0);
        assert_eq!(t[31], 1e-4);
        assert_eq!(t[32], 0.0);
        // independent evaluation of the closed-form interpolant
        assert!((t[16] - 0.7408230048763246).abs() < 1e-12);
    }

    #[test]
    fn linear_case() {
        let p = ScheduleParams {
            sigma_min: 1.0,
            sigma_max: 2.0,
            rho: 1.0,
            steps: 2,
        };
        assert_eq!(time_steps(&p).unwrap(), vec![2.0, 1.0, 0.0]);
    }

    #[test]
    fn invalid_params() {
        let bad = [
            ScheduleParams { sigma_min: 0.0, ..Default::default() },
            ScheduleParams { sigma_min: 50.0, ..Default::default() },
            ScheduleParams { rho: 0.0, ..Default::default() },
            ScheduleParams { steps: 1, ..Default::default() },
        ];
        for p in bad {
            assert!(time_steps(&p).is_err(), "{p:?}");
        }
    }

    #[test]
    fn noise_level_is_identity() {
        for t in [0.0, 40.0, 0.741] {
            assert_eq!(noise_level(t).unwrap(), (t, 1.0));
        }
        assert!(noise_level(-1e-3).is_err());
    }

    proptest! {
        #[test]
        fn strictly_decreasing(
            sigma_min in 1e-5f64..0.5,
            ratio in 1.5f64..1e4,
            rho in 0.5f64..10.0,
            steps in 2usize..80,
        ) {
            let p = ScheduleParams { sigma_min, sigma_max: sigma_min * ratio, rho, steps };
            let t = time_steps(&p).unwrap();
            prop_assert_eq!(t.len(), steps + 1);
            for w in t.windows(2) {
                prop_assert!(w[0] > w[1]);
            }
        }
    }
}
