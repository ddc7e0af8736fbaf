use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Cosine,
    Linear,
}

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

/// Cumulative signal-retention coefficients `alpha_bar[0..=T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    alpha_bar: Vec<f64>,
    betas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(ModelError::Invalid("diffusion steps must be at least 1".into()));
        }
        let mut betas = vec![0.0; steps + 1];
        match kind {
            ScheduleKind::Cosine => {
                let f = |t: usize| {
                    let x = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                    (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
                };
                for (t, beta) in betas.iter_mut().enumerate().skip(1) {
                    *beta = (1.0 - f(t) / f(t - 1)).min(MAX_BETA);
                }
            }
            ScheduleKind::Linear => {
                let scale = 1000.0 / steps as f64;
                let (lo, hi) = (1e-4 * scale, (0.02 * scale).min(MAX_BETA));
                for (t, beta) in betas.iter_mut().enumerate().skip(1) {
                    let u = if steps == 1 { 0.0 } else { (t - 1) as f64 / (steps - 1) as f64 };
                    *beta = lo + (hi - lo) * u;
                }
            }
        }
        let mut alpha_bar = vec![1.0; steps + 1];
        for t in 1..=steps {
            alpha_bar[t] = alpha_bar[t - 1] * (1.0 - betas[t]);
        }
        for t in 1..=steps {
            if !(alpha_bar[t] > 0.0 && alpha_bar[t] < alpha_bar[t - 1]) {
                return Err(ModelError::Invalid(format!(
                    "schedule is not strictly decreasing at step {t}"
                )));
            }
        }
        Ok(NoiseSchedule {
            kind,
            alpha_bar,
            betas,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of diffusion steps T.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(ModelError::Invalid(format!(
                "diffusion step {t} outside [0, {}]",
                self.steps()
            )));
        }
        Ok(())
    }

    /// `sqrt(alpha_bar_t) * y + sqrt(1 - alpha_bar_t) * noise`.
    pub fn forward_noise(&self, y: ArrayView2<f64>, t: usize, noise: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(t)?;
        if y.dim() != noise.dim() {
            return Err(ModelError::Shape {
                context: "forward_noise",
                expected: y.dim(),
                actual: noise.dim(),
            });
        }
        if t == 0 {
            return Ok(y.to_owned());
        }
        let a = self.alpha_bar[t].sqrt();
        let b = (1.0 - self.alpha_bar[t]).sqrt();
        Ok(&y * a + &noise * b)
    }

    pub(crate) fn forward_noise_f32(&self, y: ArrayView2<f32>, t: usize, noise: ArrayView2<f32>) -> Array2<f32> {
        let a = self.alpha_bar[t].sqrt() as f32;
        let b = (1.0 - self.alpha_bar[t]).sqrt() as f32;
        &y * a + &noise * b
    }

    /// Coefficients `(c_x0, c_xt, variance)` of the DDPM posterior
    /// q(Y^{t-1} | Y^t, Y^0) for `t >= 1`.
    pub fn posterior(&self, t: usize) -> Result<(f64, f64, f64)> {
        self.check(t)?;
        if t == 0 {
            return Err(ModelError::Invalid("posterior is defined for t >= 1".into()));
        }
        let ab = self.alpha_bar[t];
        let ab_prev = self.alpha_bar[t - 1];
        let beta = self.betas[t];
        let c_x0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let c_xt = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let var = beta * (1.0 - ab_prev) / (1.0 - ab);
        Ok((c_x0, c_xt, var))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_is_strictly_decreasing_from_one() {
        for steps in [1, 10, 100, 1000] {
            let s = NoiseSchedule::new(ScheduleKind::Cosine, steps).unwrap();
            assert_eq!(s.alpha_bar(0), 1.0);
            assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
            assert!(s.alpha_bar(steps) > 0.0);
        }
    }

    #[test]
    fn linear_schedule_is_valid() {
        let s = NoiseSchedule::new(ScheduleKind::Linear, 100).unwrap();
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(NoiseSchedule::new(ScheduleKind::Cosine, 0).is_err());
    }

    #[test]
    fn forward_noise_endpoints() {
        let s = NoiseSchedule::new(ScheduleKind::Cosine, 100).unwrap();
        let y = Array2::from_shape_fn((3, 2), |(i, j)| i as f64 - j as f64 * 0.5);
        let n = Array2::from_elem((3, 2), 0.7);
        assert_eq!(s.forward_noise(y.view(), 0, n.view()).unwrap(), y);
        assert!(s.forward_noise(y.view(), 101, n.view()).is_err());
        let last = s.forward_noise(y.view(), 100, n.view()).unwrap();
        let a = s.alpha_bar(100);
        assert!(a < 1e-4);
        for (v, (yy, nn)) in last.iter().zip(y.iter().zip(n.iter())) {
            assert!((v - (a.sqrt() * yy + (1.0 - a).sqrt() * nn)).abs() < 1e-12);
            assert!((v - nn).abs() < 0.02);
        }
    }

    #[test]
    fn posterior_at_first_step_returns_clean_estimate() {
        let s = NoiseSchedule::new(ScheduleKind::Cosine, 100).unwrap();
        let (c0, ct, var) = s.posterior(1).unwrap();
        assert!((c0 - 1.0).abs() < 1e-12);
        assert_eq!(ct, 0.0);
        assert_eq!(var, 0.0);
    }

    #[test]
    fn posterior_mean_is_consistent_for_clean_inputs() {
        // If Y^t is exactly sqrt(ab_t) * y, the posterior mean is sqrt(ab_{t-1}) * y.
        let s = NoiseSchedule::new(ScheduleKind::Cosine, 50).unwrap();
        for t in 1..=50 {
            let (c0, ct, _) = s.posterior(t).unwrap();
            let mean = c0 + ct * s.alpha_bar(t).sqrt();
            assert!((mean - s.alpha_bar(t - 1).sqrt()).abs() < 1e-9, "t={t}");
        }
    }
}
