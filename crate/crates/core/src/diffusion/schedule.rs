//! Cumulative noise schedule and the forward (noising) map.

use super::DiffusionError;
use crate::tensor::Tensor;

/// Cumulative signal fractions: `alpha_bar[t]` for t in 0..=T, starting at
/// exactly 1 and nonincreasing toward a near-zero endpoint.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f32>,
}

impl NoiseSchedule {
    /// Squared-cosine falloff with the usual small-offset warmup, clamped
    /// away from zero so square roots and divisions stay finite.
    pub fn cosine(t_steps: usize) -> Self {
        assert!(t_steps >= 1);
        const S: f64 = 0.008;
        let f = |t: f64| {
            let v = ((t / t_steps as f64 + S) / (1.0 + S) * std::f64::consts::FRAC_PI_2).cos();
            v * v
        };
        let f0 = f(0.0);
        let mut alpha_bar = Vec::with_capacity(t_steps + 1);
        alpha_bar.push(1.0f32);
        for t in 1..=t_steps {
            let a = (f(t as f64) / f0).clamp(1e-4, 1.0) as f32;
            alpha_bar.push(a.min(alpha_bar[t - 1]));
        }
        let s = NoiseSchedule { alpha_bar };
        s.validate().expect("cosine construction satisfies its own invariants");
        s
    }

    pub fn validate(&self) -> Result<(), DiffusionError> {
        let a = &self.alpha_bar;
        if a.is_empty() || a[0] != 1.0 {
            return Err(DiffusionError::Schedule { reason: "alpha_bar[0] must be exactly 1".into() });
        }
        if a.windows(2).any(|w| w[1] > w[0]) {
            return Err(DiffusionError::Schedule { reason: "alpha_bar must be nonincreasing".into() });
        }
        if a.iter().any(|&v| !(0.0..=1.0).contains(&v) || v <= 0.0) {
            return Err(DiffusionError::Schedule { reason: "alpha_bar must lie in (0, 1]".into() });
        }
        let last = *a.last().unwrap();
        if a.len() > 1 && last >= 1e-2 {
            return Err(DiffusionError::Schedule {
                reason: format!("endpoint alpha_bar {last} not < 1e-2"),
            });
        }
        Ok(())
    }

    pub fn t_max(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f32 {
        self.alpha_bar[t]
    }
}

/// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps, elementwise.
pub fn forward_noising(
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor, DiffusionError> {
    if x0.shape != eps.shape {
        return Err(DiffusionError::Dimension {
            what: "noise vs signal",
            expected: x0.shape.clone(),
            got: eps.shape.clone(),
        });
    }
    if t > sched.t_max() {
        return Err(DiffusionError::Schedule {
            reason: format!("t {t} outside 0..={}", sched.t_max()),
        });
    }
    let a = f64::from(sched.alpha_bar(t));
    let sa = a.sqrt() as f32;
    let sn = (1.0 - a).sqrt() as f32;
    let data = x0
        .data
        .iter()
        .zip(&eps.data)
        .map(|(&x, &e)| sa * x + sn * e)
        .collect();
    Ok(Tensor::new(data, x0.shape.clone()))
}
