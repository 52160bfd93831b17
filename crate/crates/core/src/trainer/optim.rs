use serde::{Deserialize, Serialize};

use crate::encoder::{Gradients, Mat, ParamStore, Real};
use crate::error::{Error, Result};

/// Linear warmup to `peak` at step `warmup`, then inverse square-root decay.
/// `step` is 1-based (the number of the update being applied).
pub fn noam_lr(step: u64, peak: f64, warmup: u64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    peak * (s / w).min((w / s).sqrt())
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<F: Real>(grads: &mut Gradients<F>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::Config(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

/// First and second moment estimates, one tensor per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F: Real> {
    pub m: Vec<Mat<F>>,
    pub v: Vec<Mat<F>>,
}

impl<F: Real> AdamState<F> {
    pub fn zeros_like(params: &ParamStore<F>) -> Self {
        let z: Vec<Mat<F>> = params.tensors().iter().map(|t| Mat::zeros(t.rows, t.cols)).collect();
        Self { m: z.clone(), v: z }
    }

    /// Applies update number `t` (1-based) with learning rate `lr`.
    pub fn step(&mut self, cfg: &AdamConfig, t: u64, lr: f64, params: &mut ParamStore<F>, grads: &Gradients<F>) {
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(t as i32);
        let c2 = 1.0 - b2.powi(t as i32);
        let (fb1, fb2) = (F::of(b1), F::of(b2));
        let (one_b1, one_b2) = (F::of(1.0 - b1), F::of(1.0 - b2));
        let step = F::of(lr / c1);
        let rc2 = F::of(1.0 / c2);
        let eps = F::of(cfg.eps);
        for (((p, g), m), v) in params.tensors_mut().iter_mut().zip(&grads.tensors).zip(&mut self.m).zip(&mut self.v) {
            for (((p, g), m), v) in p.data.iter_mut().zip(&g.data).zip(&mut m.data).zip(&mut v.data) {
                *m = fb1 * *m + one_b1 * *g;
                *v = fb2 * *v + one_b2 * *g * *g;
                *p -= step * *m / ((*v * rc2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_peaks_at_warmup_and_is_monotone() {
        let (peak, w) = (1e-3, 1000);
        assert!((noam_lr(w, peak, w) - peak).abs() < 1e-15);
        for s in 1..w {
            assert!(noam_lr(s + 1, peak, w) > noam_lr(s, peak, w));
        }
        for s in w..5 * w {
            assert!(noam_lr(s + 1, peak, w) < noam_lr(s, peak, w));
        }
        assert!((noam_lr(4 * w, peak, w) - peak / 2.0).abs() < 1e-15);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = Gradients {
            tensors: vec![Mat::from_vec(1, 2, vec![3.0f64, 4.0])],
        };
        assert_eq!(clip_global_norm(&mut g, 10.0), 5.0);
        assert_eq!(g.tensors[0].data, vec![3.0, 4.0]);
        clip_global_norm(&mut g, 1.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_matches_closed_form() {
        // With bias correction the first update is lr * g / (|g| + eps) = lr * sign(g).
        let mut p = ParamStore::default();
        p.push("w", Mat::from_vec(1, 3, vec![1.0f64, 1.0, 1.0]));
        let mut st = AdamState::zeros_like(&p);
        let g = Gradients {
            tensors: vec![Mat::from_vec(1, 3, vec![0.5, -2.0, 0.0])],
        };
        st.step(&AdamConfig::default(), 1, 0.1, &mut p, &g);
        let got = &p.get(0).data;
        assert!((got[0] - 0.9).abs() < 1e-8);
        assert!((got[1] - 1.1).abs() < 1e-8);
        assert_eq!(got[2], 1.0);
    }
}
