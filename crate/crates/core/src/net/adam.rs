//! Adam with global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use super::tensor::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2 norm cap; non-positive disables clipping.
    pub grad_clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 10.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: ParamStore,
    v: ParamStore,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        Adam {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self) -> &ParamStore {
        &self.m
    }

    /// Applies one update in place and returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore) -> Result<f64> {
        if !params.same_layout(grads) || !params.same_layout(&self.m) {
            return Err(Error::Shape("gradients do not match the parameters".into()));
        }
        if let Err(name) = grads.all_finite() {
            return Err(Error::NonFiniteGradient(name));
        }
        let norm = grads.l2_norm();
        let clip = if self.config.grad_clip > 0.0 && norm > self.config.grad_clip {
            self.config.grad_clip / norm
        } else {
            1.0
        };
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads.get(i);
            let m = self.m.get_mut(i);
            for (m, g) in m.iter_mut().zip(g) {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g * clip;
            }
            let v = self.v.get_mut(i);
            for (v, g) in v.iter_mut().zip(g) {
                let g = g * clip;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            }
            let (m, v) = (self.m.get(i), self.v.get(i));
            for ((p, m), v) in params.get_mut(i).iter_mut().zip(m).zip(v) {
                *p -= c.lr * (m / bc1) / ((v / bc2).sqrt() + c.eps);
            }
        }
        Ok(norm)
    }
}

/// Scale factor global-norm clipping applies to a gradient of norm `norm`.
pub fn clip_factor(norm: f64, clip: f64) -> f64 {
    if clip > 0.0 && norm > clip {
        clip / norm
    } else {
        1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::tensor::Tensor;

    fn store(v: Vec<f64>) -> ParamStore {
        let mut p = ParamStore::new();
        p.push("w", Tensor::from_vec(&[v.len()], v).unwrap());
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = store(vec![1.0, -2.0, 3.0]);
        let g = store(vec![0.0; 3]);
        let mut opt = Adam::new(AdamConfig::default(), &p);
        opt.step(&mut p, &g).unwrap();
        assert_eq!(p.get(0), &[1.0, -2.0, 3.0]);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn clipping_caps_applied_norm() {
        let g = store(vec![60.0, 80.0]);
        assert_eq!(g.l2_norm(), 100.0);
        let k = clip_factor(g.l2_norm(), 10.0);
        let mut applied = g.clone();
        applied.scale(k);
        assert!((applied.l2_norm() - 10.0).abs() < 1e-12);
        // the first moment after one step is (1 - beta1) times the applied gradient
        let mut p = store(vec![0.0, 0.0]);
        let mut opt = Adam::new(AdamConfig::default(), &p);
        opt.step(&mut p, &g).unwrap();
        let m = opt.first_moment().l2_norm() / (1.0 - 0.9);
        assert!((m - 10.0).abs() < 1e-9);
    }

    #[test]
    fn non_finite_gradient_is_an_error() {
        let mut p = store(vec![0.0]);
        let g = store(vec![f64::NAN]);
        let mut opt = Adam::new(AdamConfig::default(), &p);
        assert!(matches!(opt.step(&mut p, &g), Err(Error::NonFiniteGradient(_))));
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = store(vec![5.0, -3.0]);
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.1,
                ..AdamConfig::default()
            },
            &p,
        );
        for _ in 0..500 {
            let g = store(p.get(0).iter().map(|x| 2.0 * x).collect());
            opt.step(&mut p, &g).unwrap();
        }
        assert!(p.l2_norm() < 1e-2);
    }
}
