//! Adam with bias correction and decoupled weight decay.

use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<S> {
    pub cfg: AdamConfig,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    t: u64,
}

impl<S: Scalar> Adam<S> {
    /// State shapes follow the given tensor sizes (canonical layout).
    pub fn new(cfg: AdamConfig, sizes: &[usize]) -> Self {
        Adam {
            cfg,
            m: sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over aligned (params, grads) tensor lists.
    pub fn step(&mut self, params: &mut [&mut Vec<S>], grads: &[Vec<S>]) {
        assert_eq!(params.len(), self.m.len(), "optimizer state misaligned");
        assert_eq!(grads.len(), self.m.len(), "gradient list misaligned");
        self.t += 1;
        let b1 = S::of(self.cfg.beta1);
        let b2 = S::of(self.cfg.beta2);
        let lr = S::of(self.cfg.lr);
        let eps = S::of(self.cfg.eps);
        let wd = S::of(self.cfg.weight_decay);
        let corr1 = S::one() - S::of(self.cfg.beta1.powi(self.t as i32));
        let corr2 = S::one() - S::of(self.cfg.beta2.powi(self.t as i32));
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.len(), g.len(), "param/grad length mismatch");
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (S::one() - b1) * g[j];
                v[j] = b2 * v[j] + (S::one() - b2) * g[j] * g[j];
                let mhat = m[j] / corr1;
                let vhat = v[j] / corr2;
                p[j] = p[j] - lr * (mhat / (vhat.sqrt() + eps) + wd * p[j]);
            }
        }
    }
}
