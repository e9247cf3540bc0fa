//! AdamW with a linearly decaying learning rate.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    total_steps: u64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    /// `shapes` lists the length of each trainable tensor; `total_steps` is
    /// the horizon over which the learning rate decays linearly to zero.
    pub fn new(config: AdamWConfig, shapes: &[usize], total_steps: u64) -> Self {
        AdamW {
            config,
            total_steps: total_steps.max(1),
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Learning rate used by the next call to [`AdamW::step`].
    pub fn current_lr(&self) -> f64 {
        let remaining = self.total_steps.saturating_sub(self.step) as f64;
        self.config.lr * remaining / self.total_steps as f64
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<(String, Vec<usize>, &[f64])>) {
        assert_eq!(params.len(), self.m.len(), "parameter group count changed");
        let lr = self.current_lr();
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (((p, (_, _, g)), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * p[i]);
            }
        }
    }
}
