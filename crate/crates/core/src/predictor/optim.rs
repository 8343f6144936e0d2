use serde::{Deserialize, Serialize};

use super::ParamLayout;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub grad_clip: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
        }
    }
}

/// AdamW with decoupled weight decay applied only to tensors flagged `decay`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub t: u64,
    decay_mask: Vec<bool>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, layout: &ParamLayout) -> Self {
        let mut decay_mask = vec![false; layout.total];
        for info in &layout.tensors {
            decay_mask[info.range()].iter_mut().for_each(|d| *d = info.decay);
        }
        Self {
            config,
            m: vec![0.0; layout.total],
            v: vec![0.0; layout.total],
            t: 0,
            decay_mask,
        }
    }

    /// Restores moment buffers, e.g. from a checkpoint.
    pub fn with_state(mut self, m: Vec<f32>, v: Vec<f32>, t: u64) -> Self {
        assert_eq!(m.len(), self.m.len());
        assert_eq!(v.len(), self.v.len());
        self.m = m;
        self.v = v;
        self.t = t;
        self
    }

    /// Clips `grads` in place and returns the pre-clip global norm.
    pub fn clip(&self, grads: &mut [f32]) -> f64 {
        let norm = grads.iter().map(|&g| f64::from(g) * f64::from(g)).sum::<f64>().sqrt();
        if self.config.grad_clip > 0.0 && norm > self.config.grad_clip {
            let s = (self.config.grad_clip / norm) as f32;
            grads.iter_mut().for_each(|g| *g *= s);
        }
        norm
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f64) {
        let c = self.config;
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let step = (lr / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        let decay = (lr * c.weight_decay) as f32;
        let eps = c.eps as f32;
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            if self.decay_mask[i] {
                params[i] -= decay * params[i];
            }
            params[i] -= step * self.m[i] / ((self.v[i] * inv_bc2).sqrt() + eps);
        }
    }
}
