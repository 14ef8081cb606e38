//! Adam with a per-tensor freeze mask.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::network::{Grads, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    frozen: Vec<bool>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.data.len()]).collect::<Vec<_>>();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            frozen: vec![false; params.len()],
            step: 0,
        }
    }

    /// Freezes every tensor whose name satisfies `pred`.
    pub fn freeze_where(&mut self, params: &ParamStore, mut pred: impl FnMut(&str) -> bool) {
        for (id, t) in params.iter() {
            if pred(&t.name) {
                self.frozen[id.index()] = true;
            }
        }
    }

    pub fn is_frozen(&self, index: usize) -> bool {
        self.frozen[index]
    }

    pub fn frozen_count(&self) -> usize {
        self.frozen.iter().filter(|f| **f).count()
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. Frozen tensors are not touched at all.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - pow(c.beta1, t);
        let bc2 = 1.0 - pow(c.beta2, t);
        for ((id, tensor), g) in params.iter_mut().zip(grads.buffers()) {
            let i = id.index();
            if self.frozen[i] {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..g.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let update = (m[j] / bc1) / (math::sqrt(v[j] / bc2) + c.eps);
                let p = &mut tensor.data[j];
                *p -= c.lr * (update + c.weight_decay * *p);
            }
        }
    }
}

fn pow(base: f64, n: i32) -> f64 {
    (0..n).fold(1.0, |acc, _| acc * base)
}
