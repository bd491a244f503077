// SPDX-License-Identifier: Apache-2.0

//! Adam with decoupled weight decay and a warmup-then-cosine schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::tensor::{ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, weight_decay: 1e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments, keyed like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

impl AdamState {
    pub fn zeros_like(params: &ParamStore) -> Self {
        let mut m = ParamStore::new();
        for (name, p) in params.iter() {
            m.insert(name.clone(), Tensor::zeros(p.shape()));
        }
        Self { t: 0, v: m.clone(), m }
    }

    /// One update at learning rate `lr`:
    /// `p ← p·(1 − lr·wd) − lr · m̂ / (√v̂ + ε)`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64, cfg: &AdamConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let decay = 1.0 - lr * cfg.weight_decay;
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.get_mut(name).expect("moment for every parameter");
            for (mi, gi) in m.data_mut().iter_mut().zip(g.data()) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            }
            let v = self.v.get_mut(name).expect("moment for every parameter");
            for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            }
            let (m, v) = (self.m.get(name).unwrap(), self.v.get(name).unwrap());
            for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let update = (mi / bc1) / ((vi / bc2).sqrt() + cfg.eps);
                *pi = *pi * decay - lr * update;
            }
        }
    }
}

/// Linear warmup over the first `warmup` steps, cosine decay to zero after.
pub fn learning_rate(base: f64, step: usize, total: usize, warmup: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
