//! AdamW with linear warmup and cosine decay.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::model::ParamStore;
use crate::numerics::{ParamId, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, weight_decay: 0.05, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Decoupled-weight-decay Adam. Moment buffers are indexed like the store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        Self { config, step: 0, m: zeros.clone(), v: zeros }
    }

    /// One update of the parameters in `trainable` at learning rate `lr`.
    /// Parameters without a gradient entry are treated as having zero
    /// gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<ParamId, Tensor>, lr: f64, trainable: Range<usize>) {
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for idx in trainable {
            let id = ParamId(idx);
            let decay = store.entry(id).decay;
            let grad = grads.get(&id);
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            let p = store.get_mut(id);
            for j in 0..p.len() {
                let g = grad.map_or(0.0, |g| g.data()[j]);
                let mj = &mut m.data_mut()[j];
                *mj = c.beta1 * *mj + (1.0 - c.beta1) * g;
                let vj = &mut v.data_mut()[j];
                *vj = c.beta2 * *vj + (1.0 - c.beta2) * g * g;
                let mhat = m.data()[j] / bc1;
                let vhat = v.data()[j] / bc2;
                let w = &mut p.data_mut()[j];
                if decay {
                    *w -= lr * c.weight_decay * *w;
                }
                *w -= lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }
}

/// Linear warmup from `base/warmup` to `base`, then cosine decay to
/// `min_lr` at `total`.
pub fn cosine_lr(step: usize, total: usize, warmup: usize, base: f64, min_lr: f64) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let t = ((step - warmup) as f64 / span as f64).min(1.0);
    min_lr + 0.5 * (base - min_lr) * (1.0 + (PI * t).cos())
}

/// Global L2 norm over a gradient map.
pub fn grad_norm(grads: &BTreeMap<ParamId, Tensor>) -> f64 {
    grads.values().map(Tensor::norm_sq).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        assert!((cosine_lr(0, 100, 10, 1.0, 0.0) - 0.1).abs() < 1e-12);
        assert!((cosine_lr(9, 100, 10, 1.0, 0.0) - 1.0).abs() < 1e-12);
        assert!((cosine_lr(10, 100, 10, 1.0, 0.0) - 1.0).abs() < 1e-12);
        assert!((cosine_lr(55, 100, 10, 1.0, 0.0) - 0.5).abs() < 1e-12);
        assert!(cosine_lr(100, 100, 10, 1.0, 0.0).abs() < 1e-12);
    }

    #[test]
    fn adamw_moves_against_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(1.0), true);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, &store);
        let mut grads = BTreeMap::new();
        grads.insert(id, Tensor::scalar(2.0));
        opt.step(&mut store, &grads, 0.1, 0..1);
        // first step of Adam moves by lr·sign(g)
        assert!((store.get(id).item() - 0.9).abs() < 1e-6);
        opt.step(&mut store, &grads, 0.1, 0..0);
        assert!((store.get(id).item() - 0.9).abs() < 1e-6);
    }
}
