//! AdamW with decoupled weight decay and global-norm clipping.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
        }
    }
}

pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, store: &ParamStore) -> Self {
        let m: Vec<Tensor> = store
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.shape()))
            .collect();
        let v = m.clone();
        Self { cfg, m, v, t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update. Parameters without a gradient are left untouched.
    /// Returns the pre-clip global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> f64 {
        self.update(store, grads, None)
    }

    /// As [`AdamW::step`] with the learning rate of parameter `i` multiplied
    /// by `scales[i]`.
    pub fn step_scaled(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<Tensor>],
        scales: &[f64],
    ) -> f64 {
        assert_eq!(
            scales.len(),
            store.len(),
            "scale list does not match parameter store"
        );
        self.update(store, grads, Some(scales))
    }

    fn update(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<Tensor>],
        scales: Option<&[f64]>,
    ) -> f64 {
        assert_eq!(
            grads.len(),
            store.len(),
            "gradient list does not match parameter store"
        );
        let norm = global_norm(grads);
        let clip = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        self.t += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.cfg;
        let bc1 = 1.0 - libm::pow(beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(beta2, self.t as f64);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let lr = scales.map_or(lr, |s| lr * s[i]);
            let p = store.get_mut(ParamId(i)).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j] * clip;
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                if lr != 0.0 {
                    p[j] -= lr * (mh / (libm::sqrt(vh) + eps) + weight_decay * p[j]);
                }
            }
        }
        norm
    }
}

pub fn global_norm(grads: &[Option<Tensor>]) -> f64 {
    libm::sqrt(grads.iter().flatten().map(Tensor::sq_norm).sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(&[3], alloc::vec![1.5, -0.0, 2.25]));
        let before = store.clone();
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 0.0,
                ..Default::default()
            },
            &store,
        );
        let g = alloc::vec![Some(Tensor::new(&[3], alloc::vec![0.3, -1.0, 4.0]))];
        opt.step(&mut store, &g);
        for (a, b) in store
            .get(ParamId(0))
            .data()
            .iter()
            .zip(before.get(ParamId(0)).data())
        {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn decoupled_decay_with_zero_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(&[2], alloc::vec![1.0, -2.0]));
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            clip_norm: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &store);
        opt.step(&mut store, &[Some(Tensor::zeros(&[2]))]);
        let p = store.get(id).data();
        assert!((p[0] - 0.95).abs() < 1e-12);
        assert!((p[1] + 1.9).abs() < 1e-12);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // bias-corrected first step is lr * sign(g) when eps is negligible
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(&[2], alloc::vec![0.0, 0.0]));
        let cfg = AdamWConfig {
            lr: 0.01,
            weight_decay: 0.0,
            clip_norm: 0.0,
            eps: 1e-12,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &store);
        opt.step(
            &mut store,
            &[Some(Tensor::new(&[2], alloc::vec![3.0, -0.2]))],
        );
        let p = store.get(id).data();
        assert!((p[0] + 0.01).abs() < 1e-9);
        assert!((p[1] - 0.01).abs() < 1e-9);
    }
}
