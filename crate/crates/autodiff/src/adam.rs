//! Adam with bias correction.

use std::collections::BTreeMap;

use crate::error::{AutodiffError, Result};
use crate::store::ParamStore;
use crate::tensor::Tensor;

/// Optimizer state: step counter plus first/second moment buffers keyed by
/// parameter name. Frozen parameters are skipped entirely.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update over every non-frozen parameter. `grads` must contain an
    /// entry for each of them (zeros are fine).
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for name in store.trainable_names() {
            let grad = grads.get(&name).ok_or_else(|| AutodiffError::Contract {
                op: "adam_step",
                reason: format!("missing gradient for parameter {name:?}"),
            })?;
            let param = store.get_mut(&name).expect("name from store");
            if grad.shape() != param.shape() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "adam_step",
                    lhs: param.shape().to_vec(),
                    rhs: grad.shape().to_vec(),
                });
            }
            let n = param.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let p = param.data_mut();
            let g = grad.data();
            for i in 0..n {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grads_of(name: &str, t: Tensor) -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        m.insert(name.to_string(), t);
        m
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        let mut adam = Adam::new(0.01);
        adam.step(
            &mut store,
            &grads_of("w", Tensor::new(vec![2], vec![0.3, -0.7]).unwrap()),
        )
        .unwrap();
        let w = store.get("w").unwrap().data();
        // bias-corrected m/sqrt(v) = sign(g) at t=1 (up to eps)
        assert!((w[0] - (1.0 - 0.01)).abs() < 1e-6);
        assert!((w[1] - (-1.0 + 0.01)).abs() < 1e-6);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn zero_grad_leaves_param_but_advances_t() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(vec![2], vec![0.5, -0.5]).unwrap());
        let before = store.get("w").unwrap().clone();
        let mut adam = Adam::new(0.1);
        adam.step(&mut store, &grads_of("w", Tensor::zeros(&[2])))
            .unwrap();
        assert_eq!(store.get("w").unwrap(), &before);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(&[2]));
        let mut adam = Adam::new(0.1);
        assert!(adam.step(&mut store, &BTreeMap::new()).is_err());
    }

    #[test]
    fn frozen_param_needs_no_grad_and_never_moves() {
        let mut store = ParamStore::new();
        store.insert("enc.w", Tensor::new(vec![1], vec![2.0]).unwrap());
        store.insert("head.w", Tensor::new(vec![1], vec![2.0]).unwrap());
        store.freeze_prefix("enc.");
        let mut adam = Adam::new(0.1);
        for _ in 0..5 {
            adam.step(
                &mut store,
                &grads_of("head.w", Tensor::new(vec![1], vec![1.0]).unwrap()),
            )
            .unwrap();
        }
        assert_eq!(store.get("enc.w").unwrap().data(), &[2.0]);
        assert_ne!(store.get("head.w").unwrap().data(), &[2.0]);
    }

    #[test]
    fn quadratic_bowl_converges() {
        // f(w) = w^2, grad = 2w; 500 steps at lr 0.05 from w0 = 1
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(vec![1], vec![1.0]).unwrap());
        let mut adam = Adam::new(0.05);
        for _ in 0..500 {
            let w = store.get("w").unwrap().data()[0];
            adam.step(
                &mut store,
                &grads_of("w", Tensor::new(vec![1], vec![2.0 * w]).unwrap()),
            )
            .unwrap();
        }
        let w = store.get("w").unwrap().data()[0];
        assert!(w.abs() < 1e-2, "w = {w}");
    }
}
