//! AdamW with decoupled weight decay that honours per-parameter freezing.

use crate::autodiff::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moments for every parameter in a store. Frozen parameters keep zero
/// moments for the whole run.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let first: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            config,
            second: first.clone(),
            first,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, index: usize) -> &Tensor {
        &self.first[index]
    }

    pub fn second_moment(&self, index: usize) -> &Tensor {
        &self.second[index]
    }

    /// One bias-corrected update of every trainable parameter from its
    /// current gradient slot.
    pub fn step(&mut self, store: &mut ParamStore) {
        assert_eq!(store.len(), self.first.len(), "optimizer built for a different store");
        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((param, m), v) in store.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            if !param.trainable {
                continue;
            }
            let grad = param.grad.data();
            let value = param.value.data_mut();
            for i in 0..value.len() {
                let g = grad[i];
                let mi = beta1 * m.data()[i] + (1.0 - beta1) * g;
                let vi = beta2 * v.data()[i] + (1.0 - beta2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                value[i] -= lr * weight_decay * value[i];
                value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
