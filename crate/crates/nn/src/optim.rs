//! Adam with decoupled weight decay (AdamW when `weight_decay > 0`).

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T = f32> {
    pub config: AdamConfig,
    m: Vec<T>,
    v: Vec<T>,
    t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, num_params: usize) -> Self {
        Adam {
            config,
            m: vec![T::zero(); num_params],
            v: vec![T::zero(); num_params],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T]) {
        assert_eq!(params.len(), grads.len(), "adam: params/grads length");
        assert_eq!(params.len(), self.m.len(), "adam: optimizer sized for another network");
        self.t += 1;
        let c = self.config;
        let b1 = T::from_f64(c.beta1);
        let b2 = T::from_f64(c.beta2);
        let one = T::one();
        let bc1 = T::from_f64(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = T::from_f64(1.0 - c.beta2.powi(self.t as i32));
        let lr = T::from_f64(c.lr);
        let decay = T::from_f64(c.lr * c.weight_decay);
        let eps = T::from_f64(c.eps);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (one - b1) * g;
            self.v[i] = b2 * self.v[i] + (one - b2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            if c.weight_decay != 0.0 {
                params[i] -= decay * params[i];
            }
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// One-shot update with fresh moment estimates.
pub fn adam_step<T: Scalar>(params: &mut [T], grads: &[T], config: AdamConfig) {
    Adam::new(config, params.len()).step(params, grads);
}
