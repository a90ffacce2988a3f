//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.98, eps: 1e-8 }
    }
}

/// Moment estimates for every parameter of one store.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|p| vec![T::zero(); p.tensor.len()]).collect();
        Self { config, m: zeros(), v: zeros(), t: 0 }
    }

    /// One update of every parameter from its accumulated gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Optimizer(format!(
                "state tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        if let Some(p) = store.iter().find(|p| p.tensor.grad.is_none()) {
            return Err(Error::Optimizer(format!("missing gradient for {}", p.name)));
        }
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        // Bias correction folded into the step size:
        // lr_t = lr * sqrt(1 - beta2^t) / (1 - beta1^t), x -= lr_t * m / (sqrt(v) + eps)
        let t = self.t as i32;
        let step_size = T::lit(c.lr * (1.0 - c.beta2.powi(t)).sqrt() / (1.0 - c.beta1.powi(t)));
        let eps = T::lit(c.eps);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let (data, grad) = p.tensor.data_and_grad_mut();
            let grad = grad.expect("checked above");
            for i in 0..data.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                data[i] = data[i] - step_size * m[i] / (v[i].sqrt() + eps);
            }
        }
        Ok(())
    }
}
