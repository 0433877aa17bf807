//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::tensor::Parameter;
use super::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    /// lr 2e-4, betas (0.8, 0.99), weight decay 0.01.
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.8,
            beta2: 0.99,
            weight_decay: 0.01,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<R: Real> {
    pub config: AdamWConfig,
    pub step: u64,
    pub first_moment: Vec<Vec<R>>,
    pub second_moment: Vec<Vec<R>>,
}

impl<R: Real> OptimizerState<R> {
    pub fn new(config: AdamWConfig, params: &[Parameter<R>]) -> Self {
        Self {
            config,
            step: 0,
            first_moment: params.iter().map(|p| vec![R::zero(); p.tensor.len()]).collect(),
            second_moment: params.iter().map(|p| vec![R::zero(); p.tensor.len()]).collect(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One AdamW update. Gradients are read, not cleared.
    pub fn step(&mut self, params: &mut [Parameter<R>]) -> Result<()> {
        if params.len() != self.first_moment.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} parameters, got {}",
                self.first_moment.len(),
                params.len()
            )));
        }
        for (p, m) in params.iter().zip(&self.first_moment) {
            if p.tensor.len() != m.len() {
                return Err(Error::Shape(format!("moment shape mismatch for {}", p.name)));
            }
            if p.tensor.grad().is_none() {
                return Err(Error::MissingGrad(p.name.clone()));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = R::of(1.0 - c.beta1.powi(t));
        let bc2 = R::of(1.0 - c.beta2.powi(t));
        let (lr, b1, b2, eps) = (R::of(c.lr), R::of(c.beta1), R::of(c.beta2), R::of(c.eps));
        let decay = R::one() - R::of(c.lr * c.weight_decay);
        for ((p, m), v) in params
            .iter_mut()
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            let grad = p.tensor.grad().expect("checked above").to_vec();
            let values = p.tensor.values_mut();
            for i in 0..values.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (R::one() - b1) * g;
                v[i] = b2 * v[i] + (R::one() - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                values[i] = values[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

pub fn zero_grads<R: Real>(params: &mut [Parameter<R>]) {
    params.iter_mut().for_each(|p| p.tensor.zero_grad());
}
