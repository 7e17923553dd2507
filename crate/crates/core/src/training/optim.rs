//! Adaptive-moment optimizer with decoupled weight decay.

use crate::error::{Error, Result};

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
        AdamWConfig {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, num_params: usize) -> Self {
        OptimizerState {
            config,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One bias-corrected moment update followed by decoupled weight decay on
    /// the entries where `decay_mask` is true (all entries when `None`).
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], decay_mask: Option<&[bool]>) -> Result<()> {
        let n = self.m.len();
        if params.len() != n || grads.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "optimizer holds {n} moments, got {} parameters and {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if let Some(mask) = decay_mask {
            if mask.len() != n {
                return Err(Error::ShapeMismatch(format!("decay mask has {} entries, expected {n}", mask.len())));
            }
        }
        let c = self.config;
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for i in 0..n {
            let g = grads[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            if c.weight_decay != 0.0 && decay_mask.is_none_or(|m| m[i]) {
                params[i] -= c.lr * c.weight_decay * params[i];
            }
        }
        Ok(())
    }
}
