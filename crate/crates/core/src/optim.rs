//! Adam with a linear warm-up to a constant learning rate.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, DdeError, Result};
use crate::predictor::ParamGradient;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    #[serde(default = "defaults::beta1")]
    pub beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub beta2: f64,
    #[serde(default = "defaults::eps")]
    pub eps: f64,
    /// Steps of linear warm-up; 0 disables it.
    #[serde(default)]
    pub warmup_steps: u64,
}

mod defaults {
    pub fn beta1() -> f64 {
        0.9
    }
    pub fn beta2() -> f64 {
        0.999
    }
    pub fn eps() -> f64 {
        1e-8
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: defaults::beta1(),
            beta2: defaults::beta2(),
            eps: defaults::eps(),
            warmup_steps: 0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(DdeError::InvalidConfig(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(DdeError::InvalidConfig("adam moment decays must lie in [0, 1) and eps > 0".into()));
        }
        Ok(())
    }

    /// Learning rate used at 1-based update `step`.
    pub fn rate_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.learning_rate
        } else {
            self.learning_rate * step as f64 / self.warmup_steps as f64
        }
    }
}

/// Moment estimates; part of a resumable checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }

    pub fn update(&mut self, cfg: &AdamConfig, params: &mut [f64], grad: &ParamGradient) -> Result<()> {
        check_dim(params.len(), grad.len())?;
        check_dim(params.len(), self.m.len())?;
        self.step += 1;
        let lr = cfg.rate_at(self.step);
        let bc1 = 1.0 - cfg.beta1.powi(self.step.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step.min(i32::MAX as u64) as i32);
        for (((p, g), m), v) in params.iter_mut().zip(&grad.0).zip(&mut self.m).zip(&mut self.v) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let mh = *m / bc1;
            let vh = *v / bc2;
            *p -= lr * mh / (vh.sqrt() + cfg.eps);
        }
        Ok(())
    }
}
