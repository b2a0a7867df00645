//! Adaptive-moment optimizer with decoupled weight decay, and the cosine
//! learning-rate schedule.

use alloc::format;
use alloc::vec::Vec;

use crate::numerics::{math, ParamStore, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("adam_eps must be positive, got {}", self.eps)));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::Config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// Per-parameter moment estimates, aligned with the store's order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    config: AdamWConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    steps: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Ok(Self { config, first: zeros.clone(), second: zeros, steps: 0 })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update from the gradients currently in `store`:
    /// `θ ← θ − lr·(m̂/(√v̂ + ε) + λ·θ)`. With `lr = 0` the parameters are
    /// left bit-for-bit unchanged.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if store.len() != self.first.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first.len(),
                store.len()
            )));
        }
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be finite and non-negative, got {lr}")));
        }
        self.steps += 1;
        let c = self.config;
        let t = self.steps as i32;
        let bias1 = 1.0 - math::powi(c.beta1, t);
        let bias2 = 1.0 - math::powi(c.beta2, t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let (value, grad) = (p.value.data_mut(), p.grad.data());
            for (((x, &g), m), v) in value.iter_mut().zip(grad).zip(m.data_mut()).zip(v.data_mut()) {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let update = (*m / bias1) / (math::sqrt(*v / bias2) + c.eps) + c.weight_decay * *x;
                *x -= lr * update;
            }
        }
        Ok(())
    }
}

/// `lr(s) = base · ½(1 + cos(π·s/T))` with `T = total_steps − 1`, so the
/// first step uses `base` and the last step uses 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn new(base_lr: f64, total_steps: usize) -> Result<Self> {
        if !(base_lr >= 0.0) || !base_lr.is_finite() {
            return Err(Error::Config(format!("lr must be finite and non-negative, got {base_lr}")));
        }
        if total_steps == 0 {
            return Err(Error::Config("the schedule needs at least one step".into()));
        }
        Ok(Self { base_lr, total_steps })
    }

    pub fn lr(&self, step: usize) -> f64 {
        if self.total_steps < 2 {
            return self.base_lr;
        }
        let span = (self.total_steps - 1) as f64;
        let progress = (step.min(self.total_steps - 1)) as f64 / span;
        0.5 * self.base_lr * (1.0 + math::cos(core::f64::consts::PI * progress))
    }
}
