//! First-order optimizers over flat parameter vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SnsError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    /// sign-of-momentum update
    Lion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// decoupled weight decay, scaled by the learning rate
    pub weight_decay: f64,
    /// cosine decay from `lr` to `lr·final_lr_fraction` over `decay_steps`;
    /// 0 keeps the rate constant
    pub decay_steps: usize,
    pub final_lr_fraction: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            decay_steps: 0,
            final_lr_fraction: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn with_lr(lr: f64) -> Self {
        OptimizerConfig {
            lr,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps >= 0.0
            && self.weight_decay >= 0.0
            && (0.0..=1.0).contains(&self.final_lr_fraction);
        if !ok {
            return Err(SnsError::Config("invalid optimizer settings".into()));
        }
        Ok(())
    }

    /// Learning rate used at step `t` (0-based).
    pub fn lr_at(&self, t: usize) -> f64 {
        if self.decay_steps == 0 {
            return self.lr;
        }
        let p = (t.min(self.decay_steps) as f64) / self.decay_steps as f64;
        let lo = self.lr * self.final_lr_fraction;
        lo + 0.5 * (self.lr - lo) * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: usize,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, n_params: usize) -> Result<Self> {
        config.validate()?;
        Ok(Optimizer {
            config,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            steps: 0,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn current_lr(&self) -> f64 {
        self.config.lr_at(self.steps)
    }

    /// One in-place update; returns the learning rate that was applied.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<f64> {
        if params.len() != self.m.len() {
            return Err(SnsError::dims("optimizer parameters", self.m.len(), params.len()));
        }
        if grad.len() != params.len() {
            return Err(SnsError::dims("optimizer gradient", params.len(), grad.len()));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(SnsError::non_finite("gradient"));
        }
        let c = &self.config;
        let lr = c.lr_at(self.steps);
        self.steps += 1;
        let decay = 1.0 - lr * c.weight_decay;
        match c.kind {
            OptimizerKind::Adam => {
                let t = self.steps as i32;
                let bc1 = 1.0 - c.beta1.powi(t);
                let bc2 = 1.0 - c.beta2.powi(t);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
                    self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
                    let mh = self.m[i] / bc1;
                    let vh = self.v[i] / bc2;
                    params[i] = params[i] * decay - lr * mh / (vh.sqrt() + c.eps);
                }
            }
            OptimizerKind::Lion => {
                for i in 0..params.len() {
                    let g = grad[i];
                    let u = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
                    let s = if u > 0.0 {
                        1.0
                    } else if u < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    params[i] = params[i] * decay - lr * s;
                    self.m[i] = c.beta2 * self.m[i] + (1.0 - c.beta2) * g;
                }
            }
        }
        Ok(lr)
    }
}
