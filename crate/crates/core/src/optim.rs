//! Momentum SGD with coupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A named trainable array.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            value: value.with_requires_grad(true),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Divide the learning rate by 10 at 50% and again at 75% of the epochs.
    pub step_decay: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            step_decay: true,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }

    /// Learning rate for a zero-based `epoch` out of `epochs`.
    pub fn learning_rate_at(&self, epoch: usize, epochs: usize) -> f32 {
        if !self.step_decay {
            return self.learning_rate;
        }
        if 4 * epoch >= 3 * epochs {
            self.learning_rate / 100.0
        } else if 2 * epoch >= epochs {
            self.learning_rate / 10.0
        } else {
            self.learning_rate
        }
    }
}

/// Optimizer hyper-parameters plus one velocity buffer per parameter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn new(learning_rate: f32, momentum: f32, weight_decay: f32) -> Result<Self> {
        SgdConfig {
            learning_rate,
            momentum,
            weight_decay,
            step_decay: false,
        }
        .validate()?;
        Ok(Self {
            learning_rate,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        })
    }

    pub fn from_config(cfg: &SgdConfig) -> Result<Self> {
        Self::new(cfg.learning_rate, cfg.momentum, cfg.weight_decay)
    }

    pub fn velocity(&self) -> &[Vec<f32>] {
        &self.velocity
    }
}

/// One momentum-SGD update:
///
/// ```text
/// g ← grad + weight_decay·θ
/// v ← momentum·v + g
/// θ ← θ − η·v
/// ```
///
/// Gradients are cleared afterwards. Nothing is modified if any parameter
/// lacks a gradient.
pub fn sgd_step(params: &mut [Param], state: &mut OptimizerState) -> Result<()> {
    if let Some(p) = params.iter().find(|p| p.value.grad().is_none()) {
        return Err(Error::MissingGrad(p.name.clone()));
    }
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
    }
    if state.velocity.len() != params.len()
        || state
            .velocity
            .iter()
            .zip(params.iter())
            .any(|(v, p)| v.len() != p.value.numel())
    {
        return Err(Error::Config(
            "optimizer state does not match parameter shapes".into(),
        ));
    }
    let (lr, mu, wd) = (state.learning_rate, state.momentum, state.weight_decay);
    for (p, vel) in params.iter_mut().zip(state.velocity.iter_mut()) {
        let grad = p.value.grad().expect("checked above").to_vec();
        for ((theta, v), g) in p.value.data_mut().iter_mut().zip(vel.iter_mut()).zip(grad) {
            let g = g + wd * *theta;
            *v = mu * *v + g;
            *theta -= lr * *v;
        }
        p.value.zero_grad();
    }
    Ok(())
}
