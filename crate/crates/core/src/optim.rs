//! Optimizers: proximal SGD with momentum for gate parameters, Adagrad for
//! model parameters, and the learning-rate schedule shared by both pipelines.
//!
//! The gate update is operator splitting: a momentum step on the smooth data
//! loss produces `x_tilde`, then the closed-form l1 prox maps it back. The l1
//! term is never handled by subgradient. The prox threshold is `2 * lambda *
//! lr`, recomputed from the decayed learning rate every step.

use ndarray::{Array, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gates::GateState;

/// Hyperparameters of the proximal gate optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProxConfig {
    /// l1 weight on the gate parameters.
    pub lambda: f64,
    /// Initial learning rate.
    pub lr: f64,
    /// Multiplier applied every `lr_decay_interval` steps; in (0, 1).
    pub lr_decay_factor: f64,
    pub lr_decay_interval: u64,
    /// The decayed learning rate never goes below this.
    pub lr_floor: f64,
    /// Momentum coefficient in [0, 1).
    pub momentum: f64,
}

impl ProxConfig {
    /// Published recipe for the rational gate (lr 0.005).
    pub fn lpfs() -> Self {
        Self {
            lambda: 0.004,
            lr: 0.005,
            lr_decay_factor: 0.9991,
            lr_decay_interval: 100,
            lr_floor: 5e-4,
            momentum: 0.9,
        }
    }

    /// Published recipe for the odd gate (lr 0.01).
    pub fn lpfs_pp() -> Self {
        Self {
            lr: 0.01,
            ..Self::lpfs()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "lambda must be nonnegative, got {}",
                self.lambda
            )));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "lr_decay_factor must lie in (0,1), got {}",
                self.lr_decay_factor
            )));
        }
        if self.lr_decay_interval == 0 {
            return Err(Error::InvalidConfig("lr_decay_interval must be positive".into()));
        }
        if !(self.lr_floor > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "lr_floor must be positive, got {}",
                self.lr_floor
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum must lie in [0,1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }

    /// Learning rate after `global_step` completed steps:
    /// `lr * decay^(step/interval)`, floored at `lr_floor`.
    pub fn lr_at(&self, global_step: u64) -> f64 {
        let ticks = (global_step / self.lr_decay_interval) as i32;
        (self.lr * self.lr_decay_factor.powi(ticks)).max(self.lr_floor)
    }

    /// Prox threshold `2 * lambda * lr` at the given step.
    pub fn threshold_at(&self, global_step: u64) -> f64 {
        2.0 * self.lambda * self.lr_at(global_step)
    }
}

/// One momentum step on the data-loss gradient only (no l1 term).
///
/// Returns the pre-prox iterate `x_tilde` and the updated velocity.
pub fn momentum_loss_step(
    x: &[f64],
    grad_loss: &[f64],
    velocity: &[f64],
    lr: f64,
    momentum: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.len() != grad_loss.len() {
        return Err(Error::LengthMismatch {
            what: "momentum_loss_step grad",
            left: x.len(),
            right: grad_loss.len(),
        });
    }
    if x.len() != velocity.len() {
        return Err(Error::LengthMismatch {
            what: "momentum_loss_step velocity",
            left: x.len(),
            right: velocity.len(),
        });
    }
    let mut new_velocity = Vec::with_capacity(x.len());
    let mut x_tilde = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let v = momentum * velocity[i] + grad_loss[i];
        new_velocity.push(v);
        x_tilde.push(x[i] - lr * v);
    }
    Ok((x_tilde, new_velocity))
}

/// Scalar soft threshold with a bit-exact zero in the interior.
pub fn soft_threshold(v: f64, threshold: f64) -> f64 {
    if v >= threshold {
        v - threshold
    } else if v <= -threshold {
        v + threshold
    } else {
        0.0
    }
}

/// Componentwise l1 prox: the closed-form minimizer of
/// `0.5 * (u - x_tilde)^2 + threshold * |u|`.
pub fn prox_l1(x_tilde: &[f64], threshold: f64) -> Result<Vec<f64>> {
    if !(threshold >= 0.0) {
        return Err(Error::NegativeThreshold(threshold));
    }
    Ok(x_tilde.iter().map(|&v| soft_threshold(v, threshold)).collect())
}

/// Scale factor of the group soft threshold: `max(0, 1 - t / norm)`.
/// A group with norm at or below the threshold collapses to exact zero.
pub fn group_soft_threshold_scale(group_norm: f64, threshold: f64) -> Result<f64> {
    if !(threshold >= 0.0) {
        return Err(Error::NegativeThreshold(threshold));
    }
    if group_norm <= threshold {
        Ok(0.0)
    } else {
        Ok(1.0 - threshold / group_norm)
    }
}

/// Full gate step: momentum on the loss gradient, then the l1 prox with
/// threshold `2 * lambda * lr_at(step)`. Mutates the gate state in place.
pub fn prox_gate_step(
    gates: &mut GateState,
    grad_x: &[f64],
    config: &ProxConfig,
    global_step: u64,
) -> Result<()> {
    let lr = config.lr_at(global_step);
    let (x_tilde, velocity) =
        momentum_loss_step(&gates.x, grad_x, &gates.velocity, lr, config.momentum)?;
    gates.velocity = velocity;
    gates.x = prox_l1(&x_tilde, 2.0 * config.lambda * lr)?;
    Ok(())
}

/// Adagrad hyperparameters; the accumulators live next to each tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdagradConfig {
    pub lr: f64,
    pub epsilon_stability: f64,
}

impl Default for AdagradConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            epsilon_stability: 1e-10,
        }
    }
}

/// One Adagrad step on a dense tensor:
/// `acc += g^2; p -= lr * g / (sqrt(acc) + eps)`.
pub fn adagrad_step<D: Dimension>(
    param: &mut Array<f64, D>,
    grad: &Array<f64, D>,
    accumulator: &mut Array<f64, D>,
    config: &AdagradConfig,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != accumulator.shape() {
        return Err(Error::ShapeMismatch {
            what: "adagrad_step",
            expected: format!("{:?}", param.shape()),
            got: format!("{:?} / {:?}", grad.shape(), accumulator.shape()),
        });
    }
    Zip::from(param)
        .and(grad)
        .and(accumulator)
        .for_each(|p, &g, acc| {
            *acc += g * g;
            *p -= config.lr * g / (acc.sqrt() + config.epsilon_stability);
        });
    Ok(())
}
