//! Smoothed-l0 gate families.
//!
//! A gate is a scalar multiplier on one feature slot. Every family here
//! approaches the l0 indicator (0 at the origin, 1 elsewhere) as its
//! smoothing width `epsilon` anneals toward zero, and every family is exactly
//! zero at `x = 0` for any epsilon — which is what lets the pipeline remove
//! features without a pruning threshold.
//!
//! `Lpfs` is the even rational gate `x^2 / (x^2 + eps)`. `LpfsPp` is its odd
//! extension with an `alpha * sqrt(eps) * atan(x)` term, giving a non-zero
//! derivative at the origin so a zeroed gate can come back under gradient
//! flow. The `Sl0*` variants are classic surrogates kept for comparison.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gate family selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateKind {
    /// Rational gate `x^2 / (x^2 + eps)`.
    Lpfs,
    /// Odd gate `sign(x) * x^2/(x^2+eps) + alpha*sqrt(eps)*atan(x)`.
    LpfsPp,
    /// `1 - exp(-x^2 / (2 eps^2))`.
    Sl0Exp,
    /// `tanh(x^2 / (2 eps^2))`.
    Sl0Tanh,
    /// `sin(atan(|x| / eps))`.
    Sl0SinAtan,
}

impl GateKind {
    /// All five families, handy for sweep-style tests.
    pub const ALL: [GateKind; 5] = [
        GateKind::Lpfs,
        GateKind::LpfsPp,
        GateKind::Sl0Exp,
        GateKind::Sl0Tanh,
        GateKind::Sl0SinAtan,
    ];

    /// Parse the config-file spelling.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lpfs" => Ok(GateKind::Lpfs),
            "lpfs_pp" => Ok(GateKind::LpfsPp),
            "sl0_exp" => Ok(GateKind::Sl0Exp),
            "sl0_tanh" => Ok(GateKind::Sl0Tanh),
            "sl0_sinatan" => Ok(GateKind::Sl0SinAtan),
            other => Err(Error::InvalidConfig(format!("unknown gate kind `{other}`"))),
        }
    }

    /// Config-file spelling.
    pub fn name(&self) -> &'static str {
        match self {
            GateKind::Lpfs => "lpfs",
            GateKind::LpfsPp => "lpfs_pp",
            GateKind::Sl0Exp => "sl0_exp",
            GateKind::Sl0Tanh => "sl0_tanh",
            GateKind::Sl0SinAtan => "sl0_sinatan",
        }
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 && epsilon.is_finite() {
        Ok(())
    } else {
        Err(Error::NonPositiveEpsilon(epsilon))
    }
}

/// Raw gate evaluation; callers must guarantee `epsilon > 0`.
pub(crate) fn eval(kind: GateKind, x: f64, epsilon: f64, alpha: f64) -> f64 {
    match kind {
        GateKind::Lpfs => x * x / (x * x + epsilon),
        GateKind::LpfsPp => {
            let rational = x * x / (x * x + epsilon);
            let signed = if x >= 0.0 { rational } else { -rational };
            signed + alpha * epsilon.sqrt() * x.atan()
        }
        GateKind::Sl0Exp => 1.0 - (-x * x / (2.0 * epsilon * epsilon)).exp(),
        GateKind::Sl0Tanh => (x * x / (2.0 * epsilon * epsilon)).tanh(),
        GateKind::Sl0SinAtan => (x.abs() / epsilon).atan().sin(),
    }
}

/// Raw derivative; callers must guarantee `epsilon > 0`.
pub(crate) fn eval_grad(kind: GateKind, x: f64, epsilon: f64, alpha: f64) -> f64 {
    match kind {
        GateKind::Lpfs => {
            let denom = x * x + epsilon;
            2.0 * x * epsilon / (denom * denom)
        }
        GateKind::LpfsPp => {
            let denom = x * x + epsilon;
            2.0 * x.abs() * epsilon / (denom * denom) + alpha * epsilon.sqrt() / (x * x + 1.0)
        }
        GateKind::Sl0Exp => {
            let e2 = epsilon * epsilon;
            x / e2 * (-x * x / (2.0 * e2)).exp()
        }
        GateKind::Sl0Tanh => {
            let e2 = epsilon * epsilon;
            let t = (x * x / (2.0 * e2)).tanh();
            x / e2 * (1.0 - t * t)
        }
        GateKind::Sl0SinAtan => {
            // d/dx |x| / sqrt(x^2 + eps^2); the two one-sided slopes at the
            // origin cancel, so 0 is the value central differences see there.
            if x == 0.0 {
                0.0
            } else {
                let denom = (x * x + epsilon * epsilon).sqrt();
                x.signum() * epsilon * epsilon / (denom * denom * denom)
            }
        }
    }
}

/// Gate value for one scalar parameter.
///
/// Exactly zero at `x = 0` for every kind.
pub fn gate_value(kind: GateKind, x: f64, epsilon: f64, alpha: f64) -> Result<f64> {
    check_epsilon(epsilon)?;
    Ok(eval(kind, x, epsilon, alpha))
}

/// Analytic derivative of [`gate_value`] with respect to `x`.
pub fn gate_grad(kind: GateKind, x: f64, epsilon: f64, alpha: f64) -> Result<f64> {
    check_epsilon(epsilon)?;
    Ok(eval_grad(kind, x, epsilon, alpha))
}

/// Multiplicative annealing schedule for the smoothing width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub initial: f64,
    /// Multiplier applied every `interval_steps`; in (0, 1).
    pub decay_factor: f64,
    pub interval_steps: u64,
    /// Epsilon never drops below this.
    pub floor: f64,
}

impl EpsilonSchedule {
    pub fn new(initial: f64, decay_factor: f64, interval_steps: u64, floor: f64) -> Result<Self> {
        let s = Self {
            initial,
            decay_factor,
            interval_steps,
            floor,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        check_epsilon(self.initial)?;
        check_epsilon(self.floor)?;
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "epsilon decay_factor must lie in (0,1), got {}",
                self.decay_factor
            )));
        }
        if self.interval_steps == 0 {
            return Err(Error::InvalidConfig(
                "epsilon interval_steps must be positive".into(),
            ));
        }
        if self.floor > self.initial {
            return Err(Error::InvalidConfig(format!(
                "epsilon floor {} exceeds initial {}",
                self.floor, self.initial
            )));
        }
        Ok(())
    }

    /// One schedule tick: decays `current` when `global_step` is a positive
    /// multiple of the interval, clamping at the floor.
    pub fn step(&self, global_step: u64, current: f64) -> f64 {
        if global_step > 0 && global_step % self.interval_steps == 0 {
            (current * self.decay_factor).max(self.floor)
        } else {
            current
        }
    }
}

/// Free-function form of [`EpsilonSchedule::step`].
pub fn epsilon_step(schedule: &EpsilonSchedule, global_step: u64, current: f64) -> f64 {
    schedule.step(global_step, current)
}

/// Learnable gate parameters for all feature slots of one model.
///
/// `epsilon` is shared by all gates and annealed by the training loop;
/// `init_norm` holds each gate's value at initialization so that the
/// normalized gate starts at exactly 1.0 and inserting gates into a
/// pretrained model does not move its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateState {
    pub kind: GateKind,
    pub x: Vec<f64>,
    pub epsilon: f64,
    pub alpha: f64,
    /// Momentum buffer for the proximal optimizer; same length as `x`.
    pub velocity: Vec<f64>,
    /// Per-gate value at initialization; strictly positive.
    pub init_norm: Vec<f64>,
}

impl GateState {
    /// Fresh state with every `x` at 1.0, per the standard recipe.
    pub fn new(kind: GateKind, n: usize, epsilon: f64, alpha: f64) -> Result<Self> {
        check_epsilon(epsilon)?;
        if alpha < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "alpha must be nonnegative, got {alpha}"
            )));
        }
        let init = eval(kind, 1.0, epsilon, alpha);
        if init <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "gate value at initialization must be positive, got {init}"
            )));
        }
        Ok(Self {
            kind,
            x: vec![1.0; n],
            epsilon,
            alpha,
            velocity: vec![0.0; n],
            init_norm: vec![init; n],
        })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Gate value divided by its initialization value. 1.0 at init and 0
    /// exactly iff the raw gate is 0.
    pub fn normalized_gate(&self, i: usize) -> f64 {
        eval(self.kind, self.x[i], self.epsilon, self.alpha) / self.init_norm[i]
    }

    /// Derivative of the normalized gate with respect to `x[i]`.
    pub fn normalized_grad(&self, i: usize) -> f64 {
        eval_grad(self.kind, self.x[i], self.epsilon, self.alpha) / self.init_norm[i]
    }

    /// All normalized gate values.
    pub fn normalized_gates(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.normalized_gate(i)).collect()
    }

    /// Root mean square of the normalized gate values. Used to rescale
    /// categorical embeddings; never part of gradient propagation. Returns 0
    /// for an all-zero gate vector — consumers skip rescaling below 1e-12.
    pub fn gate_rms(&self) -> f64 {
        let n = self.len();
        assert!(n >= 1, "gate_rms needs at least one gate");
        let sum_sq: f64 = (0..n).map(|i| self.normalized_gate(i).powi(2)).sum();
        (sum_sq / n as f64).sqrt()
    }

    /// Split normalized gates into magnitudes and signs, with `sign(0) = +1`
    /// so that `magnitude * sign` reconstructs every gate exactly.
    pub fn sign_split(&self) -> (Vec<f64>, Vec<f64>) {
        let mut magnitudes = Vec::with_capacity(self.len());
        let mut signs = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            let g = self.normalized_gate(i);
            if g < 0.0 {
                magnitudes.push(-g);
                signs.push(-1.0);
            } else {
                magnitudes.push(g);
                signs.push(1.0);
            }
        }
        (magnitudes, signs)
    }

    /// Number of gates whose normalized value is exactly zero.
    pub fn zero_count(&self) -> usize {
        (0..self.len())
            .filter(|&i| self.normalized_gate(i) == 0.0)
            .count()
    }
}
