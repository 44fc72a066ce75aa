use serde::{Deserialize, Serialize};

use super::ModelParams;
use crate::{Error, Result};

/// Step decay: the rate is multiplied by `factor` every `milestone` rounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub milestone: usize,
    pub factor: f64,
}

impl StepSchedule {
    /// Number of milestones passed at zero-based `round`.
    pub fn milestones_passed(&self, round: usize) -> usize {
        round / self.milestone
    }
}

/// Plain SGD (no momentum) with decoupled-from-loss L2 weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub schedule: StepSchedule,
}

impl OptimizerState {
    pub fn new(learning_rate: f64, weight_decay: f64, schedule: StepSchedule) -> Result<Self> {
        let opt = OptimizerState {
            learning_rate,
            weight_decay,
            schedule,
        };
        opt.validate()?;
        Ok(opt)
    }

    /// A constant rate with no weight decay.
    pub fn constant(learning_rate: f64) -> Result<Self> {
        Self::new(
            learning_rate,
            0.0,
            StepSchedule {
                milestone: usize::MAX,
                factor: 1.0,
            },
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Validation(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Validation(format!(
                "weight decay must be finite and non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.schedule.milestone == 0 {
            return Err(Error::Validation("lr milestone must be positive".into()));
        }
        if !(self.schedule.factor > 0.0 && self.schedule.factor <= 1.0) {
            return Err(Error::Validation(format!(
                "lr factor must lie in (0, 1], got {}",
                self.schedule.factor
            )));
        }
        Ok(())
    }

    /// Effective rate at zero-based `round`: `base * factor^k` after `k` milestones.
    pub fn lr_at(&self, round: usize) -> f64 {
        let k = self.schedule.milestones_passed(round);
        if k == 0 {
            return self.learning_rate;
        }
        self.learning_rate * self.schedule.factor.powi(k.min(i32::MAX as usize) as i32)
    }
}

/// `values' = values - lr(round) * (grads + weight_decay * values)`.
pub fn sgd_step(
    params: &ModelParams,
    grads: &[f64],
    opt: &OptimizerState,
    round: usize,
) -> Result<ModelParams> {
    let mut next = params.clone();
    sgd_step_in_place(&mut next, grads, opt, round)?;
    Ok(next)
}

/// In-place form of [`sgd_step`]; `params` is untouched on error.
pub fn sgd_step_in_place(
    params: &mut ModelParams,
    grads: &[f64],
    opt: &OptimizerState,
    round: usize,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    if let Some((index, &value)) = grads.iter().enumerate().find(|(_, g)| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { index, value });
    }
    let lr = opt.lr_at(round);
    let wd = opt.weight_decay;
    let updated: Vec<f64> = params
        .values()
        .iter()
        .zip(grads)
        .map(|(&w, &g)| w - lr * (g + wd * w))
        .collect();
    if let Some(i) = updated.iter().position(|v| !v.is_finite()) {
        return Err(Error::Diverged(format!("parameter {i} became non-finite")));
    }
    params.values_mut().copy_from_slice(&updated);
    Ok(())
}
