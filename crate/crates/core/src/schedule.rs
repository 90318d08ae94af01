//! Per-epoch learning-rate schedules.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stage-1 base rate for the prompt tokens.
pub const PROMPT_BASE_LR: f64 = 3.5e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    /// Half-cosine annealing from `base` to zero over `total_epochs`.
    Cosine { base: f64, total_epochs: usize },
    /// Linear warmup from `start` to `peak`, then `peak` scaled by `factor`
    /// once per milestone passed.
    WarmupStep {
        start: f64,
        peak: f64,
        warmup_epochs: usize,
        milestones: Vec<usize>,
        factor: f64,
    },
}

impl LrSchedule {
    pub fn cosine(base: f64, total_epochs: usize) -> Self {
        Self::Cosine { base, total_epochs }
    }

    /// 5e-7 rising to 5e-6 over 10 epochs, decayed by 0.1 at epochs 30 and 50.
    pub fn warmup_step() -> Self {
        Self::WarmupStep {
            start: 5e-7,
            peak: 5e-6,
            warmup_epochs: 10,
            milestones: vec![30, 50],
            factor: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Cosine { base, total_epochs } => {
                if *total_epochs == 0 {
                    return Err(Error::InvalidArgument("cosine schedule needs total_epochs > 0".into()));
                }
                if !(*base > 0.0) {
                    return Err(Error::InvalidArgument("cosine base rate must be positive".into()));
                }
            }
            Self::WarmupStep { start, peak, factor, .. } => {
                if !(*start > 0.0 && *peak > 0.0 && *factor > 0.0) {
                    return Err(Error::InvalidArgument("warmup rates must be positive".into()));
                }
            }
        }
        Ok(())
    }

    pub fn rate(&self, epoch: usize) -> Result<f64> {
        match self {
            Self::Cosine { base, total_epochs } => cosine_lr(epoch, *total_epochs, *base),
            Self::WarmupStep { start, peak, warmup_epochs, milestones, factor } => {
                if epoch < *warmup_epochs {
                    let t = epoch as f64 / *warmup_epochs as f64;
                    return Ok(start + (peak - start) * t);
                }
                let passed = milestones.iter().filter(|&&m| epoch >= m).count();
                Ok(decay(*peak, *factor, passed))
            }
        }
    }
}

/// `base * 0.5 * (1 + cos(pi * epoch / total))`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, base: f64) -> Result<f64> {
    if total_epochs == 0 {
        return Err(Error::InvalidArgument("total_epochs must be positive".into()));
    }
    if epoch > total_epochs {
        return Err(Error::InvalidArgument(format!("epoch {epoch} beyond total {total_epochs}")));
    }
    Ok(base * 0.5 * (1.0 + (PI * epoch as f64 / total_epochs as f64).cos()))
}

/// The default warmup-step schedule evaluated at `epoch`.
pub fn warmup_step_lr(epoch: usize) -> f64 {
    LrSchedule::warmup_step().rate(epoch).expect("default schedule is valid")
}

/// `value * factor^times`. Power-of-ten factors shift the decimal exponent
/// so that e.g. 5e-6 decayed once is exactly the literal 5e-7.
fn decay(value: f64, factor: f64, times: usize) -> f64 {
    if times == 0 {
        return value;
    }
    let shift = factor.log10().round();
    if (10f64.powi(shift as i32) - factor).abs() <= f64::EPSILON * factor {
        let repr = format!("{value:e}");
        if let Some((mant, exp)) = repr.split_once('e') {
            if let Ok(e) = exp.parse::<i32>() {
                let shifted = format!("{mant}e{}", e + shift as i32 * times as i32);
                if let Ok(v) = shifted.parse::<f64>() {
                    return v;
                }
            }
        }
    }
    value * factor.powi(times as i32)
}
