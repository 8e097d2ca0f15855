use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::map::NUM_CLASSES;

/// Per-class weights at the start and end of the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassWeightEndpoints {
    pub start: [f64; NUM_CLASSES],
    pub end: [f64; NUM_CLASSES],
}

impl ClassWeightEndpoints {
    pub fn at(&self, eta: f64) -> [f64; NUM_CLASSES] {
        std::array::from_fn(|c| self.start[c] * (1.0 - eta) + self.end[c] * eta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Length `E` of the schedules, in epochs.
    pub epochs: f64,
    pub ema_alpha: f64,
    /// Weight of the cross-entropy term inside the segmentation loss.
    pub ce_weight: f64,
    pub teacher_weights: ClassWeightEndpoints,
    pub integrated_weights: ClassWeightEndpoints,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            lambda_min: 0.1,
            lambda_max: 0.9,
            epochs: 3.0,
            ema_alpha: 0.995,
            ce_weight: 1.0,
            // order: background, capillary, artery, vein, FAZ
            teacher_weights: ClassWeightEndpoints {
                start: [1.0, 1.0, 0.5, 0.5, 0.0],
                end: [1.0, 1.0, 1.5, 1.5, 1.2],
            },
            integrated_weights: ClassWeightEndpoints {
                start: [1.0, 1.0, 1.5, 1.5, 2.0],
                end: [1.0, 1.0, 0.5, 0.5, 0.8],
            },
        }
    }
}

impl ScheduleConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.lambda_min < self.lambda_max) || self.lambda_min < 0.0 || self.lambda_max > 1.0 {
            return Err(Error::Config(
                "need 0 <= lambda_min < lambda_max <= 1".into(),
            ));
        }
        if !(self.ema_alpha > 0.0 && self.ema_alpha < 1.0) {
            return Err(Error::Config("ema_alpha must lie in (0, 1)".into()));
        }
        if !(self.epochs > 0.0) || self.ce_weight < 0.0 {
            return Err(Error::Config("schedule epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Cosine ramp `η(t) = (1 − cos(π t / E)) / 2`, with `t` clamped to `[0, E]`.
pub fn eta(t: f64, epochs: f64) -> f64 {
    let t = t.clamp(0.0, epochs);
    (1.0 - (PI * t / epochs).cos()) / 2.0
}

/// `λ(t) = λmin + (λmax − λmin) η(t)`, written as a convex combination so
/// both endpoints come out exactly.
pub fn lambda_schedule(t: f64, cfg: &ScheduleConfig) -> f64 {
    let e = eta(t, cfg.epochs);
    cfg.lambda_min * (1.0 - e) + cfg.lambda_max * e
}

/// `(teacher, integrated)` class weights at time `t`.
pub fn class_weight_schedule(
    t: f64,
    cfg: &ScheduleConfig,
) -> ([f64; NUM_CLASSES], [f64; NUM_CLASSES]) {
    let e = eta(t, cfg.epochs);
    (cfg.teacher_weights.at(e), cfg.integrated_weights.at(e))
}
