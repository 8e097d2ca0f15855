//! Teacher-student self-training on integrated labels.

pub mod augment;
pub mod loss;
pub mod model;
pub mod pseudolabel;
pub mod schedule;
pub mod train;

use serde::{Deserialize, Serialize};

pub use augment::{augment_strong, augment_weak, AugmentConfig};
pub use loss::{
    adapt_loss, ce_loss, conf_loss, dice_loss, pixel_class_balance_weights, seg_loss, AdaptTerms,
};
pub use model::{Gradient, TinyModel};
pub use pseudolabel::{faz_threshold_at, generate_pseudo_label, FazBand, ThresholdConfig};
pub use schedule::{class_weight_schedule, lambda_schedule, ScheduleConfig};
pub use train::{
    ema_update, run_adaptation, train_source_model, AdaptSample, AdaptationState, HeldoutSample,
    LogRow, Optimizer, SourceTrainConfig, TrainConfig,
};

use crate::error::Result;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptationConfig {
    pub thresholds: ThresholdConfig,
    pub schedule: ScheduleConfig,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
}

impl AdaptationConfig {
    pub fn check(&self) -> Result<()> {
        self.thresholds.check()?;
        self.schedule.check()?;
        self.augment.check()?;
        self.train.check()
    }
}
