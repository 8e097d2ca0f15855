use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adaptation::{AdaptationConfig, SourceTrainConfig};
use crate::error::{Error, Result};
use crate::integration::IntegrationPolicy;
use crate::registration::RegistrationConfig;
use crate::synth::SynthConfig;

/// Where the OCTA views' probability maps come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewPredictions {
    /// The source model's output on each view image.
    #[default]
    Model,
    /// The maps stored with the subject.
    Given,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Share of registered subjects whose views are used for adaptation;
    /// the rest are held out for evaluation.
    pub train_fraction: f64,
    pub view_predictions: ViewPredictions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.6,
            view_predictions: ViewPredictions::Model,
        }
    }
}

/// Every setting of a run. Missing keys take their defaults; unknown keys
/// are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub subjects: usize,
    pub synth: SynthConfig,
    pub registration: RegistrationConfig,
    pub integration: IntegrationPolicy,
    pub adaptation: AdaptationConfig,
    pub source: SourceTrainConfig,
    pub pipeline: PipelineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            subjects: 30,
            synth: SynthConfig::default(),
            registration: RegistrationConfig::default(),
            integration: IntegrationPolicy::default(),
            adaptation: AdaptationConfig::default(),
            source: SourceTrainConfig::default(),
            pipeline: PipelineConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn check(&self) -> Result<()> {
        if self.subjects == 0 {
            return Err(Error::Config("subjects must be positive".into()));
        }
        if !(self.pipeline.train_fraction > 0.0 && self.pipeline.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must lie in (0, 1)".into()));
        }
        if self.source.subjects == 0 || self.source.epochs == 0 || !(self.source.lr > 0.0) {
            return Err(Error::Config(
                "source training needs subjects, epochs and a positive rate".into(),
            ));
        }
        self.synth.check()?;
        self.registration.check()?;
        self.integration.check()?;
        self.adaptation.check()
    }

    /// Reads and validates a JSON config. Parse failures are reported as
    /// configuration errors.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let cfg: RunConfig = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }
}
