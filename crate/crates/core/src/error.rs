use std::path::PathBuf;

/// Pipeline stage that produced a registration failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Detect,
    Match,
    Estimate,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Stage::Detect => "detect",
            Stage::Match => "match",
            Stage::Estimate => "estimate",
        };
        f.write_str(s)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("singular transform: {0}")]
    Singular(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("channel layout mismatch: expected {expected} channels, got {got}")]
    Layout { expected: usize, got: usize },

    #[error("registration failed at {stage}: {reason}")]
    Registration { stage: Stage, reason: String },

    #[error("every candidate anchor has already been tried")]
    ExhaustedAnchors,

    #[error("integration policy: {0}")]
    Policy(String),

    #[error("tensor format error in {path:?}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("adaptation failed: {0}")]
    Adaptation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn registration(stage: Stage, reason: impl Into<String>) -> Self {
        Error::Registration {
            stage,
            reason: reason.into(),
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
