//! Experiment driver: configuration, stage orchestration, evaluation and
//! sweeps over the anonymization prompt pipeline.

pub mod config;
pub mod eval;
pub mod pipeline;
pub mod provenance;
pub mod sweep;

use std::path::PathBuf;

use apl_core::AplError;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing artifact: {}", .0.display())]
    Missing(PathBuf),
    #[error("refusing artifact {}: {reason}", path.display())]
    Artifact { path: PathBuf, reason: String },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Core(AplError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<AplError> for LabError {
    fn from(e: AplError) -> Self {
        match e {
            AplError::Config(m) => LabError::Config(m),
            AplError::Missing(p) => LabError::Missing(p),
            AplError::Artifact { path, reason } => LabError::Artifact { path, reason },
            AplError::NonFinite(_) | AplError::Diverged(_) | AplError::Numeric(_) | AplError::Accuracy(_) => {
                LabError::Numeric(e.to_string())
            }
            other => LabError::Core(other),
        }
    }
}

impl LabError {
    /// Process exit status: 2 config, 3 missing or rejected artifact,
    /// 4 numeric failure, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) => 2,
            LabError::Missing(_) | LabError::Artifact { .. } => 3,
            LabError::Core(AplError::Fingerprint(_) | AplError::FrozenHash(_) | AplError::PromptWidth { .. }) => 3,
            LabError::Numeric(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
