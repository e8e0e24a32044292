use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AplError {
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("vocabulary error: {0}")]
    Vocabulary(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("timestep {t} outside [1, {max}]")]
    Timestep { t: usize, max: usize },
    #[error("prompt width {prompt} does not match encoder width {encoder}; map the prompt with the transfer module first")]
    PromptWidth { prompt: usize, encoder: usize },
    #[error("fingerprint mismatch: {0}")]
    Fingerprint(String),
    #[error("frozen parameters changed: {0}")]
    FrozenHash(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("recognizer below accuracy floor: {0}")]
    Accuracy(String),
    #[error("set too small: {got} samples, need at least {min}")]
    TooFewSamples { got: usize, min: usize },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("bad artifact {path}: {reason}")]
    Artifact { path: PathBuf, reason: String },
    #[error("missing artifact: {0}")]
    Missing(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, AplError>;
