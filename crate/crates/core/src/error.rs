use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CprError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CprError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("empty prototype bank: {0}")]
    EmptyPrototypes(&'static str),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("insufficient pool: need {needed} neighbors, pool has {available}")]
    InsufficientPool { needed: usize, available: usize },

    #[error("split error: {0}")]
    Split(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("checkpoint error in tensor `{tensor}`: {message}")]
    Checkpoint { tensor: String, message: String },

    #[error("non-deterministic loss: evaluations differ ({first} vs {second})")]
    NonDeterministic { first: f64, second: f64 },

    #[error("gradient check failed for `{tensor}`: relative error {rel_error:e}")]
    GradientMismatch { tensor: String, rel_error: f64 },

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CprError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Self::Shape(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user configuration rather than bad data.
    pub fn is_usage(&self) -> bool {
        matches!(self, Self::Config(_) | Self::Split(_))
    }
}
