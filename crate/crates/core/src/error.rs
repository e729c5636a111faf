use std::path::PathBuf;

/// Errors raised anywhere in the training pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two vectors or matrices that must agree in size do not.
    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// A transient failure that survived the configured retry budget.
    #[error("embedding service failed after {attempts} attempts: {message}")]
    Retriable { attempts: u32, message: String },

    #[error("non-finite value during training: {0}")]
    NonFinite(String),

    #[error("checkpoint integrity check failed: {0}")]
    Integrity(String),

    #[error("missing prerequisite checkpoint for stage `{stage}` at {path}")]
    MissingStage { stage: String, path: PathBuf },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
