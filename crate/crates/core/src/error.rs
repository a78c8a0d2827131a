use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the KSAT pipeline.
#[derive(Debug, Error)]
pub enum KsatError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid taxonomy: {0}")]
    Taxonomy(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("duplicate post id `{0}`")]
    DuplicateId(String),

    #[error("post `{0}` has no sentences")]
    EmptyPost(String),

    #[error("cannot stratify: outcome {outcome} has {count} member(s)")]
    Stratify { outcome: String, count: usize },

    #[error("missing embedding for `{0}`")]
    MissingEmbedding(String),

    #[error("numerical collapse: {0}")]
    NumericalCollapse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = KsatError> = std::result::Result<T, E>;
