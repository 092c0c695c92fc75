//! Error type shared by every module of the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IkeError {
    #[error("identity memory is empty")]
    EmptyMemory,
    #[error("identity {label} has a degenerate mean feature (norm {norm:e})")]
    DegenerateMean { label: usize, norm: f64 },
    #[error("label {label} has no samples (expected contiguous labels 0..{n_ids})")]
    MissingLabel { label: usize, n_ids: usize },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("label {label} out of range for {n_ids} identities")]
    LabelOutOfRange { label: usize, n_ids: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("provenance tags are not available")]
    MissingProvenance,
    #[error("embedding has degenerate norm {0:e}")]
    DegenerateEmbedding(f64),
    #[error("cached forward trace does not belong to these parameters")]
    StaleCache,
    #[error("empty batch")]
    EmptyBatch,
    #[error("no relevant items for query")]
    NoRelevant,
    #[error("evaluation has no valid query with a non-empty gallery")]
    EmptyGallery,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("dimension mismatch at line {line}: expected {expected}, found {found}")]
    DimensionMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, IkeError>;
