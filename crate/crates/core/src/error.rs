use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("gradient requested for a non-scalar output of shape {0:?}")]
    NonScalar(Vec<usize>),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("unknown identity {0}")]
    UnknownIdentity(usize),
    #[error("sequence length {len} exceeds context {context}")]
    SequenceTooLong { len: usize, context: usize },
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("no valid queries to evaluate")]
    NoValidQueries,
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("config digest mismatch: checkpoint {found}, config {expected}")]
    DigestMismatch { found: String, expected: String },
    #[error("missing tensor `{0}` in checkpoint")]
    MissingTensor(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("frozen parameters changed: {0}")]
    FrozenChanged(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("image error at {path}: {msg}")]
    Image { path: PathBuf, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
