use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("class name is empty")]
    EmptyClassName,
    #[error("class `{class}`: wanted {wanted} descriptions, client returned {got} after {attempts} attempt(s)")]
    InsufficientDescriptions { class: String, wanted: usize, got: usize, attempts: usize },
    #[error("description client failed: {0}")]
    ClientFailure(String),
    #[error("unreadable image {path}: {reason}")]
    UnreadableImage { path: PathBuf, reason: String },
    #[error("class `{0}` is not in the knowledge base")]
    UnknownClass(String),
    #[error("class `{0}` has no knowledge descriptions")]
    EmptyKnowledge(String),
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("text encoder failure: {0}")]
    EncoderFailure(String),
    #[error("vector `{0}` has zero L2 norm")]
    ZeroNormVector(&'static str),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("weight load failure: {0}")]
    WeightLoadFailure(String),
    #[error("expected {expected} stage maps, got {got}")]
    MissingStage { expected: usize, got: usize },
    #[error("score {0} is outside [0, 1]")]
    OutOfRangeScore(f64),
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),
    #[error("dataset is empty: {0}")]
    DatasetEmpty(String),
    #[error("checkpoint hash mismatch: {0}")]
    HashMismatch(String),
    #[error("dataset layout violation: {0}")]
    LayoutViolation(String),
    #[error("anomalous sample {0} has no mask")]
    MissingMask(PathBuf),
    #[error("AUC needs both positive and negative labels")]
    DegenerateLabels,
    #[error("target dataset {0} overlaps the auxiliary training dataset (pass --allow-overlap to override)")]
    AuxiliaryOverlap(PathBuf),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code: 2 config error, 3 data error, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_)
            | Error::SchemaMismatch(_)
            | Error::AuxiliaryOverlap(_)
            | Error::WeightLoadFailure(_)
            | Error::HashMismatch(_) => 2,
            Error::NonFiniteLoss(_)
            | Error::ZeroNormVector(_)
            | Error::OutOfRangeScore(_)
            | Error::EncoderFailure(_) => 4,
            _ => 3,
        }
    }
}
