use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("backward called without a preceding train-mode forward")]
    BackwardWithoutForward,

    #[error("parameter `{0}` has no fresh gradient")]
    StaleGradient(String),

    #[error("checkpoints are not congruent: {0}")]
    Incongruent(String),

    #[error("degenerate merge: {0}")]
    Degenerate(String),

    #[error("merge weights do not match the model spec: {0}")]
    MergeWeightsMismatch(String),

    #[error("missing state: {0}")]
    MissingState(String),

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("unsupported format version {found} in {path} (expected {expected})")]
    VersionMismatch { path: PathBuf, found: u32, expected: u32 },

    #[error("checkpoint {path} was built for spec digest {found}, expected {expected}")]
    IncompatibleSpec {
        path: PathBuf,
        found: String,
        expected: String,
    },

    #[error("unknown split `{0}`")]
    UnknownSplit(String),

    #[error("split `{0}` is empty")]
    EmptySplit(String),

    #[error("unknown layer `{name}`; valid layers: {}", valid.join(", "))]
    UnknownLayer { name: String, valid: Vec<String> },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Corrupt {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
