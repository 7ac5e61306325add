use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MorpheusError>;

#[derive(Debug, Error)]
pub enum MorpheusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: schema violation at `{field}`: {reason}")]
    Schema {
        line: usize,
        field: String,
        reason: String,
    },

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("sequence of {len} tokens exceeds the maximum of {max}")]
    SequenceOverflow { len: usize, max: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("missing component: {0}")]
    MissingComponent(String),

    #[error("stage order violation: {0}")]
    StageOrder(String),
}

/// Coarse error classes, used by the command-line front end to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numerical,
}

impl MorpheusError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MorpheusError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            MorpheusError::InvalidArgument(_) | MorpheusError::StageOrder(_) => ErrorClass::Usage,
            MorpheusError::NonFinite(_) => ErrorClass::Numerical,
            _ => ErrorClass::Data,
        }
    }
}
