//! Error type shared across the pipeline.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on user-supplied values failed. Messages name the offending field.
    #[error("validation: {0}")]
    Validation(String),

    /// An index (e.g. a timestep) fell outside its valid range.
    #[error("index out of range: {0}")]
    Index(String),

    /// No pixels above the field-of-view luminance threshold.
    #[error("empty field of view: {0}")]
    EmptyFov(String),

    /// A translated artifact mask would leave the destination field of view.
    #[error("mask placement: {0}")]
    Placement(String),

    /// Phantom generation exhausted its reseed budget.
    #[error("phantom generation failed: {0}")]
    Generation(String),

    /// Checkpoint container is malformed or incompatible with the request.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// A non-finite value surfaced where the math guarantees finiteness.
    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code category: 2 validation, 3 I/O, 4 numeric abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 3,
            Error::Numeric(_) => 4,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
