use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("record {index} is invalid: {message}")]
    InvalidRecord { index: usize, message: String },

    #[error("template error: {0}")]
    Template(String),

    /// Failure reported by a [`crate::generator::TextGenerator`] backend.
    #[error("language model backend: {0}")]
    Backend(String),

    #[error("generation failed at sample {index}: {source}")]
    Generation {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("stage error: {0}")]
    Stage(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("config hash mismatch for {artifact}: expected {expected}, found {found}")]
    HashMismatch {
        artifact: String,
        expected: String,
        found: String,
    },

    #[error("weight learning diverged at outer epoch {outer_epoch}, inner step {inner_step}: {detail}")]
    WeightDivergence {
        outer_epoch: usize,
        inner_step: usize,
        detail: String,
    },

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    TrainDivergence {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
