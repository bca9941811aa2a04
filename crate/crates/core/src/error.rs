//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the pipeline, grouped by failure class so callers
/// (notably the CLI) can map them to distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/matrix dimension disagreement. Names both shapes.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid configuration value or combination.
    #[error("invalid config: {0}")]
    Config(String),

    /// Caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Filter design failure (e.g. cutoff at or beyond Nyquist).
    #[error("filter design: {0}")]
    FilterDesign(String),

    /// Input sequence too short for the requested operation.
    #[error("input too short: {0}")]
    Length(String),

    /// Malformed input file. Carries file and 1-based line for diagnostics.
    #[error("parse error at {file}:{line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },

    /// Dataset-level problem (missing trials, empty selections, ...).
    #[error("dataset: {0}")]
    Data(String),

    /// Checkpoint serialization/deserialization failure.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Shorthand used by parsers.
    pub fn parse(file: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            file: file.into(),
            line,
            msg: msg.into(),
        }
    }
}
