//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by simulator components.
#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors (or a tensor and an expectation) disagree on shape.
    #[error("{op}: shape mismatch, left {left:?} vs right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// An index (token id, label, neuron, layer) is outside its valid range.
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    /// A caller violated an operation's contract.
    #[error("{op}: {message}")]
    Contract { op: &'static str, message: String },

    /// A configuration document failed validation; `path` is the offending field.
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    /// A runtime theory check (convergence monitor, bound check) was violated.
    #[error("theory check failed: {0}")]
    TheoryViolation(String),

    /// A checkpoint or wire payload is malformed.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn contract(op: &'static str, message: impl Into<String>) -> Self {
        Error::Contract {
            op,
            message: message.into(),
        }
    }

    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
