use std::io;

use thiserror::Error;

/// Errors produced by the attention library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor shape {dims:?}: {reason}")]
    Shape { dims: Vec<usize>, reason: String },

    #[error("non-finite input to {op} at flat index {index}")]
    NumericInput { op: &'static str, index: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("activations do not match inputs: {0}")]
    Consistency(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("training diverged at iteration {iter}: {detail}")]
    Divergence { iter: usize, detail: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("malformed tensor file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
