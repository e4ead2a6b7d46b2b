use std::io;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("zero-sized dimension in {op}: shape {shape:?}")]
    ZeroDim { op: &'static str, shape: Vec<usize> },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("malformed tensor file: {0}")]
    Format(String),

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("non-finite value at {what}[{index}]")]
    NonFinite { what: String, index: usize },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
