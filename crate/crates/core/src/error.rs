use std::io;

use thiserror::Error;

/// Errors raised by tensor operations, layers, accounting and training.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch on {axis}: {detail}")]
    Shape {
        op: &'static str,
        axis: String,
        detail: String,
    },
    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("non-finite value produced by {op} in layer `{layer}`")]
    NonFinite { op: String, layer: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid architecture: {0}")]
    Arch(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, axis: impl Into<String>, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        axis: axis.into(),
        detail: detail.into(),
    }
}

pub(crate) fn arg_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::InvalidArgument {
        op,
        detail: detail.into(),
    }
}
