use std::io;

use thiserror::Error;

/// Errors raised by the restoration toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("retrieval failed: {0}")]
    Retrieval(String),

    #[error("malformed {kind} file: {detail}")]
    Format { kind: &'static str, detail: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("unknown configuration key {0:?}")]
    UnknownKey(String),

    #[error("image codec: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn contract(detail: impl Into<String>) -> Self {
        Error::Contract(detail.into())
    }

    pub(crate) fn format(kind: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            kind,
            detail: detail.into(),
        }
    }

    /// Short machine-parsable code used in `ERR:<code>:` lines.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "SHAPE",
            Error::Contract(_) => "CONTRACT",
            Error::Retrieval(_) => "RETRIEVAL",
            Error::Format { .. } => "FORMAT",
            Error::NonFinite(_) => "NONFINITE",
            Error::Config(_) | Error::UnknownKey(_) => "CONFIG",
            Error::Image(_) => "IMAGE",
            Error::Io(_) => "IO",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
