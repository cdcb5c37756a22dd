use std::io;

use thiserror::Error;

/// Errors raised anywhere in the segmentation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("parameter tensor has no gradient buffer")]
    MissingGrad,

    #[error("malformed data: {0}")]
    Format(String),

    #[error("could not place {0} objects without overlap")]
    Placement(usize),

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

    /// True for failures caused by numerics (NaN/Inf) rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
