use std::path::PathBuf;

use crate::losses::LossTerms;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid grid shape: {0}")]
    InvalidShape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Optimization produced a non-finite loss. Carries the trace up to and
    /// including the offending iteration.
    #[error("non-finite loss at iteration {iteration}")]
    Diverged {
        iteration: usize,
        trace: Vec<LossTerms>,
    },

    #[error("gradient check failed: {0}")]
    GradientCheck(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported dtype: {0}")]
    UnsupportedDtype(String),

    #[error("payload length mismatch: expected {expected} bytes, found {found}")]
    PayloadLengthMismatch { expected: usize, found: usize },

    #[error("invalid header field `{field}`: {reason}")]
    InvalidHeader { field: &'static str, reason: String },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerical pipeline (as opposed to bad input or I/O).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Diverged { .. } | Error::NonFinite(_) | Error::GradientCheck(_)
        )
    }

    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::BadMagic { .. }
                | Error::UnsupportedDtype(_)
                | Error::PayloadLengthMismatch { .. }
                | Error::InvalidHeader { .. }
                | Error::Json(_)
        )
    }
}
