use thiserror::Error;

use crate::protocol::DecodeError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("degenerate polygon (area {area:e})")]
    DegeneratePolygon { area: f64 },

    #[error("polygon is not convex")]
    NonConvexPolygon,

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("could not place object {index} without overlap after {attempts} attempts")]
    Placement { index: usize, attempts: usize },

    #[error("invalid message: {0}")]
    InvalidMessage(String),

    #[error(transparent)]
    Decode(#[from] DecodeError),

    #[error("config: {0}")]
    Config(String),

    #[error("run failed (strategy {strategy}, seed {seed}, sigma_e {sigma_e}): {source}")]
    Run {
        strategy: String,
        seed: u64,
        sigma_e: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
