//! Error taxonomy shared by every module.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Operand shapes are incompatible for an op. Carries both shapes.
    #[error("{op}: dimension mismatch, lhs shape {lhs:?} vs rhs shape {rhs:?}")]
    Dim {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A forward op produced NaN or Inf.
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },

    /// A caller violated an operation contract (e.g. backward on a non-scalar).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// An ROI mask with no active voxels/pixels.
    #[error("degenerate ROI: {0}")]
    DegenerateRoi(String),

    /// Channel/depth wiring does not line up.
    #[error("wiring error: {0}")]
    Wiring(String),

    /// Evaluation protocol misuse (e.g. fewer than two items for two-way trials).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// A checkpoint or dump failed its integrity check.
    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
