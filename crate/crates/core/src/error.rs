use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the solver, the imaging operators and the persistence layer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("infeasible iterate: {0}")]
    Infeasible(String),

    /// A residual that is negative well beyond round-off, which means the
    /// oracle handed to the solver is inconsistent.
    #[error("internal consistency violated: residual {residual:e} at scale {scale:e}")]
    NegativeResidual { residual: f64, scale: f64 },

    #[error("eigendecomposition failed: {0}")]
    Eigen(String),

    #[error("not a primal-dual pair: {0}")]
    NotPrimalDualPair(String),

    #[error("image too small: {width}x{height} cannot hold a {patch}x{patch} patch")]
    ImageTooSmall {
        width: usize,
        height: usize,
        patch: usize,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("checksum mismatch in {path}: expected {expected:08x}, found {found:08x}")]
    Checksum {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
