//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("arithmetic overflow in {0}")]
    Overflow(&'static str),

    /// Stage `stage` (0-based) has no FLOPs left after the earlier stages.
    #[error(
        "infeasible plan at stage {stage} (size {size}): residual FLOPs {residual} cannot fund a single token"
    )]
    InfeasiblePlan { stage: usize, size: u64, residual: i128 },

    #[error("unsupported expansion: {0}")]
    UnsupportedExpansion(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: u64, loss: f32 },

    #[error("decode error: {0}")]
    Decode(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
