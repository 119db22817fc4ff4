use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or out-of-contract input data.
    #[error("input error: {0}")]
    Input(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Few-shot protocol violated (wrong class roles, empty pools, ...).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// A non-finite value appeared during computation.
    #[error("numeric error at {location}: {detail}")]
    Numeric { location: String, detail: String },

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    /// An API was called with state that does not belong to it.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("failed to load {path}: {detail}")]
    Load { path: PathBuf, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }

    pub fn numeric(location: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            location: location.into(),
            detail: detail.into(),
        }
    }

    pub fn load(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Load {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 3,
            Error::Divergence { .. } | Error::Numeric { .. } => 4,
            _ => 2,
        }
    }
}
