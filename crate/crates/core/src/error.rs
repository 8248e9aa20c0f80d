use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unparseable manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },

    #[error("payload length mismatch: expected {expected} values, found {found}")]
    PayloadLength { expected: usize, found: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("date {date} outside data range: {context}")]
    OutOfRange { date: String, context: String },

    #[error("insufficient history: {0}")]
    InsufficientHistory(String),

    #[error("empty result: {0}")]
    Empty(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("lasso did not converge after {sweeps} sweeps (KKT residual {kkt_residual:e})")]
    NotConverged { sweeps: usize, kkt_residual: f64 },

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Numerical failures map to a dedicated CLI exit code; everything else is a data error.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotConverged { .. }
                | Error::Diverged { .. }
                | Error::Numerical(_)
                | Error::NonFinite(_)
        )
    }
}
