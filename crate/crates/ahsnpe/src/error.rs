use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("weighted matrix is not symmetric: |w[{i},{j}] - w[{j},{i}]| = {delta:e}")]
    NonSymmetric { i: usize, j: usize, delta: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("matrix is not positive definite{}", .context.as_deref().map(|c| format!(" ({c})")).unwrap_or_default())]
    NotPositiveDefinite { context: Option<String> },

    #[error("empty mixture has no density")]
    EmptyMixture,

    #[error("no mixture component tagged {0}")]
    UnknownTag(String),

    #[error("degenerate training data: {0}")]
    DegenerateData(String),

    #[error("non-finite training loss at epoch {epoch}, batch {batch}: {value}")]
    NonFiniteLoss { epoch: usize, batch: usize, value: f64 },

    #[error("proposal/prior ratio is non-finite at theta = {theta:?} (log prior = {log_prior}, log proposal = {log_proposal})")]
    RatioUnderflow {
        theta: Vec<f64>,
        log_prior: f64,
        log_proposal: f64,
    },

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimMismatch {
        expected: usize,
        got: usize,
        context: String,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("singular sample covariance (after jitter)")]
    SingularCovariance,

    #[error("nothing to report: {0}")]
    NothingToReport(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.into(),
        }
    }
}
