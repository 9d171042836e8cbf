use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error in {path}: {message}")]
    Csv { path: PathBuf, message: String },

    #[error("{0}")]
    Schema(String),

    #[error("{path}, row {row}: {message}")]
    Cell {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("invalid study: {0}")]
    InvalidStudy(String),

    #[error("design matrix is rank deficient at column {column} ({name})")]
    Singular { column: usize, name: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("no events in the outcome data")]
    NoEvents,

    #[error("non-identifiable covariate at column {0}: constant within every event risk set")]
    NonIdentifiable(usize),

    #[error("Cox fit did not converge: coefficient {index} diverged ({value:.3e}); monotone likelihood")]
    MonotoneLikelihood { index: usize, value: f64 },

    #[error("Cox fit did not converge in {0} iterations")]
    NoConvergence(usize),

    #[error("singular matrix: {0}")]
    SingularMatrix(String),

    #[error("risk set at t = {time:.4} has {size} validation members, need at least {needed}; try a smaller K")]
    UndersizedRiskSet {
        time: f64,
        size: usize,
        needed: usize,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("{failed} of {total} replicates failed (limit {limit_pct}%)")]
    TooManyFailures {
        failed: usize,
        total: usize,
        limit_pct: f64,
    },

    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for errors caused by bad input or configuration, as opposed to
    /// numerical failures during fitting.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Csv { .. }
                | Error::Schema(_)
                | Error::Cell { .. }
                | Error::InvalidStudy(_)
                | Error::Config(_)
        )
    }
}
