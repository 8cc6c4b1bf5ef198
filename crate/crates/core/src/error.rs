use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the quadrature engine and experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("Gram matrix not positive definite (final jitter {jitter:e})")]
    NotPositiveDefinite { jitter: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("integrand returned {value} at {point:?} (batch {batch_index})")]
    Integrand {
        batch_index: usize,
        point: Vec<f64>,
        value: f64,
    },

    #[error("I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV failure: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// True for errors that stem from floating point breakdown rather than
    /// bad input or the filesystem.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite { .. } | Error::Numerical(_) | Error::Integrand { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
