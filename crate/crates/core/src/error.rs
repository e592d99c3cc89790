//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by model construction, filtering and estimation.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid input: dimension mismatch, out-of-range parameter, malformed data.
    #[error("validation: {0}")]
    Validation(String),

    /// Numerical failure: singular matrix, unstable dynamics, non-PSD covariance.
    #[error("numerical: {0}")]
    Numerical(String),

    /// A sub-operation failed while processing a specific estimation batch.
    #[error("batch {index}: {source}")]
    Batch {
        index: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Wrap an error with the index of the estimation batch it occurred in.
    pub fn in_batch(self, index: usize) -> Self {
        Error::Batch {
            index,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
