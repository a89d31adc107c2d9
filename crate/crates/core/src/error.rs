use std::path::PathBuf;

use thiserror::Error;

/// Errors shared by every stage of the reconstruction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("rejected input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("iterative solver diverged at iteration {iteration} (step size {step}); try a smaller step")]
    Diverged { step: f64, iteration: usize },

    #[error("non-finite training loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },

    // The io error is part of the message rather than a source, so chained
    // reports do not print it twice.
    #[error("{}: {error}", path.display())]
    Io { path: PathBuf, error: std::io::Error },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            error: source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
