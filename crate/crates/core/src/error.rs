use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {site}")]
    NonFinite { site: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("attack failed at step {step}: {reason}")]
    Attack { step: usize, reason: String },

    #[error("training diverged at iteration {iteration}: {what} is not finite")]
    Divergence { iteration: usize, what: String },

    #[error("format error at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },

    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Re-labels a non-finite error with the layer that produced it.
    pub fn in_layer(self, layer: &str) -> Self {
        match self {
            Error::NonFinite { site } => Error::NonFinite {
                site: format!("{layer} ({site})"),
            },
            other => other,
        }
    }
}
