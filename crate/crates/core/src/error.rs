use std::path::PathBuf;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected}, got {found}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        found: Shape,
    },

    #[error("invalid shape {0:?}: every extent must be at least 1")]
    InvalidShape([usize; 4]),

    #[error("buffer of {len} elements does not fill shape {shape}")]
    DataLength { shape: Shape, len: usize },

    #[error("{0}")]
    Invalid(String),

    #[error("backward requires a scalar loss, got shape {0}")]
    NotScalar(Shape),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {reason}", path.display())]
    Png { path: PathBuf, reason: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("non-finite loss at iteration {iteration}: {diagnostic}")]
    NonFinite { iteration: usize, diagnostic: String },
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl Into<String>, found: Shape) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.into(),
            found,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
