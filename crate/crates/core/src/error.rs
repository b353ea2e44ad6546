use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("zero extent: all points coincide")]
    ZeroExtent,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("cardinality mismatch: {0} vs {1}")]
    CardinalityMismatch(usize, usize),

    #[error("checkpoint stage mismatch: expected {expected}, found {found}")]
    StageMismatch {
        expected: &'static str,
        found: String,
    },

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Numeric failures (as opposed to usage or input errors).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_) | Error::NonFiniteGradient(_) | Error::ZeroExtent
        )
    }
}
