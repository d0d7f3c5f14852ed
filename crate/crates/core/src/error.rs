use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {field}: {message}")]
    Invalid { field: String, message: String },

    #[error("shape mismatch for {what}: expected {expected}, got {actual}")]
    Shape {
        what: String,
        expected: String,
        actual: String,
    },

    #[error("backbone `{0}` is already registered")]
    DuplicateBackbone(String),

    #[error("unknown backbone `{0}`")]
    UnknownBackbone(String),

    #[error("missing tensor `{0}` in weight archive")]
    MissingTensor(String),

    #[error("weight archive checksum mismatch")]
    Checksum,

    #[error("weights unavailable for `{model}`: {reason}")]
    MissingWeights { model: String, reason: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("labels contain a single class; both classes are required")]
    SingleClass,

    #[error("empty input: {0}")]
    Empty(String),

    #[error("{0}")]
    State(String),

    #[error("degenerate split: {0}")]
    DegenerateSplit(String),

    #[error("non-finite training loss at step {step}")]
    NonFiniteLoss {
        step: usize,
        trace: Vec<crate::train::TraceRecord>,
    },

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("failed to parse {what}: {message}")]
    Parse { what: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Invalid {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn shape(
        what: impl Into<String>,
        expected: impl std::fmt::Debug,
        actual: impl std::fmt::Debug,
    ) -> Self {
        Error::Shape {
            what: what.into(),
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Invalid { .. }
                | Error::Shape { .. }
                | Error::DuplicateBackbone(_)
                | Error::UnknownBackbone(_)
                | Error::SingleClass
                | Error::Empty(_)
                | Error::DegenerateSplit(_)
                | Error::OutOfRange(_)
                | Error::Parse { .. }
                | Error::Unsupported(_)
        )
    }
}
