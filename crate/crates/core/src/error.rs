use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("class index {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid probability vector: {0}")]
    InvalidProbabilities(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: expected {expected} classes, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("no truth recorded for sample `{0}`")]
    MissingTruth(String),

    #[error("no eligible expert for sample `{0}`: every annotator was filtered out")]
    NoEligibleExpert(String),

    #[error("expert `{expert}` has no annotation for sample `{sample}`")]
    MissingAnnotation { expert: String, sample: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn parse(path: &std::path::Path, line: u64, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.to_path_buf(),
            line,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// True when the error stems from user-supplied input rather than a
    /// failure while running an experiment. The CLI maps this to exit code 1.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::NoEligibleExpert(_)
                | Error::MissingAnnotation { .. }
                | Error::Degenerate(_)
                | Error::Io { .. }
        )
    }
}
