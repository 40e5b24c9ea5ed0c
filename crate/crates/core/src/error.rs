use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

/// Location-tagged parse failure for the text formats.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileFormatError {
    pub path: Option<PathBuf>,
    /// 1-based line number.
    pub line: usize,
    pub message: String,
}

impl FileFormatError {
    pub fn new(line: usize, message: impl Into<String>) -> Self {
        debug_assert!(line >= 1);
        Self {
            path: None,
            line: line.max(1),
            message: message.into(),
        }
    }

    pub fn with_path(mut self, path: impl Into<PathBuf>) -> Self {
        self.path = Some(path.into());
        self
    }
}

impl fmt::Display for FileFormatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.path {
            Some(p) => write!(f, "{}:{}: {}", p.display(), self.line, self.message),
            None => write!(f, "line {}: {}", self.line, self.message),
        }
    }
}

impl std::error::Error for FileFormatError {}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Format(#[from] FileFormatError),

    #[error("binary container: {0}")]
    Binary(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("subsystem '{subsystem}' has no score for trial ({model_id}, {segment_id})")]
    MissingTrial {
        subsystem: String,
        model_id: String,
        segment_id: String,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("optimizer did not converge: {0}")]
    NoConvergence(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Invalid(msg.into()))
}
