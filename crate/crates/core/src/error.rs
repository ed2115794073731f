use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failure categories, mapped one-to-one onto process exit codes by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Config,
    Io,
    Numeric,
    Invariant,
}

impl Category {
    pub fn exit_code(self) -> i32 {
        match self {
            Category::Config => 1,
            Category::Io => 2,
            Category::Numeric => 3,
            Category::Invariant => 4,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {shapes:?}")]
    Shape { op: &'static str, shapes: Vec<Vec<usize>> },

    #[error("{op}: non-finite value produced at node {node}")]
    NonFinite { op: &'static str, node: usize },

    #[error("backprop root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config line {line}: key `{key}`: {message}")]
    Config { key: String, line: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed file: {message}")]
    Format { path: PathBuf, message: String },

    #[error("missing prerequisite artifact {path}: {hint}")]
    MissingArtifact { path: PathBuf, hint: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

impl Error {
    pub fn category(&self) -> Category {
        match self {
            Error::Config { .. } | Error::InvalidArgument(_) => Category::Config,
            Error::Io { .. } | Error::Format { .. } | Error::MissingArtifact { .. } => Category::Io,
            Error::NonFinite { .. } | Error::Numeric(_) => Category::Numeric,
            Error::Shape { .. } | Error::NonScalarRoot(_) | Error::Invariant(_) => {
                Category::Invariant
            }
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format { path: path.into(), message: message.into() }
    }

    pub(crate) fn shape(op: &'static str, shapes: &[&[usize]]) -> Self {
        Error::Shape { op, shapes: shapes.iter().map(|s| s.to_vec()).collect() }
    }
}
