use std::path::PathBuf;

/// Errors raised anywhere in the churn pipeline.
///
/// Variants fall into three families (configuration, data, internal invariant)
/// so front ends can map them onto distinct exit codes; see [`Error::category`].
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown feature name `{0}`")]
    UnknownFeature(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("class `{0}` is empty")]
    EmptyClass(&'static str),

    #[error("column mismatch at position {index}: expected `{expected}`, found `{found}`")]
    ColumnMismatch {
        index: usize,
        expected: String,
        found: String,
    },

    #[error("non-finite value in column `{column}` at row {row}")]
    NonFinite { row: usize, column: String },

    #[error("invariant violated: {0}")]
    Invariant(String),
}

/// Coarse error family, used to pick a process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Internal,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::UnknownFeature(_) => ErrorCategory::Config,
            Error::Io { .. }
            | Error::Data(_)
            | Error::EmptyClass(_)
            | Error::ColumnMismatch { .. }
            | Error::NonFinite { .. } => ErrorCategory::Data,
            Error::Invariant(_) => ErrorCategory::Internal,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
