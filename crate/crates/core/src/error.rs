use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, SirError>;

/// Every failure the library can surface.
///
/// The variants are grouped by [`ErrorCategory`], which the command-line
/// front end turns into a stable exit code.
#[derive(Debug, Error)]
pub enum SirError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("gradient root must be a scalar, got shape {0:?}")]
    NonScalarRoot([usize; 4]),

    #[error("AUROC is undefined: {0}")]
    UndefinedAuroc(String),

    #[error("image parse error at byte {offset}: {detail}")]
    ImageParse { offset: usize, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse failure class used for exit codes and one-line diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Numeric,
    Data,
    Config,
    Checkpoint,
    Io,
}

impl ErrorCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Numeric => "numeric",
            ErrorCategory::Data => "data",
            ErrorCategory::Config => "config",
            ErrorCategory::Checkpoint => "checkpoint",
            ErrorCategory::Io => "io",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 3,
            ErrorCategory::Io => 4,
            ErrorCategory::Data => 5,
            ErrorCategory::Checkpoint => 6,
            ErrorCategory::Numeric => 7,
        }
    }
}

impl SirError {
    pub fn category(&self) -> ErrorCategory {
        match self {
            SirError::Shape { .. }
            | SirError::InvalidArgument { .. }
            | SirError::NonScalarRoot(_)
            | SirError::UndefinedAuroc(_) => ErrorCategory::Numeric,
            SirError::ImageParse { .. } => ErrorCategory::Data,
            SirError::Config(_) => ErrorCategory::Config,
            SirError::Checkpoint(_) => ErrorCategory::Checkpoint,
            SirError::Io { .. } => ErrorCategory::Io,
        }
    }

    /// An [`SirError::Io`] for `path`.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SirError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        SirError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        SirError::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }
}
