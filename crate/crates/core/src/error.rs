use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid camera {id}: {reason}")]
    InvalidCamera { id: u32, reason: String },

    #[error("empty initialization set")]
    EmptyInitialization,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite {term} loss on view {view}")]
    NonFiniteLoss { term: &'static str, view: u32 },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("{}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("unknown camera id {0}")]
    UnknownCamera(u32),

    #[error("training diverged at step {step} on view {view}: {reason}")]
    Diverged { step: usize, view: u32, reason: String },
}

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            return Error::MissingFile(path.into());
        }
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier used in the CLI's machine-readable error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidCamera { .. } => "invalid_camera",
            Error::EmptyInitialization => "empty_initialization",
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::InvalidConfig(_) => "invalid_config",
            Error::MissingFile(_) => "missing_file",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
            Error::Dataset(_) => "dataset",
            Error::UnknownCamera(_) => "unknown_camera",
            Error::Diverged { .. } => "diverged",
        }
    }
}
