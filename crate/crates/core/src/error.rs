use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CstpError>;

#[derive(Debug, Error)]
pub enum CstpError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("unsupported format version {found} in {what} (this build reads version {supported})")]
    Version {
        what: String,
        found: u32,
        supported: u32,
    },

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CstpError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        CstpError::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        CstpError::InvalidArgument(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        CstpError::Data(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CstpError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        CstpError::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}
