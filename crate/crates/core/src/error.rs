//! Error type shared by every module of the crate.

use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("argument error: {0}")]
    Argument(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("empty clip: no frames matching `{pattern}` in {dir}")]
    EmptyClip { dir: PathBuf, pattern: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("version error: {0}")]
    Version(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-parsable code, used as the prefix of CLI diagnostics.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Argument(_) => "E_ARG",
            Error::Format(_) => "E_FORMAT",
            Error::EmptyClip { .. } => "E_EMPTY",
            Error::Config(_) => "E_CONFIG",
            Error::Version(_) => "E_VERSION",
            Error::Numeric(_) => "E_NUMERIC",
            Error::Io { .. } | Error::Image { .. } => "E_IO",
        }
    }
}

/// Shorthand for returning an [`Error::Argument`].
macro_rules! arg_err {
    ($($t:tt)*) => {
        return Err($crate::error::Error::Argument(format!($($t)*)))
    };
}
pub(crate) use arg_err;
