use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad hyperparameters, infeasible splits, empty inputs.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an operation's input contract (shape, label range, alignment).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A dataset directory could not be ingested.
    #[error("ingestion error at {path}{}: {message}", row.map(|r| format!(" row {r}")).unwrap_or_default())]
    Ingestion {
        path: PathBuf,
        /// 1-based data row in the labels file, when the problem is row-specific.
        row: Option<usize>,
        message: String,
    },

    #[error("malformed {what}: {message}")]
    Format { what: &'static str, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user input rather than runtime failures.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Ingestion { .. } | Error::Format { .. }
        )
    }
}
