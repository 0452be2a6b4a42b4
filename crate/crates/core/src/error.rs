use std::path::PathBuf;

/// Errors produced anywhere in the fusion pipeline.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    /// A text or binary file did not match its expected layout.
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// A caller passed arguments violating an operation's preconditions.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty index")]
    EmptyIndex,
    #[error("pose rotation is not orthonormal (max deviation {deviation:e})")]
    NotOrthonormal { deviation: f64 },
    #[error("uncovered point(s): {0:?}")]
    UncoveredPoints(Vec<usize>),
    #[error("non-finite loss in term {term}")]
    NonFiniteLoss { term: &'static str },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl ToString, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.to_string(),
            line,
            message: message.into(),
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidArgument(message.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
