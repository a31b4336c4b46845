use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("backend timed out")]
    Timeout,

    #[error("backend error (retryable): {0}")]
    Retryable(String),

    #[error("backend error: {0}")]
    Backend(String),

    #[error("sample `{id}`: {source}")]
    Sample {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: usize, last: Box<Error> },

    #[error("backend contract violated: {0}")]
    Contract(String),

    #[error("disease card error: {0}")]
    Card(String),

    #[error("unparseable verdict: {0}")]
    Verdict(String),

    #[error("no card for `{name}`; nearest: {}", suggestions.join(", "))]
    MissingCard { name: String, suggestions: Vec<String> },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Core(#[from] omake_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn for_sample(self, id: &str) -> Self {
        match self {
            e @ Error::Sample { .. } => e,
            e => Error::Sample { id: id.to_owned(), source: Box::new(e) },
        }
    }

    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Timeout | Error::Retryable(_))
    }

    /// True for errors caused by bad input rather than a failure while running.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Config(_) | Error::MissingCard { .. } => true,
            Error::Core(e) => e.is_validation(),
            Error::Sample { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}
