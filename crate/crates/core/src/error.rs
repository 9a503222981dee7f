use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("empty KG source `{0}`")]
    EmptySource(String),

    #[error("relation `{0}` has no template entry")]
    UnknownRelation(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("interference ratio undefined: no sample is predicted correctly by every STL model")]
    InterferenceUndefined,

    #[error("missing dependency: {0}")]
    MissingDependency(String),

    #[error("refusing to overwrite existing {0} (use --force)")]
    Exists(PathBuf),

    #[error("step `{step}` failed: {source}")]
    Step {
        step: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input or configuration rather than a runtime failure.
    pub fn is_usage(&self) -> bool {
        match self {
            Error::Config(_)
            | Error::Parse { .. }
            | Error::Exists(_)
            | Error::MissingDependency(_)
            | Error::UnknownRelation(_) => true,
            Error::Step { source, .. } => source.is_usage(),
            _ => false,
        }
    }
}
