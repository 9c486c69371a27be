use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate snippet id `{0}`")]
    DuplicateId(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("bad container {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("no shareable spans between positive and negative")]
    MixFailure,

    #[error("no negatives available for context `{0}`")]
    NoNegatives(String),

    #[error("non-finite {term} loss at step {step}")]
    NonFinite { term: &'static str, step: usize },

    #[error("unknown {kind} `{name}` (known: {known})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        known: String,
    },

    #[error("stage `{stage}` needs {missing}; run `{run_first}` first")]
    MissingDependency {
        stage: &'static str,
        missing: String,
        run_first: &'static str,
    },

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn record(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Record {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit code for the CLI: 2 config, 3 dependency, 4 numerical, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) | Error::UnknownStrategy { .. } => 2,
            Error::MissingDependency { .. } => 3,
            Error::NonFinite { .. } => 4,
            _ => 1,
        }
    }
}
