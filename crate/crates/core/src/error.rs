use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A search space definition is malformed.
    #[error("invalid search space: parameter `{parameter}`: {reason}")]
    InvalidSpace { parameter: String, reason: String },

    /// A configuration violates its search space.
    #[error("invalid configuration: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unknown objective `{0}`")]
    UnknownObjective(String),

    #[error("objective sets differ: {left:?} vs {right:?}")]
    ObjectiveMismatch { left: Vec<String>, right: Vec<String> },

    #[error("group `{0}` has no evaluable probes")]
    MissingGroup(String),

    #[error("{path}: line {line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("scheduler: {0}")]
    Scheduler(String),

    #[error("worker protocol: {reason}: `{line}`")]
    Protocol { line: String, reason: String },

    #[error("backend failure: {0}")]
    Backend(String),

    #[error("evaluation timed out after {0:?}")]
    Timeout(std::time::Duration),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
