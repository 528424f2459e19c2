use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("width mismatch: expected {expected} features, got {actual}")]
    WidthMismatch { expected: usize, actual: usize },

    #[error("context is empty")]
    EmptyContext,

    #[error("action {action} out of range for {env} ({count} actions)")]
    InvalidAction {
        env: &'static str,
        action: usize,
        count: usize,
    },

    #[error("cannot connect to bridge at {endpoint}: {source}")]
    Connection {
        endpoint: String,
        #[source]
        source: std::io::Error,
    },

    #[error("bridge protocol error: {0}")]
    Protocol(String),

    #[error("bridge replied with error: {0}")]
    Remote(String),

    #[error("backend does not support {0}")]
    Capability(&'static str),

    #[error("config error in {path}: {message}")]
    Config { path: PathBuf, message: String },

    #[error("invalid value for `{field}`: {message}")]
    Field { field: &'static str, message: String },

    #[error("plot error: {0}")]
    Plot(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
