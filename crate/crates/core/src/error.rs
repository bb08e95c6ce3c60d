use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the toolkit. Each variant maps onto a stable
/// category string used by the command line for machine-readable output.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("missing prerequisite: {what} (run `{upstream}` first)")]
    MissingPrerequisite { what: String, upstream: String },
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("llm client error: {0}")]
    Client(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid-input",
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::MissingPrerequisite { .. } => "missing-prerequisite",
            Error::Diverged { .. } => "diverged",
            Error::Checkpoint(_) => "checkpoint",
            Error::Manifest(_) => "manifest",
            Error::Client(_) => "client",
            Error::Io { .. } => "io",
        }
    }

    /// Process exit code for the category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::MissingPrerequisite { .. } => 3,
            Error::Io { .. } => 4,
            Error::InvalidInput(_) | Error::Shape(_) | Error::Manifest(_) => 5,
            Error::Checkpoint(_) => 6,
            Error::Diverged { .. } => 7,
            Error::Client(_) => 8,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
