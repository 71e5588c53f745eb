use std::io;

use thiserror::Error;

/// Errors produced by every stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("corrupt input: {malformed} of {total} records malformed")]
    CorruptInput { malformed: usize, total: usize },

    /// A precondition of an operation was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("provider `{provider}` failed: {message}")]
    Provider { provider: String, message: String },

    /// The model response could not be parsed. `raw` holds the full response text.
    #[error("could not parse {section}: {raw:?}")]
    Parse { section: String, raw: String },

    #[error("training error: {0}")]
    Training(String),

    /// Non-finite loss or parameters; training was aborted.
    #[error("numerical abort at step {step}: {detail}")]
    Numerical { step: usize, detail: String },

    #[error("missing artifact {path}; run `{producer}` first")]
    MissingArtifact { path: String, producer: String },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn parse(section: impl Into<String>, raw: impl Into<String>) -> Self {
        Error::Parse {
            section: section.into(),
            raw: raw.into(),
        }
    }
}
