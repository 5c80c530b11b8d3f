use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    MalformedRow {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("replay miss for request digest {digest}")]
    ReplayMiss { digest: String },

    #[error("llm backend error: {0}")]
    Backend(String),

    #[error("unexpected LLM output for {what}: {detail}\n--- raw output ---\n{raw}")]
    Format {
        what: String,
        detail: String,
        raw: String,
    },

    #[error("code runner error: {0}")]
    Runner(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("serialization error: {0}")]
    Serde(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True when this error, or the stage error wrapping it, is a replay-cache miss.
    pub fn is_replay_miss(&self) -> bool {
        match self {
            Error::ReplayMiss { .. } => true,
            Error::Stage { source, .. } => source.is_replay_miss(),
            _ => false,
        }
    }

    pub fn in_stage(self, stage: &str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage: stage.to_string(),
                source: Box::new(e),
            },
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
