use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schema: {0}")]
    InvalidSchema(String),

    #[error("slot `{slot}` is not registered for intent `{intent}`")]
    SchemaMismatch { intent: String, slot: String },

    #[error("{path}:{line}: {message}")]
    Format {
        path: String,
        line: usize,
        message: String,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("no example values available for slot `{slot}`")]
    EmptyPool { slot: String },

    #[error("invalid token: {0:?}")]
    InvalidToken(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty input to {0}")]
    EmptyInput(&'static str),

    #[error("example conditioning is enabled but no example values were supplied")]
    EmptyExamples,

    #[error("description conditioning is enabled but the slot description is empty")]
    EmptyDescription,

    #[error("non-finite gradient in `{param}` at step {step}")]
    NonFiniteGradient { param: String, step: u64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (data files, schemas,
    /// configuration) rather than by a failure while running.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidSchema(_)
                | Error::SchemaMismatch { .. }
                | Error::Format { .. }
                | Error::Validation(_)
                | Error::Config(_)
                | Error::EmptyExamples
                | Error::EmptyDescription
                | Error::EmptyPool { .. }
                | Error::InvalidToken(_)
                | Error::Json(_)
        )
    }
}
