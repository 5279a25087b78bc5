use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("schema error in {context}: {message}")]
    Schema { context: String, message: String },

    #[error("parse error in {context} at row {row}, column {column}: {message}")]
    Parse {
        context: String,
        row: usize,
        column: usize,
        message: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("numeric error in {layer}: {message}")]
    Numeric { layer: String, message: String },

    #[error("referential integrity error: {0}")]
    Referential(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {diagnostics}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        diagnostics: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv error in {context}: {source}")]
    Csv {
        context: String,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    pub fn csv(context: impl Into<String>, source: csv::Error) -> Self {
        Error::Csv {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn numeric(layer: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Numeric {
            layer: layer.into(),
            message: message.into(),
        }
    }
}
