use std::path::PathBuf;

use thiserror::Error;

use crate::engine::spec::Violation;

/// Errors produced by the runtime, the analysis layer and the optimizer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("pipeline spec is invalid: {}", format_violations(.0))]
    InvalidSpec(Vec<Violation>),

    #[error("unknown store `{0}`")]
    UnknownStore(String),

    #[error("unknown file {file} in store `{store}`")]
    UnknownFile { store: String, file: usize },

    #[error("unknown node `{0}`")]
    UnknownNode(String),

    #[error("node `{0}` has no parallelism knob")]
    NotTunable(String),

    #[error("parallelism must be at least 1, got {0}")]
    InvalidParallelism(u32),

    #[error("cannot cache at `{0}`: it is inside the randomness closure")]
    RandomCache(String),

    #[error("iterator tree is closed")]
    Closed,

    #[error("trace has no root completions")]
    EmptyTrace,

    #[error("division by zero guard: {0}")]
    Unknown(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("candidate signatures differ: {0}")]
    SignatureMismatch(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {message}")]
    Parse { context: String, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}
