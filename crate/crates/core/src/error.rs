use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("weight file not found: {0}")]
    MissingWeights(PathBuf),

    #[error("invalid weight file: {0}")]
    Weights(String),

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("token store {path} was built with config hash {found}, current config hashes to {expected}")]
    HashMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("corrupt token store: {0}")]
    Store(String),

    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),

    #[error("unbalanced transport problem: supply {supply} vs demand {demand}")]
    Unbalanced { supply: f64, demand: f64 },

    #[error("invalid transport problem: {0}")]
    Transport(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Unbalanced { .. }
            | Error::Transport(_)
            | Error::Degenerate(_)
            | Error::NonFinite { .. } => 3,
            _ => 2,
        }
    }
}
