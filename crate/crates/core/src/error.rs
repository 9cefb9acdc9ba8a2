use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing table: {0}")]
    MissingTable(String),

    #[error("{file}:{line}: {message}")]
    Parse { file: String, line: usize, message: String },

    #[error("{file}:{line}: dangling foreign key {column}={value} (no such {entity})")]
    DanglingForeignKey {
        file: String,
        line: usize,
        column: String,
        value: String,
        entity: String,
    },

    #[error("{file}:{line}: duplicate primary key {key}")]
    DuplicateKey { file: String, line: usize, key: String },

    #[error("invalid schema: {0}")]
    Schema(String),

    #[error("unknown patient: {0}")]
    UnknownPatient(String),

    #[error("unknown target row: {0}")]
    UnknownTarget(String),

    #[error("unknown feature: {0}")]
    UnknownFeature(String),

    #[error("unknown attribute: {0}")]
    UnknownAttribute(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("too many features for exact enumeration: {features} > {limit}")]
    ExactLimit { features: usize, limit: usize },

    #[error("hierarchy mismatch: {0}")]
    Hierarchy(String),

    #[error("feature not abnormal: {0}")]
    NotAbnormal(String),

    #[error("undefined reference range for {0}")]
    UndefinedReference(String),

    #[error("io error at {path}: {source}")]
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
}
