use thiserror::Error;

/// Crate-wide error type. Variants follow the failure categories of the
/// module contracts: configuration, precondition, shape, indexing, state
/// and file-format errors.
#[derive(Error, Debug)]
pub enum NereError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("indexing error in field `{field}`: index {index} out of range (cardinality {cardinality})")]
    Index {
        field: String,
        index: i64,
        cardinality: usize,
    },

    #[error("state error: {0}")]
    State(String),

    #[error("format error in {path} at line {line}: {msg}")]
    Format {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("missing artifact `{artifact}`: run `{producer}` first")]
    MissingArtifact { artifact: String, producer: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, NereError>;
