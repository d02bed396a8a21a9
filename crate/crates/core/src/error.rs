use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown schema version {0}")]
    UnknownSchemaVersion(u64),
    #[error("column count mismatch: table has {table}, schema has {schema}")]
    ColumnCountMismatch { table: usize, schema: usize },
    #[error("attribute `{0}` is not in the schema")]
    AttributeNotInSchema(String),
    #[error("column {0} has no observed values")]
    AllMissingColumn(usize),
    #[error("train statistics do not match the schema: {0}")]
    StatsSchemaMismatch(String),
    #[error("type mismatch for attribute `{attribute}`: {message}")]
    TypeMismatch { attribute: String, message: String },
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("invalid table: {0}")]
    InvalidTable(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("variance must be strictly positive")]
    NonpositiveVariance,
    #[error("attention query {0} has no allowed key")]
    EmptyKeyRow(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("model has not been trained")]
    UntrainedModel,
    #[error("latent sampling is not supported by this model kind")]
    SamplingUnsupported,
    #[error("latent correlation matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("block design needs {needed} rows but the population has {available}")]
    RowBudgetExceeded { needed: usize, available: usize },
    #[error("empty test set")]
    EmptyTestSet,
    #[error("ground truth has a degenerate range")]
    DegenerateRange,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
