use thiserror::Error;

#[derive(Debug, Error)]
pub enum EcoError {
    #[error("validation failed for unit `{unit}`: {reason}")]
    InvalidUnit { unit: String, reason: String },

    #[error("invalid dataset: {0}")]
    InvalidData(String),

    #[error("design matrix is rank deficient: {0}")]
    RankDeficient(String),

    #[error("underdetermined system: {n} units for {p} parameters")]
    Underdetermined { n: usize, p: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv parse error at line {line}: {reason}")]
    CsvParse { line: usize, reason: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, EcoError>;
