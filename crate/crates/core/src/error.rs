use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("schema error: missing required column `{0}`")]
    Schema(String),

    #[error("parse error at row {row}: {msg}")]
    Parse { row: usize, msg: String },

    #[error("validation error at row {row}: {msg}")]
    Validation { row: usize, msg: String },

    #[error("rank deficiency: {0}")]
    RankDeficient(String),

    #[error("resource limit exceeded: {0}")]
    Resource(String),

    #[error("method error: {0}")]
    Method(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("no solution: {0}")]
    NoSolution(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("invalid fit document: {0}")]
    InvalidFit(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
