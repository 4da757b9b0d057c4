use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    /// A required column is missing or the header is malformed.
    #[error("schema error: {0}")]
    Schema(String),
    /// A cell value violates a table invariant. `row` is 1-based over data rows.
    #[error("validation error at row {row}: {message}")]
    Validation { row: usize, message: String },
    #[error("factor error: {0}")]
    Factor(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    /// Argument outside the support of a density or transform.
    #[error("domain error: {0}")]
    Domain(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("design error: {0}")]
    Design(String),
    #[error("initialization failed: {0}")]
    Initialization(String),
    #[error("r-hat unavailable: {0}")]
    RhatUnavailable(String),
    #[error("simulation error: {0}")]
    Simulation(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
