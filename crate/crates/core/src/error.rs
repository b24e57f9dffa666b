use thiserror::Error;

pub type Result<T> = std::result::Result<T, VcmmError>;

#[derive(Debug, Error)]
pub enum VcmmError {
    #[error("dimension mismatch in `{field}`: expected {expected}, found {found}")]
    DimensionMismatch { field: &'static str, expected: usize, found: usize },

    #[error("index variable {margin} value {value} at row {row} lies outside the basis domain [0, 1]")]
    IndexOutOfDomain { row: usize, margin: usize, value: f64 },

    #[error("non-finite value in `{0}`")]
    NonFinite(&'static str),

    #[error("variance must be strictly positive, got {0}")]
    NonPositiveVariance(f64),

    #[error("{what} is singular or not positive definite (smallest eigenvalue {min_eigenvalue:e})")]
    Singular { what: &'static str, min_eigenvalue: f64 },

    #[error("matrix is not symmetric: max asymmetry {0:e}")]
    NotSymmetric(f64),

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("inconsistent summaries: computed residual sum of squares {0:e} is negative")]
    NegativeVariance(f64),

    #[error("wire format: {0}")]
    Wire(String),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("worker for partition {0} failed: {1}")]
    WorkerFailed(u32, String),

    #[error("malformed input: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for VcmmError {
    fn from(e: csv::Error) -> Self {
        VcmmError::Parse(e.to_string())
    }
}

impl From<serde_json::Error> for VcmmError {
    fn from(e: serde_json::Error) -> Self {
        VcmmError::Parse(e.to_string())
    }
}
