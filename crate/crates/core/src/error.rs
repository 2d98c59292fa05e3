use thiserror::Error;

pub type Result<T, E = QupelError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum QupelError {
    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("centers must be strictly ascending (index {index}: {prev} !< {next})")]
    UnsortedCenters { index: usize, prev: f64, next: f64 },

    #[error("center {value} at index {index} exceeds bound c_max = {c_max}")]
    CenterOutOfBounds { index: usize, value: f64, c_max: f64 },

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid value for `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("infeasible partition: {0}")]
    InfeasiblePartition(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl QupelError {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        QupelError::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub(crate) fn ensure_finite(values: &[f64], what: &'static str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(QupelError::NonFinite { what, index }),
        None => Ok(()),
    }
}

pub(crate) fn ensure_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(QupelError::DimensionMismatch {
            what,
            expected,
            got,
        })
    }
}
