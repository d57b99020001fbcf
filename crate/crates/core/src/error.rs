use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum DdeError {
    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("step {t} out of range 1..={max}")]
    StepOutOfRange { t: usize, max: usize },

    #[error("step ordering violated: t'={t_prime} must be < t={t}")]
    StepOrdering { t: usize, t_prime: usize },

    #[error("variance is zero at step {0}")]
    ZeroVariance(usize),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("class {class} out of range (n_classes = {n_classes})")]
    ClassOutOfRange { class: usize, n_classes: usize },

    #[error("index {index} out of range (len = {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("forward cache does not belong to this predictor")]
    StateMismatch,

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("degenerate reference: {ties} of {total} pairs were exact ties")]
    DegenerateReference { ties: usize, total: usize },

    #[error("non-finite value at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed file: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("checkpoint incompatible: {0}")]
    Incompatible(String),

    #[error("empty input: {0}")]
    Empty(&'static str),
}

pub type Result<T> = std::result::Result<T, DdeError>;

impl DdeError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DdeError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        DdeError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(DdeError::DimensionMismatch { expected, got });
    }
    Ok(())
}
