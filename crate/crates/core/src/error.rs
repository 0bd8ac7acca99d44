use thiserror::Error;

pub type Result<T> = std::result::Result<T, SbmError>;

#[derive(Debug, Error)]
pub enum SbmError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("enumeration of {configs} configurations exceeds the cap of {cap}")]
    EnumerationCap { configs: f64, cap: u64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("all {0} variational restarts diverged")]
    AllRestartsFailed(usize),

    #[error("sampler stalled: {0}")]
    Stalled(String),

    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid input: {0}")]
    Input(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl SbmError {
    /// True for errors caused by malformed user input rather than numerics.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            SbmError::Parse { .. }
                | SbmError::Input(_)
                | SbmError::Dimension(_)
                | SbmError::InvalidParameter(_)
                | SbmError::Io(_)
                | SbmError::Json(_)
        )
    }
}
