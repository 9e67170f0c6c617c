use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("state left the admissible range at t = {t}")]
    StateOverflow { t: usize },

    #[error("time index {t} is smaller than the memory length {tau}")]
    WindowOutOfRange { t: usize, tau: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value passed to {0}")]
    NonFinite(&'static str),

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    Asymmetric(f64),

    #[error("Jacobi eigensolver did not converge after {sweeps} sweeps")]
    EigNonConvergence { sweeps: usize },

    #[error("Gram matrix is singular even after regularization (condition estimate {condition:e})")]
    SingularGram { condition: f64 },

    #[error("basis is not excited: empirical lambda = {0:e}")]
    NotExcited(f64),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by the user's configuration rather than by the numerics.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig(_)
                | Error::DimensionMismatch { .. }
                | Error::WindowOutOfRange { .. }
                | Error::Io(_)
                | Error::Json(_)
                | Error::Csv(_)
        )
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}
