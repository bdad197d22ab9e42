use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Input violated a documented precondition (shape, range, finiteness).
    #[error("validation error: {0}")]
    Validation(String),

    #[error("no donor frame: corruption needs at least two frames, got {0}")]
    NoDonorFrame(usize),

    #[error("correction diverged at iteration {iteration}: data residual {residual:e}")]
    Diverged { iteration: usize, residual: f64 },

    #[error("training aborted at epoch {epoch}: loss is {loss}")]
    NonFiniteLoss { epoch: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// True for errors caused by bad inputs rather than runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Validation(_) | Error::NoDonorFrame(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::validation(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
