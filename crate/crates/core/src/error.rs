use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A shape, range or configuration precondition was not met.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(&'static str),

    #[error("degenerate zero-variance sine map (omega_s = {omega_s}, omega_t = {omega_t})")]
    DegenerateVariance { omega_s: f64, omega_t: f64 },

    #[error("unknown task id {0}")]
    UnknownTask(usize),

    #[error("stale forward cache: parameters changed since the forward pass")]
    StaleCache,

    #[error("finite-difference check refused: {count} parameters exceeds the limit of {limit}")]
    TooManyParameters { count: usize, limit: usize },

    #[error("training diverged at epoch {epoch}, iteration {iteration}: loss = {loss:e}")]
    Diverged { epoch: usize, iteration: usize, loss: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Shorthand for building a [`Error::Contract`].
macro_rules! contract {
    ($($arg:tt)*) => {
        $crate::error::Error::Contract(format!($($arg)*))
    };
}
pub(crate) use contract;
