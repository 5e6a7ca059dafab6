use thiserror::Error;

/// Errors raised by the solver stack.
#[derive(Debug, Error)]
pub enum Error {
    /// The adaptive integrator could not advance (step-size underflow, non-finite state,
    /// or step budget exhausted).
    #[error("integration failed at t = {last_time}: {reason}")]
    Integration { last_time: f64, reason: String },

    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("matrix is numerically indefinite")]
    Indefinite,

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid benchmark: {0}")]
    InvalidBenchmark(String),

    #[error("malformed matrix file: {0}")]
    MatrixFile(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_check(cond: bool, what: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Dimension(what()))
    }
}
