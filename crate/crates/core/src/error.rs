use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("numeric failure: {0}")]
    NumericFailure(String),
    #[error("infeasible model: {0}")]
    InfeasibleModel(String),
    #[error("design failure: {0}")]
    DesignFailure(String),
    #[error("optimal control problem infeasible: {0}")]
    Infeasible(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("no predicted state enters the terminal set")]
    NoEntry,
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("internal invariant broken: {0}")]
    InternalInvariant(String),
    #[error("initialization failed: {0}")]
    Initialization(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what,
            expected,
            got,
        })
    }
}
