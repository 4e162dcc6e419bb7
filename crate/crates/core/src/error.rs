use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("infeasible constraint set: {0}")]
    Infeasible(String),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("degenerate QP solution: coordinate {index} is within {tol:e} of a bound")]
    DegenerateJacobian { index: usize, tol: f64 },
    #[error("enumeration of {requested} points exceeds the budget of {budget}")]
    BudgetExceeded { requested: u128, budget: u128 },
    #[error(
        "rejection band accepted no grid points (grid too coarse or level set outside the box)"
    )]
    EmptyBand,
    #[error("denominator interval [{lo}, {hi}] contains zero")]
    DivisionBySpanningZero { lo: f64, hi: f64 },
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
