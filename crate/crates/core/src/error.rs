use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unsupported format: {0}")]
    Format(String),

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("zero pivot in incomplete factorization at row {row}")]
    ZeroPivot { row: usize },

    #[error("linear solve did not converge after {iterations} iterations (relative residual {residual:e})")]
    Solve { iterations: usize, residual: f64 },

    #[error("{} destination point(s) outside every RBF support: {}", .ids.len(), format_ids(.ids))]
    Uncovered { ids: Vec<usize> },

    #[error("zero support radius at source point {0} (coincident neighbours)")]
    DegenerateRadius(usize),

    #[error("division by zero: {0}")]
    DivisionByZero(&'static str),

    #[error("simulated communication failure: {0}")]
    Comm(String),

    #[error("internal consistency error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    /// Whether the failure is numerical (as opposed to bad input data).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::ZeroPivot { .. }
                | Error::Solve { .. }
                | Error::Uncovered { .. }
                | Error::DegenerateRadius(_)
                | Error::DivisionByZero(_)
                | Error::Internal(_)
        )
    }
}

fn format_ids(ids: &[usize]) -> String {
    const SHOWN: usize = 20;
    let mut s = ids
        .iter()
        .take(SHOWN)
        .map(|i| i.to_string())
        .collect::<Vec<_>>()
        .join(", ");
    if ids.len() > SHOWN {
        s.push_str(", ...");
    }
    s
}
