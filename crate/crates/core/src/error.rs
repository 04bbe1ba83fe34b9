use thiserror::Error;

/// Errors produced anywhere in the estimation pipeline.
///
/// Variants are grouped by [`ErrorKind`] so front-ends can map them onto
/// stable exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: row {row}, column `{column}`: {message}")]
    Parse {
        path: String,
        row: usize,
        column: String,
        message: String,
    },

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("insufficient aggregated data: {0}")]
    InsufficientAggregatedData(String),

    #[error("no finite solution for target {target} from source {source_study}: {reason}")]
    Infeasible {
        target: usize,
        source_study: usize,
        reason: String,
    },

    #[error("solver did not converge after {iterations} iterations (gradient norm {grad_norm:.3e}); last iterate {last:?}")]
    NotConverged {
        iterations: usize,
        grad_norm: f64,
        last: Vec<f64>,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("undefined estimand: {0}")]
    UndefinedEstimand(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Coarse classification used for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Numerical,
    Infeasible,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Parse { .. }
            | Error::Validation(_)
            | Error::InsufficientAggregatedData(_)
            | Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_) => ErrorKind::Validation,
            Error::Infeasible { .. } => ErrorKind::Infeasible,
            Error::NotConverged { .. } | Error::Numerical(_) | Error::UndefinedEstimand(_) => {
                ErrorKind::Numerical
            }
        }
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
