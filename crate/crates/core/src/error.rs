use thiserror::Error;

use crate::game::GameOutcome;
use crate::solver::SolverError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("solver failure: {0}")]
    Solver(#[from] SolverError),

    #[error("infeasible dispatch in period {period}: {reason}")]
    InfeasibleDispatch { period: usize, reason: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid {field}: {message}")]
    Validation { field: String, message: String },

    #[error("search budget exceeded after {evaluations} evaluations")]
    SearchBudgetExceeded {
        evaluations: usize,
        best: Box<GameOutcome>,
    },

    #[error("cooperative set excludes the aggregate-optimal schedule of unit {unit}")]
    EmptyBargainingSet { unit: usize },

    #[error("bargaining solution is not interior (constrained split pi_s={pi_s:.6}, pi_a={pi_a:.6})")]
    NonInteriorSolution { pi_s: f64, pi_a: f64 },

    #[error("precondition violated: {0}")]
    PreconditionViolated(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("unsupported schema_version {found} (expected {expected})")]
    Version { found: u64, expected: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Innermost error, looking through stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    /// Process exit status: 2 invalid input, 3 infeasible, 4 search budget
    /// exceeded, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Validation { .. }
            | Error::Parse { .. }
            | Error::Version { .. }
            | Error::DimensionMismatch(_)
            | Error::PreconditionViolated(_) => 2,
            Error::InfeasibleDispatch { .. }
            | Error::EmptyBargainingSet { .. }
            | Error::Solver(SolverError::Infeasible { .. }) => 3,
            Error::SearchBudgetExceeded { .. } => 4,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
