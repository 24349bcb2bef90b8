use thiserror::Error;

/// Errors raised across the estimation pipeline.
///
/// Variants are grouped by the CLI exit-code class they map to
/// (see [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("underdetermined: {0}")]
    Underdetermined(String),

    #[error("solver did not converge after {iterations} iterations (objective {objective:e})")]
    Convergence {
        iterations: usize,
        objective: f64,
        best: Vec<f64>,
    },

    #[error("feasible region is unbounded: {0}")]
    Unbounded(String),

    #[error("simulation failed: {0}")]
    Simulation(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for this error class: 2 for data/input problems,
    /// 3 for numerical convergence failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Schema(_)
            | Error::Data(_)
            | Error::Parse { .. }
            | Error::Io { .. }
            | Error::Range(_) => 2,
            Error::Convergence { .. } => 3,
            Error::Config(_) | Error::Usage(_) => 4,
            _ => 1,
        }
    }
}
