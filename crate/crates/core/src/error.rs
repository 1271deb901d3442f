//! Crate-wide error type.
//!
//! Every fallible operation returns [`Error`]. The [`ErrorKind`] partition is
//! what the CLI maps onto process exit codes (config / data / numerical).

use thiserror::Error;

/// Coarse classification used by callers that need to map errors onto
/// exit codes or retry policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Invalid configuration or arguments supplied by the caller.
    Config,
    /// Malformed, inconsistent or insufficient input data.
    Data,
    /// A numerical procedure failed (divergence, singularity, NaN, ...).
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    /// An argument is outside its mathematical domain (e.g. non-positive spot).
    #[error("domain error: {0}")]
    Domain(String),

    /// Query point lies outside the liquid range; no extrapolation is performed.
    #[error("out of range: {context}: ({tau}, {m}) not inside the liquid range")]
    OutOfRange { context: String, tau: f64, m: f64 },

    /// Shapes of the supplied operands do not conform.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// A linear inequality system has an empty feasible region. The
    /// certificate lists the rows of a Farkas-style infeasibility witness.
    #[error("infeasible constraint system (certificate rows: {certificate:?})")]
    Infeasible { certificate: Vec<usize> },

    /// A linear system is singular or too ill-conditioned to trust.
    #[error("singular system: {0}")]
    Singular(String),

    /// A numerical routine failed to converge or produced non-finite values.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid data: {0}")]
    Validation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::Domain(_)
            | Error::OutOfRange { .. }
            | Error::InsufficientData(_)
            | Error::Parse { .. }
            | Error::Validation(_)
            | Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_) => ErrorKind::Data,
            Error::Dimension { .. }
            | Error::Infeasible { .. }
            | Error::Singular(_)
            | Error::Numerical(_) => ErrorKind::Numerical,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
