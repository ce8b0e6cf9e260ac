use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the solver, diagnostics and harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("grids do not match")]
    GridMismatch,

    #[error("omega is not a unit vector (|omega| = {0})")]
    NonUnitOmega(f64),

    #[error("invalid collision kernel: {0}")]
    InvalidKernel(String),

    #[error("sigma = {0} is outside (0, 1]")]
    SigmaOutOfRange(f64),

    #[error("renormalisation parameter alpha must be >= 0, got {0}")]
    NegativeAlpha(f64),

    #[error("unknown Povzner test function `{0}`")]
    UnknownPsi(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}:{line}: key `{key}`: {message}")]
    Config {
        path: String,
        line: usize,
        key: String,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed snapshot: {0}")]
    Snapshot(String),

    #[error("positivity condition violated: dt * max L = {rate_dt:.3e} > eta; admissible dt <= {admissible_dt:.6e}")]
    SubstepRequired { rate_dt: f64, admissible_dt: f64 },

    #[error("non-finite value detected at step {step}")]
    NonFinite { step: usize },

    #[error("substepping failed at step {step}: dt fell below {dt_min:.3e}")]
    SubstepFailed { step: usize, dt_min: f64 },

    #[error("missing series: {0}")]
    MissingSeries(String),

    #[error("oracle mismatch: max deviation {deviation:.3e} exceeds {tolerance:.1e}")]
    OracleMismatch { deviation: f64, tolerance: f64 },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 for validation errors, 2 for numerical aborts.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::SubstepRequired { .. }
            | Error::NonFinite { .. }
            | Error::SubstepFailed { .. }
            | Error::OracleMismatch { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
