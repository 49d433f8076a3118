use thiserror::Error;

/// Errors surfaced by the solver library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum PgdpoError {
    #[error("matrix is not positive definite (pivot {pivot:.3e} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("linear system is singular")]
    SingularMatrix,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("degenerate market: {0}")]
    DegenerateMarket(String),
    #[error("consumption fraction undefined at t = {t} with horizon {horizon}")]
    HorizonExhausted { t: f64, horizon: f64 },
    #[error("value ODE oracle diverged at t = {t} (g = {g})")]
    OracleDiverged { t: f64, g: f64 },
    #[error("utility evaluated at non-positive argument {0} with gamma >= 1")]
    UtilityOverflow(f64),
    #[error("barrier domain error: weight {index} = {value} is not positive")]
    DomainError { index: usize, value: f64 },
    #[error("Newton solve hit the iteration cap ({iterations}) with residual {residual:.3e}")]
    MaxIterations { iterations: usize, residual: f64 },
    #[error("barrier Jacobian is singular")]
    SingularJacobian,
    #[error("KKT enumeration found no feasible certificate")]
    NoFeasibleCertificate,
    #[error("KKT enumeration supports at most {max} risky assets, got {n}")]
    OracleTooLarge { n: usize, max: usize },
    #[error("non-finite objective at iteration {iteration} (seed {seed})")]
    NonFiniteObjective { iteration: u64, seed: u64 },
    #[error("reference undefined: {0}")]
    ReferenceUndefined(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint/market mismatch: {0}")]
    Mismatch(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("format error: {0}")]
    Format(String),
}

impl From<std::io::Error> for PgdpoError {
    fn from(e: std::io::Error) -> Self {
        PgdpoError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for PgdpoError {
    fn from(e: serde_json::Error) -> Self {
        PgdpoError::Format(e.to_string())
    }
}

impl From<csv::Error> for PgdpoError {
    fn from(e: csv::Error) -> Self {
        PgdpoError::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, PgdpoError>;
