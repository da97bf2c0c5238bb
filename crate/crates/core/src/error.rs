use thiserror::Error;

use crate::adp::AdpTrace;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("matrix is not symmetric: {0}")]
    NotSymmetric(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("rank deficient: {0}")]
    RankDeficient(String),

    #[error("policy is not stabilizing (spectral radius {0:.6})")]
    NotStabilizing(f64),

    #[error("Riccati iteration did not converge after {iterations} iterations (residual {residual:e})")]
    RiccatiNoConvergence { iterations: usize, residual: f64 },

    #[error("tau undefined: matrix has zero spectral radius")]
    TauUndefined,

    #[error("attack infeasible: {0}")]
    Infeasible(String),

    #[error("ADP learner aborted: {reason}")]
    AdpAborted { reason: String, trace: Box<AdpTrace> },

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
    /// Short machine-readable tag used in structured error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Parameter(_) => "parameter",
            Error::NotSymmetric(_) => "not_symmetric",
            Error::NotPositiveDefinite(_) => "not_positive_definite",
            Error::RankDeficient(_) => "rank_deficient",
            Error::NotStabilizing(_) => "not_stabilizing",
            Error::RiccatiNoConvergence { .. } => "riccati_no_convergence",
            Error::TauUndefined => "tau_undefined",
            Error::Infeasible(_) => "infeasible",
            Error::AdpAborted { .. } => "adp_aborted",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
