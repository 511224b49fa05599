use thiserror::Error;

use crate::model::ValidationReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(ValidationReport),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("time {t} outside the coefficient domain [{start}, {end}]")]
    OutOfRange { t: f64, start: f64, end: f64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("Riccati blow-up at node {node}")]
    RiccatiBlowUp { node: usize },

    #[error("filtering covariance singular at node {node} (min eigenvalue {min_eig:e}); use the Bryson-Frazier smoother instead")]
    SingularCovariance { node: usize, min_eig: f64 },

    #[error("numerical fault: {0}")]
    Numerical(String),

    #[error("unknown functional `{0}`")]
    UnknownFunctional(String),

    #[error("model config: {0}")]
    Config(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of a numerical method, as opposed to bad inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::RiccatiBlowUp { .. } | Error::SingularCovariance { .. } | Error::Numerical(_))
    }
}
