use thiserror::Error;

use crate::potentials::OperatorProbeReport;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("gate refused: probed ||T_p|| lower bound {} is not below 1", .report.max_ratio)]
    GateRefused { report: Box<OperatorProbeReport> },

    #[error("Neumann series diverges: term ratios {ratios:?}")]
    Divergence { ratios: Vec<f64> },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
