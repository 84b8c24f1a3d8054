//! Error type shared by the numerical and filtering modules.

use nalgebra::DMatrix;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("matrix is not symmetric (max asymmetry {asymmetry:e} exceeds {tolerance:e})")]
    NotSymmetric { asymmetry: f64, tolerance: f64 },

    #[error("matrix is not positive definite (pivot {pivot} is {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("Newton iteration did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    NotConverged { iterations: usize, grad_norm: f64 },

    #[error("no sign change of the scalar equation after expanding the bracket to [{lo}, {hi}]")]
    NoBracket { lo: f64, hi: f64 },

    #[error("scalar equation residual {residual:e} exceeds tolerance {tolerance:e}")]
    ScalarResidual { residual: f64, tolerance: f64 },

    #[error("invalid interval [{lo}, {hi}]")]
    InvalidInterval { lo: f64, hi: f64 },

    #[error("all weights are zero or not finite")]
    DegenerateWeights,

    #[error("noise and control cost are inconsistent: gamma G R^-1 G^T =\n{scaled_control_cost}differs from the noise covariance\n{noise_covariance}")]
    ConditionViolated {
        scaled_control_cost: DMatrix<f64>,
        noise_covariance: DMatrix<f64>,
    },

    #[error("control cost matrix R is not symmetric positive definite")]
    InvalidControlCost,

    #[error("steering angle {alpha} makes the axle speed singular")]
    SteeringSingularity { alpha: f64 },

    #[error("landmark coincides with the laser position")]
    CoincidentLandmark,

    #[error("unknown landmark id {0}")]
    UnknownLandmark(u32),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("input/output: {0}")]
    Io(String),
}
