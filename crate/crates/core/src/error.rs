use thiserror::Error;

/// Errors shared by every module in the crate.
///
/// Variants mirror the failure contracts of the operations that raise them;
/// constructors validate eagerly so downstream numerics can assume shapes and
/// definiteness.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("covariance matrix is not square ({rows}x{cols})")]
    NonSquare { rows: usize, cols: usize },

    #[error("covariance matrix is not symmetric (max asymmetry {max_asym:.3e})")]
    NotSymmetric { max_asym: f64 },

    #[error("covariance has eigenvalue {value:.3e} below tolerance {tol:.3e}")]
    NegativeEigenvalue { value: f64, tol: f64 },

    #[error("ensemble of size {size} is too small for {context}")]
    DegenerateEnsemble { size: usize, context: &'static str },

    #[error("covariance is singular in {context}")]
    SingularCovariance { context: &'static str },

    #[error("covariance factorization failed in {context}: {reason}")]
    FactorizationFailure {
        context: &'static str,
        reason: String,
    },

    #[error("noise covariance for observation {index} is singular")]
    SingularNoise { index: usize },

    #[error("pooling weight {index} is zero where a positive weight is required")]
    ZeroWeight { index: usize },

    #[error("pooling weights sum to {sum} (must be 1 within 1e-12)")]
    WeightSumError { sum: f64 },

    #[error("Kalman gain solve failed even after jitter (innovation covariance not SPD)")]
    GainSolveFailure,

    #[error("all importance weights underflowed to zero ({context})")]
    AllWeightsUnderflow { context: String },

    #[error("clustering produced an empty group ({context})")]
    EmptyGroup { context: &'static str },

    #[error("posterior mass underflowed to zero during a belief update")]
    ZeroPosteriorMass,

    #[error("measurement location ({x}, {y}) is outside the solver domain")]
    OutOfDomain { x: f64, y: f64 },

    #[error("PDE march produced a non-finite field (t = {time})")]
    UnstableStep { time: f64 },
}
