//! Linear forward maps used by the conjugate test problems.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::{EvalCounter, ForwardModel, Solution};
use crate::stats::Gaussian;
use crate::{CoreError, Result};

/// Fixed linear map f(theta) = A theta with a Gaussian observation noise
/// model attached. The prediction does not depend on the design, so its
/// design Jacobian is zero.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub noise: Gaussian,
}

impl LinearModel {
    pub fn new(a: DMatrix<f64>, noise: Gaussian) -> Result<Self> {
        if noise.dim() != a.nrows() {
            return Err(CoreError::DimensionMismatch {
                context: "LinearModel::new",
                expected: format!("noise dimension {}", a.nrows()),
                got: format!("{}", noise.dim()),
            });
        }
        Ok(Self { a, noise })
    }
}

struct LinearSolution {
    value: DVector<f64>,
}

impl Solution for LinearSolution {
    fn measure(&self, _design: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.value.clone())
    }

    fn fd_step(&self) -> f64 {
        1e-4
    }
}

impl ForwardModel for LinearModel {
    fn param_dim(&self) -> usize {
        self.a.ncols()
    }

    fn obs_dim(&self) -> usize {
        self.a.nrows()
    }

    fn solve(
        &self,
        theta: &DVector<f64>,
        _time: f64,
        counter: &EvalCounter,
    ) -> Result<Box<dyn Solution>> {
        if theta.len() != self.a.ncols() {
            return Err(CoreError::DimensionMismatch {
                context: "LinearModel::solve",
                expected: format!("theta of length {}", self.a.ncols()),
                got: format!("{}", theta.len()),
            });
        }
        counter.add(1);
        Ok(Box::new(LinearSolution {
            value: &self.a * theta,
        }))
    }
}

/// Design-dependent linear map f(theta; d) = A(d) theta. The design enters
/// through a caller-supplied sensitivity function, and the design Jacobian
/// falls back to the shared finite-difference path, mirroring how the PDE
/// models expose their design sensitivity.
#[derive(Clone)]
pub struct DesignLinearModel {
    a_of: Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>,
    param_dim: usize,
    obs_dim: usize,
    pub noise: Gaussian,
    fd_step: f64,
}

impl DesignLinearModel {
    pub fn new(
        a_of: Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>,
        param_dim: usize,
        obs_dim: usize,
        noise: Gaussian,
        fd_step: f64,
    ) -> Result<Self> {
        if noise.dim() != obs_dim {
            return Err(CoreError::DimensionMismatch {
                context: "DesignLinearModel::new",
                expected: format!("noise dimension {obs_dim}"),
                got: format!("{}", noise.dim()),
            });
        }
        if !(fd_step > 0.0) {
            return Err(CoreError::InvalidParameter {
                name: "fd_step",
                reason: format!("finite-difference step {fd_step} must be positive"),
            });
        }
        Ok(Self {
            a_of,
            param_dim,
            obs_dim,
            noise,
            fd_step,
        })
    }

    /// Sensitivity matrix A(d).
    pub fn a_at(&self, design: &DVector<f64>) -> DMatrix<f64> {
        (self.a_of)(design)
    }
}

struct DesignLinearSolution {
    a_of: Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>,
    theta: DVector<f64>,
    fd_step: f64,
}

impl Solution for DesignLinearSolution {
    fn measure(&self, design: &DVector<f64>) -> Result<DVector<f64>> {
        Ok((self.a_of)(design) * &self.theta)
    }

    fn fd_step(&self) -> f64 {
        self.fd_step
    }
}

impl ForwardModel for DesignLinearModel {
    fn param_dim(&self) -> usize {
        self.param_dim
    }

    fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    fn solve(
        &self,
        theta: &DVector<f64>,
        _time: f64,
        counter: &EvalCounter,
    ) -> Result<Box<dyn Solution>> {
        if theta.len() != self.param_dim {
            return Err(CoreError::DimensionMismatch {
                context: "DesignLinearModel::solve",
                expected: format!("theta of length {}", self.param_dim),
                got: format!("{}", theta.len()),
            });
        }
        counter.add(1);
        Ok(Box::new(DesignLinearSolution {
            a_of: Arc::clone(&self.a_of),
            theta: theta.clone(),
            fd_step: self.fd_step,
        }))
    }
}
