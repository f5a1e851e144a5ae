//! Forward models and the solve accounting they are audited against.
//!
//! A forward model maps parameters to a [`Solution`]: the full state of one
//! (counted) forward solve. Measurements are extracted from a solution by
//! interpolation-like queries that are free of further solves, which is what
//! lets the design-optimization layers move the measurement location without
//! re-running the model. Every full solve increments an [`EvalCounter`];
//! the cost ledgers reported by runs are sums of counter deltas, so any claim
//! about forward-solve budgets can be checked against one atomic total.

mod linear;
mod mlp;
mod pde;

pub use linear::{DesignLinearModel, LinearModel};
pub use mlp::{MlpCorrection, MLP_PARAM_COUNT};
pub use pde::{AdvectionScheme, Field, PdeConfig, PdeModel, SourceKind, SourceParams, SourceSpec, UnknownParams};

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};

use crate::stats::Ensemble;
use crate::{CoreError, Result};

/// Atomic count of full forward solves. Shared by reference between all
/// pipeline stages of a run; order of increments does not affect the total.
#[derive(Debug, Default)]
pub struct EvalCounter(AtomicU64);

impl EvalCounter {
    pub fn new() -> Self {
        Self(AtomicU64::new(0))
    }

    pub fn add(&self, n: u64) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }

    pub fn count(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

/// Where and when a measurement is taken, and its noise level.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    /// Measurement location in design space.
    pub design: DVector<f64>,
    /// Measurement time.
    pub time: f64,
    /// Scalar noise variance of each observation component.
    pub noise_var: f64,
}

impl Measurement {
    pub fn new(design: DVector<f64>, time: f64, noise_var: f64) -> Result<Self> {
        if !(time > 0.0) || !time.is_finite() {
            return Err(CoreError::InvalidParameter {
                name: "time",
                reason: format!("measurement time {time} must be positive and finite"),
            });
        }
        if !(noise_var > 0.0) || !noise_var.is_finite() {
            return Err(CoreError::InvalidParameter {
                name: "noise_var",
                reason: format!("noise variance {noise_var} must be positive and finite"),
            });
        }
        if design.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::InvalidParameter {
                name: "design",
                reason: "non-finite design coordinate".into(),
            });
        }
        Ok(Self {
            design,
            time,
            noise_var,
        })
    }

    /// Noise covariance as a d_y x d_y matrix.
    pub fn noise_cov(&self, d_y: usize) -> DMatrix<f64> {
        DMatrix::identity(d_y, d_y) * self.noise_var
    }
}

/// The state produced by one forward solve, queryable at any admissible
/// design without further solves.
pub trait Solution: Send {
    /// Noiseless prediction at `design`.
    fn measure(&self, design: &DVector<f64>) -> Result<DVector<f64>>;

    /// Step used by the default finite-difference design Jacobian.
    fn fd_step(&self) -> f64;

    /// d_y x d_design Jacobian of the prediction with respect to the design,
    /// by central differences of [`Solution::measure`]. Free of solves.
    fn design_jacobian(&self, design: &DVector<f64>) -> Result<DMatrix<f64>> {
        let h = self.fd_step();
        let d_d = design.len();
        let base = self.measure(design)?;
        let mut jac = DMatrix::zeros(base.len(), d_d);
        for k in 0..d_d {
            let mut plus = design.clone();
            plus[k] += h;
            let mut minus = design.clone();
            minus[k] -= h;
            let diff = (self.measure(&plus)? - self.measure(&minus)?) / (2.0 * h);
            jac.set_column(k, &diff);
        }
        Ok(jac)
    }
}

/// A parametrized forward map. Implementations define what one solve means;
/// the trait's free functions layer measurement extraction, batching, and
/// score computation on top.
pub trait ForwardModel: Sync {
    fn param_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;

    /// Run one full forward solve for `theta` up to `time`. Increments the
    /// counter by exactly one.
    fn solve(&self, theta: &DVector<f64>, time: f64, counter: &EvalCounter)
        -> Result<Box<dyn Solution>>;

    /// Validate that a measurement is admissible for this model (domain
    /// membership, time horizon). Default accepts everything.
    fn validate_measurement(&self, _meas: &Measurement) -> Result<()> {
        Ok(())
    }
}

/// Noiseless forward prediction f(theta) at a measurement. One counted solve.
pub fn eval_forward(
    model: &dyn ForwardModel,
    theta: &DVector<f64>,
    meas: &Measurement,
    counter: &EvalCounter,
) -> Result<DVector<f64>> {
    model.validate_measurement(meas)?;
    let solution = model.solve(theta, meas.time, counter)?;
    solution.measure(&meas.design)
}

/// The solutions of a batch of members, in member order.
pub struct SolutionSet {
    solutions: Vec<Box<dyn Solution>>,
}

impl SolutionSet {
    pub fn len(&self) -> usize {
        self.solutions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.solutions.is_empty()
    }

    pub fn get(&self, i: usize) -> &dyn Solution {
        self.solutions[i].as_ref()
    }

    /// Predictions of every member at `design`, one row per member.
    pub fn measure_all(&self, design: &DVector<f64>) -> Result<DMatrix<f64>> {
        let first = self.solutions[0].measure(design)?;
        let d_y = first.len();
        let mut out = DMatrix::zeros(self.len(), d_y);
        out.row_mut(0).copy_from(&first.transpose());
        for (i, sol) in self.solutions.iter().enumerate().skip(1) {
            let v = sol.measure(design)?;
            out.row_mut(i).copy_from(&v.transpose());
        }
        Ok(out)
    }
}

/// Solve every row of `members` up to `time`, fanning out over `threads`
/// worker threads. Output order is member order regardless of thread count,
/// and each member's solve is deterministic, so the result is bytewise
/// independent of `threads`.
pub fn solve_batch(
    model: &dyn ForwardModel,
    members: &DMatrix<f64>,
    time: f64,
    counter: &EvalCounter,
    threads: usize,
) -> Result<SolutionSet> {
    let n = members.nrows();
    if n == 0 {
        return Err(CoreError::DegenerateEnsemble {
            size: 0,
            context: "solve_batch",
        });
    }
    let workers = threads.max(1).min(n);
    let mut slots: Vec<Option<Result<Box<dyn Solution>>>> = Vec::with_capacity(n);
    slots.resize_with(n, || None);
    if workers == 1 {
        for (i, slot) in slots.iter_mut().enumerate() {
            *slot = Some(model.solve(&members.row(i).transpose(), time, counter));
        }
    } else {
        let chunk = n.div_ceil(workers);
        std::thread::scope(|scope| {
            for (w, slice) in slots.chunks_mut(chunk).enumerate() {
                let start = w * chunk;
                scope.spawn(move || {
                    for (off, slot) in slice.iter_mut().enumerate() {
                        let i = start + off;
                        *slot = Some(model.solve(&members.row(i).transpose(), time, counter));
                    }
                });
            }
        });
    }
    let mut solutions = Vec::with_capacity(n);
    for slot in slots {
        solutions.push(slot.expect("solve_batch slot filled")?);
    }
    Ok(SolutionSet { solutions })
}

/// Evaluate the forward map for every ensemble member at a measurement and
/// attach the predictions to the ensemble. J counted solves.
pub fn eval_forward_batch(
    model: &dyn ForwardModel,
    ensemble: &mut Ensemble,
    meas: &Measurement,
    counter: &EvalCounter,
    threads: usize,
) -> Result<()> {
    model.validate_measurement(meas)?;
    let solutions = solve_batch(model, &ensemble.members, meas.time, counter, threads)?;
    ensemble.predictions = Some(solutions.measure_all(&meas.design)?);
    Ok(())
}

/// Design-gradient of the Gaussian log likelihood at a solved state:
/// `J_d(f)' (y - f(d)) / sigma^2`. Free of solves given the solution.
pub fn design_loglik_grad(
    solution: &dyn Solution,
    y: &DVector<f64>,
    design: &DVector<f64>,
    noise_var: f64,
) -> Result<DVector<f64>> {
    let f = solution.measure(design)?;
    let jac = solution.design_jacobian(design)?;
    Ok(jac.transpose() * (y - f) / noise_var)
}

/// Counted convenience form of [`design_loglik_grad`]: one solve for `theta`,
/// then the score at the measurement's design.
pub fn design_loglik_grad_model(
    model: &dyn ForwardModel,
    theta: &DVector<f64>,
    y: &DVector<f64>,
    meas: &Measurement,
    counter: &EvalCounter,
) -> Result<DVector<f64>> {
    model.validate_measurement(meas)?;
    let solution = model.solve(theta, meas.time, counter)?;
    design_loglik_grad(solution.as_ref(), y, &meas.design, meas.noise_var)
}
