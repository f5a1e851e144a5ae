//! The per-stage calibration loop that runs the physical and error unknowns
//! on separate tracks.
//!
//! Each stage, at its own measurement time, does five things in order:
//! pick a sensor location for the source-location belief by exhaustively
//! scoring a candidate lattice with a grid-quadrature information gain;
//! observe the true system there and update the belief pointwise; pick a
//! sensor location for the error parameter by running the full
//! pooled-proposal gradient pipeline under a Gaussian prior centered at the
//! current error value; observe again and move the error parameter by
//! gradient steps on its log likelihood; finally refit the belief from its
//! original prior against the whole observation history under the updated
//! error parameter, so earlier observations are reinterpreted by the
//! corrected model.
//!
//! Field solves dominate the cost, and every block's ledger entry is read
//! back from the shared counter, so the reported stage cost is the counter
//! delta by construction. The belief scan solves one field per supported
//! grid node and reuses those fields for both the candidate scoring and the
//! pointwise update; the error track pays the usual outer + inner +
//! proposal solves; the refit solves one multi-snapshot march per node.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::eig::{build_proposals, eig_gradient, prepare_outer, DesignBox, DesignState};
use crate::eki::EkiStats;
use crate::forward::{
    solve_batch, EvalCounter, Field, ForwardModel, MlpCorrection, PdeConfig, PdeModel,
    SolutionSet, SourceKind, SourceParams, SourceSpec, UnknownParams,
};
use crate::importance::{make_grouping, GroupingConfig};
use crate::pooling::{make_pooled, PoolingWeights};
use crate::stats::{sample_gaussian, Gaussian, RngStream};
use crate::{CoreError, Result};

/// Measurement time of a 1-based stage number.
pub fn stage_time(stage: usize) -> f64 {
    0.05 + stage as f64 * 0.005
}

// ---------------------------------------------------------------------------
// Gauss-Hermite quadrature
// ---------------------------------------------------------------------------

/// Gauss-Hermite rule in the physicists' convention: integrates
/// `exp(-x^2) f(x)` exactly for polynomials up to degree 2n - 1.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Build an n-point rule from the Jacobi matrix of the Hermite recurrence:
/// zero diagonal, off-diagonal sqrt(k/2). Eigenvalues are the nodes; the
/// squared first eigenvector components, scaled by sqrt(pi), the weights.
pub fn gauss_hermite(n: usize) -> Result<GaussHermite> {
    if n == 0 {
        return Err(CoreError::InvalidParameter {
            name: "n",
            reason: "quadrature order must be positive".into(),
        });
    }
    let mut jacobi = DMatrix::zeros(n, n);
    for k in 1..n {
        let b = (k as f64 / 2.0).sqrt();
        jacobi[(k - 1, k)] = b;
        jacobi[(k, k - 1)] = b;
    }
    let eig = nalgebra::SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], std::f64::consts::PI.sqrt() * v * v)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite eigenvalues"));
    Ok(GaussHermite {
        nodes: pairs.iter().map(|p| p.0).collect(),
        weights: pairs.iter().map(|p| p.1).collect(),
    })
}

impl GaussHermite {
    /// Expectation of `f` under N(mean, sd^2).
    pub fn expect_gaussian<F: FnMut(f64) -> f64>(&self, mean: f64, sd: f64, mut f: F) -> f64 {
        let scale = std::f64::consts::SQRT_2 * sd;
        let mut sum = 0.0;
        for (x, w) in self.nodes.iter().zip(self.weights.iter()) {
            sum += w * f(mean + scale * x);
        }
        sum / std::f64::consts::PI.sqrt()
    }
}

// ---------------------------------------------------------------------------
// Belief grid
// ---------------------------------------------------------------------------

/// Discrete belief over the source location on a uniform node grid. Stored
/// in normalized log space; nodes the prior excludes stay at -inf forever.
#[derive(Debug, Clone)]
pub struct BeliefGrid {
    nx: usize,
    ny: usize,
    lo: [f64; 2],
    hi: [f64; 2],
    log_post: Vec<f64>,
}

impl BeliefGrid {
    /// Uniform belief over the unit square.
    pub fn uniform(nx: usize, ny: usize) -> Result<Self> {
        let n = nx * ny;
        Self::new(nx, ny, [0.0, 0.0], [1.0, 1.0], vec![-(n as f64).ln(); n])
    }

    pub fn new(nx: usize, ny: usize, lo: [f64; 2], hi: [f64; 2], log_weights: Vec<f64>) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(CoreError::InvalidParameter {
                name: "nx/ny",
                reason: format!("belief grid needs at least 2x2 nodes, got {nx}x{ny}"),
            });
        }
        if !(lo[0] < hi[0] && lo[1] < hi[1]) {
            return Err(CoreError::InvalidParameter {
                name: "lo/hi",
                reason: "belief domain corners must be ordered".into(),
            });
        }
        if log_weights.len() != nx * ny {
            return Err(CoreError::DimensionMismatch {
                context: "BeliefGrid::new",
                expected: format!("{} log weights", nx * ny),
                got: format!("{}", log_weights.len()),
            });
        }
        let mut grid = Self {
            nx,
            ny,
            lo,
            hi,
            log_post: log_weights,
        };
        grid.normalize()?;
        Ok(grid)
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Node coordinates of a flat index (row-major, x fastest).
    pub fn node(&self, idx: usize) -> (f64, f64) {
        let ix = idx % self.nx;
        let iy = idx / self.nx;
        (
            self.lo[0] + ix as f64 * (self.hi[0] - self.lo[0]) / (self.nx - 1) as f64,
            self.lo[1] + iy as f64 * (self.hi[1] - self.lo[1]) / (self.ny - 1) as f64,
        )
    }

    /// Spacing between neighboring nodes.
    pub fn cell(&self) -> (f64, f64) {
        (
            (self.hi[0] - self.lo[0]) / (self.nx - 1) as f64,
            (self.hi[1] - self.lo[1]) / (self.ny - 1) as f64,
        )
    }

    pub fn log_posterior(&self) -> &[f64] {
        &self.log_post
    }

    /// Posterior probabilities; exact zeros where the log weight is -inf.
    pub fn posterior(&self) -> Vec<f64> {
        self.log_post.iter().map(|l| l.exp()).collect()
    }

    /// Indices with any posterior mass.
    pub fn support(&self) -> Vec<usize> {
        self.log_post
            .iter()
            .enumerate()
            .filter(|(_, l)| l.exp() > 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    /// Pointwise Bayes update with per-node log likelihoods.
    pub fn update(&mut self, log_lik: &[f64]) -> Result<()> {
        if log_lik.len() != self.log_post.len() {
            return Err(CoreError::DimensionMismatch {
                context: "BeliefGrid::update",
                expected: format!("{} log likelihoods", self.log_post.len()),
                got: format!("{}", log_lik.len()),
            });
        }
        for (l, add) in self.log_post.iter_mut().zip(log_lik.iter()) {
            *l += add;
        }
        self.normalize()
    }

    /// Highest-posterior node, ties to the lowest flat index.
    pub fn map_node(&self) -> usize {
        let mut best = 0;
        let mut best_l = f64::NEG_INFINITY;
        for (i, &l) in self.log_post.iter().enumerate() {
            if l > best_l {
                best_l = l;
                best = i;
            }
        }
        best
    }

    fn normalize(&mut self) -> Result<()> {
        let max = self.log_post.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(CoreError::ZeroPosteriorMass);
        }
        let sum: f64 = self.log_post.iter().map(|l| (l - max).exp()).sum();
        let log_z = max + sum.ln();
        for l in self.log_post.iter_mut() {
            *l -= log_z;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Physical design scan
// ---------------------------------------------------------------------------

/// Log-marginal table resolution: step as a fraction of the noise standard
/// deviation, and padding past the extreme predictions in standard
/// deviations. The quadrature abscissas stay well inside the padded range.
const TABLE_STEP_FRACTION: f64 = 1.0 / 16.0;
const TABLE_PAD_SIGMAS: f64 = 8.0;

/// Scores of an exhaustive candidate scan.
#[derive(Debug, Clone)]
pub struct ScanResult {
    /// Index of the winning candidate (ties to the lowest index).
    pub best: usize,
    pub design: DVector<f64>,
    /// Information gain of every candidate, in candidate order.
    pub eig: Vec<f64>,
}

/// Row-major lattice of candidate designs over a box (x fastest).
pub fn design_lattice(bounds: &DesignBox, nx: usize, ny: usize) -> Result<Vec<DVector<f64>>> {
    if bounds.lo.len() != 2 {
        return Err(CoreError::InvalidParameter {
            name: "bounds",
            reason: "candidate lattice needs a 2-dimensional design box".into(),
        });
    }
    if nx < 2 || ny < 2 {
        return Err(CoreError::InvalidParameter {
            name: "nx/ny",
            reason: format!("candidate lattice needs at least 2x2 points, got {nx}x{ny}"),
        });
    }
    let mut out = Vec::with_capacity(nx * ny);
    for iy in 0..ny {
        let y = bounds.lo[1] + iy as f64 * (bounds.hi[1] - bounds.lo[1]) / (ny - 1) as f64;
        for ix in 0..nx {
            let x = bounds.lo[0] + ix as f64 * (bounds.hi[0] - bounds.lo[0]) / (nx - 1) as f64;
            out.push(DVector::from_row_slice(&[x, y]));
        }
    }
    Ok(out)
}

/// Expected information gain of each candidate design for a discrete belief
/// with Gaussian observation noise, maximized exhaustively.
///
/// For a candidate `d` with per-node predictions `u_m` and weights `p_m`,
///
/// ```text
/// EIG(d) = -1/2 log(2 pi e sigma^2) - sum_m p_m E_{y ~ N(u_m, sigma^2)}[log marg(y)],
/// ```
///
/// with `marg` the predictive mixture. The inner expectations run over a
/// shared dense table of the log marginal (linear interpolation, step
/// sigma/16), so the scan costs no field solves and no per-query mixture
/// sums. The interpolation bias is a few 1e-4 nats and nearly constant
/// across candidates, so scores carry that absolute error but the argmax
/// does not.
pub fn scan_physical_design(
    sols: &SolutionSet,
    probs: &[f64],
    noise_var: f64,
    candidates: &[DVector<f64>],
    gh: &GaussHermite,
) -> Result<ScanResult> {
    if sols.len() != probs.len() {
        return Err(CoreError::DimensionMismatch {
            context: "scan_physical_design",
            expected: format!("{} node probabilities", sols.len()),
            got: format!("{}", probs.len()),
        });
    }
    if candidates.is_empty() {
        return Err(CoreError::InvalidParameter {
            name: "candidates",
            reason: "no candidate designs to scan".into(),
        });
    }
    if !(noise_var > 0.0) {
        return Err(CoreError::InvalidParameter {
            name: "noise_var",
            reason: format!("noise variance {noise_var} must be positive"),
        });
    }
    let sigma = noise_var.sqrt();
    let half_log_norm = 0.5 * (2.0 * std::f64::consts::PI * noise_var).ln();
    let mut eig = Vec::with_capacity(candidates.len());
    let mut best = 0usize;
    let mut best_eig = f64::NEG_INFINITY;

    for (c, design) in candidates.iter().enumerate() {
        let preds = sols.measure_all(design)?;
        if preds.ncols() != 1 {
            return Err(CoreError::InvalidParameter {
                name: "sols",
                reason: format!("candidate scan needs scalar observations, got {}", preds.ncols()),
            });
        }
        // Active mixture components: probability-carrying nodes only.
        let active: Vec<(f64, f64)> = probs
            .iter()
            .zip(preds.column(0).iter())
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, u)| (p.ln(), *u))
            .collect();
        if active.is_empty() {
            return Err(CoreError::ZeroPosteriorMass);
        }
        let u_min = active.iter().map(|a| a.1).fold(f64::INFINITY, f64::min);
        let u_max = active.iter().map(|a| a.1).fold(f64::NEG_INFINITY, f64::max);

        // Dense table of log marg(y) over the padded prediction range.
        let y_lo = u_min - TABLE_PAD_SIGMAS * sigma;
        let y_hi = u_max + TABLE_PAD_SIGMAS * sigma;
        let step = sigma * TABLE_STEP_FRACTION;
        let n_table = ((y_hi - y_lo) / step).ceil() as usize + 2;
        let mut table = Vec::with_capacity(n_table);
        for t in 0..n_table {
            let y = y_lo + t as f64 * step;
            let mut max = f64::NEG_INFINITY;
            for (lp, u) in &active {
                let v = lp - (y - u) * (y - u) / (2.0 * noise_var);
                if v > max {
                    max = v;
                }
            }
            let mut sum = 0.0;
            for (lp, u) in &active {
                let v = lp - (y - u) * (y - u) / (2.0 * noise_var);
                if v - max > -745.0 {
                    sum += (v - max).exp();
                }
            }
            table.push(max + sum.ln() - half_log_norm);
        }
        let lookup = |y: f64| -> f64 {
            let pos = (y - y_lo) / step;
            let idx = (pos.floor() as usize).min(n_table - 2);
            let frac = pos - idx as f64;
            table[idx] * (1.0 - frac) + table[idx + 1] * frac
        };

        // Mixture entropy term via per-component quadrature on the table.
        let mut expected_log_marg = 0.0;
        for (lp, u) in &active {
            expected_log_marg += lp.exp() * gh.expect_gaussian(*u, sigma, lookup);
        }
        let value = -half_log_norm - 0.5 - expected_log_marg;
        eig.push(value);
        if value > best_eig {
            best_eig = value;
            best = c;
        }
    }
    Ok(ScanResult {
        best,
        design: candidates[best].clone(),
        eig,
    })
}

// ---------------------------------------------------------------------------
// Error-parameter training
// ---------------------------------------------------------------------------

/// Gradient ascent on the scalar-strength log likelihood. The prediction is
/// linear in the strength, `u = theta * b`, so the score is
/// `b (y - theta b) / noise_var`; with `lr = noise_var / b^2` one step is a
/// Newton step and lands exactly on the least-squares value.
pub fn train_strength(y: f64, b: f64, theta0: f64, noise_var: f64, steps: usize, lr: f64) -> f64 {
    let mut theta = theta0;
    for _ in 0..steps {
        theta += lr * b * (y - theta * b) / noise_var;
    }
    theta
}

/// Gradient ascent on the correction-weight log likelihood at a fixed
/// design. The solver is linear in the source, so the exact sensitivity of
/// the prediction to weight `k` is the marched derivative field of the
/// network output; those 37 marches (plus one solve for the base
/// prediction) are repaid every `relinearize_every` steps, or once when it
/// is zero. Between relinearizations the prediction is affine in the
/// weights and each step is an exact gradient step on that local model.
#[allow(clippy::too_many_arguments)]
pub fn train_correction_weights(
    model: &PdeModel,
    theta0: &DVector<f64>,
    design: &DVector<f64>,
    time: f64,
    y: f64,
    noise_var: f64,
    steps: usize,
    lr: f64,
    relinearize_every: usize,
    counter: &EvalCounter,
) -> Result<DVector<f64>> {
    let dim = theta0.len();
    let mut w = theta0.clone();
    let mut done = 0;
    while done < steps {
        let round = if relinearize_every == 0 {
            steps - done
        } else {
            relinearize_every.min(steps - done)
        };
        let u0 = model.solve_snapshots(&w, &[time], counter)?[0].interpolate(design[0], design[1])?;
        let wfields = model.correction_weight_fields(&w)?;
        let mut b = DVector::zeros(dim);
        for (k, field) in wfields.iter().enumerate() {
            b[k] = model.march_source_field(field, &[time], counter)?[0]
                .interpolate(design[0], design[1])?;
        }
        let w_ref = w.clone();
        for _ in 0..round {
            let resid = y - (u0 + b.dot(&(&w - &w_ref)));
            w += lr * &b * (resid / noise_var);
        }
        done += round;
        if relinearize_every == 0 {
            break;
        }
    }
    Ok(w)
}

// ---------------------------------------------------------------------------
// Sequential runner
// ---------------------------------------------------------------------------

/// Which family the (wrong) forward model belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorModelKind {
    /// Right source shape, unknown strength (scalar error parameter).
    Parametric,
    /// Wrong source shape plus a trainable pointwise correction network.
    Structural,
}

/// Everything a sequential run needs beyond its initial state.
#[derive(Debug, Clone)]
pub struct SeqConfig {
    pub pde: PdeConfig,
    pub kind: ErrorModelKind,
    /// The true system's source (always the Gaussian shape).
    pub true_source: SourceParams,
    /// Source width the model assumes.
    pub model_width: f64,
    /// Source strength the structural model assumes (the parametric model
    /// treats strength as the error parameter instead).
    pub model_strength: f64,
    pub belief_nx: usize,
    pub belief_ny: usize,
    /// Admissible sensor locations, shared by both tracks.
    pub design_box: DesignBox,
    pub candidate_nx: usize,
    pub candidate_ny: usize,
    pub noise_var: f64,
    pub n_outer: usize,
    pub n_inner: usize,
    pub grouping: GroupingConfig,
    /// Spread of the per-stage error prior around the current value.
    pub sigma_e: f64,
    pub ascent_steps: usize,
    pub ascent_step: f64,
    pub train_steps: usize,
    pub train_step: f64,
    pub relinearize_every: usize,
    pub gh_order: usize,
    pub threads: usize,
}

impl SeqConfig {
    /// Defaults for the given model family; the caller supplies the truth.
    pub fn defaults(kind: ErrorModelKind, true_source: SourceParams) -> Result<Self> {
        let design_box = DesignBox::new(
            DVector::from_row_slice(&[0.0, 0.0]),
            DVector::from_row_slice(&[1.0, 1.0]),
        )?;
        Ok(Self {
            pde: PdeConfig::default(),
            kind,
            true_source,
            model_width: true_source.width,
            model_strength: true_source.strength,
            belief_nx: 50,
            belief_ny: 50,
            design_box,
            candidate_nx: 10,
            candidate_ny: 10,
            noise_var: 0.0025,
            n_outer: 180,
            n_inner: 180,
            grouping: GroupingConfig::default(),
            sigma_e: match kind {
                ErrorModelKind::Parametric => 0.5,
                ErrorModelKind::Structural => 0.1,
            },
            ascent_steps: 10,
            ascent_step: 0.02,
            train_steps: 200,
            train_step: match kind {
                ErrorModelKind::Parametric => 0.05,
                ErrorModelKind::Structural => 0.05,
            },
            relinearize_every: 50,
            gh_order: 15,
            threads: 1,
        })
    }

    fn validate(&self) -> Result<()> {
        self.pde.validate()?;
        if self.n_outer == 0 || self.n_inner == 0 {
            return Err(CoreError::InvalidParameter {
                name: "n_outer/n_inner",
                reason: "sample counts must be positive".into(),
            });
        }
        if !(self.noise_var > 0.0) {
            return Err(CoreError::InvalidParameter {
                name: "noise_var",
                reason: format!("noise variance {} must be positive", self.noise_var),
            });
        }
        if !(self.sigma_e > 0.0) {
            return Err(CoreError::InvalidParameter {
                name: "sigma_e",
                reason: format!("error prior spread {} must be positive", self.sigma_e),
            });
        }
        Ok(())
    }
}

/// One past observation of the true system.
#[derive(Debug, Clone, Serialize)]
pub struct StageObservation {
    pub design: Vec<f64>,
    pub y: f64,
    pub time: f64,
}

/// Mutable state carried between stages.
#[derive(Debug, Clone)]
pub struct SeqState {
    /// Completed stages.
    pub stage: usize,
    pub belief: BeliefGrid,
    /// The belief the run started from; the refit always restarts here.
    pub original_log_prior: Vec<f64>,
    pub theta_e: DVector<f64>,
    pub history: Vec<StageObservation>,
}

impl SeqState {
    pub fn new(belief: BeliefGrid, theta_e: DVector<f64>) -> Self {
        Self {
            stage: 0,
            original_log_prior: belief.log_posterior().to_vec(),
            belief,
            theta_e,
            history: Vec::new(),
        }
    }
}

/// Field-solve ledger of one stage, each entry read back from the shared
/// counter around its block.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct StageCost {
    /// Belief-node solves backing the candidate scan and pointwise update.
    pub physical_scan: u64,
    /// True-system solves.
    pub observation: u64,
    /// Outer + inner + proposal solves of the error-design pipeline.
    pub error_design: u64,
    /// Solves spent training the error parameter.
    pub error_update: u64,
    /// Per-node history re-solves.
    pub refit: u64,
}

impl StageCost {
    pub fn total(&self) -> u64 {
        self.physical_scan + self.observation + self.error_design + self.error_update + self.refit
    }
}

/// Everything a stage decided and observed.
#[derive(Debug, Clone, Serialize)]
pub struct StageReport {
    pub stage: usize,
    pub time: f64,
    pub d_g: Vec<f64>,
    pub y_g: f64,
    /// Highest-posterior source location after the pointwise update (the
    /// value the error track conditioned on).
    pub map_g: Vec<f64>,
    pub d_e: Vec<f64>,
    pub y_e: f64,
    pub theta_e: Vec<f64>,
    /// Relative L2 error of the corrected model field at the refit MAP
    /// against the true field, at this stage's time.
    pub field_rel_err: f64,
    pub fraction_problematic: f64,
    pub n_groups: usize,
    pub mean_realized_ess: f64,
    pub cost: StageCost,
}

/// Drives stages against a fixed configuration. Each stage is a pure
/// function of the state and the supplied random stream.
pub struct SeqRunner {
    config: SeqConfig,
    gh: GaussHermite,
}

impl SeqRunner {
    pub fn new(config: SeqConfig) -> Result<Self> {
        config.validate()?;
        let gh = gauss_hermite(config.gh_order)?;
        Ok(Self { config, gh })
    }

    pub fn config(&self) -> &SeqConfig {
        &self.config
    }

    /// Fresh state: uniform belief, error parameter at the model's initial
    /// value.
    pub fn initial_state(&self, theta_e: DVector<f64>) -> Result<SeqState> {
        let expected = match self.config.kind {
            ErrorModelKind::Parametric => 1,
            ErrorModelKind::Structural => UnknownParams::CorrectionWeights.dim(),
        };
        if theta_e.len() != expected {
            return Err(CoreError::DimensionMismatch {
                context: "SeqRunner::initial_state",
                expected: format!("error parameter of length {expected}"),
                got: format!("{}", theta_e.len()),
            });
        }
        let belief = BeliefGrid::uniform(self.config.belief_nx, self.config.belief_ny)?;
        Ok(SeqState::new(belief, theta_e))
    }

    /// The model family with the source location unknown, conditioned on an
    /// error-parameter value.
    pub fn physical_model(&self, theta_e: &DVector<f64>) -> Result<PdeModel> {
        let c = &self.config;
        let (kind, strength, correction) = match c.kind {
            ErrorModelKind::Parametric => (SourceKind::Gaussian, theta_e[0], None),
            ErrorModelKind::Structural => (
                SourceKind::Rational,
                c.model_strength,
                Some(MlpCorrection::new(theta_e.clone())?),
            ),
        };
        PdeModel::new(
            c.pde.clone(),
            SourceSpec {
                kind,
                params: SourceParams {
                    x: 0.0,
                    y: 0.0,
                    width: c.model_width,
                    strength,
                },
            },
            correction,
            UnknownParams::SourceLocation,
        )
    }

    /// The model family with the error parameter unknown, conditioned on a
    /// source location.
    pub fn error_model(&self, theta_g: &[f64; 2]) -> Result<PdeModel> {
        let c = &self.config;
        let params = SourceParams {
            x: theta_g[0],
            y: theta_g[1],
            width: c.model_width,
            strength: c.model_strength,
        };
        match c.kind {
            ErrorModelKind::Parametric => PdeModel::new(
                c.pde.clone(),
                SourceSpec {
                    kind: SourceKind::Gaussian,
                    params,
                },
                None,
                UnknownParams::SourceStrength,
            ),
            ErrorModelKind::Structural => PdeModel::new(
                c.pde.clone(),
                SourceSpec {
                    kind: SourceKind::Rational,
                    params,
                },
                Some(MlpCorrection::zeros()),
                UnknownParams::CorrectionWeights,
            ),
        }
    }

    /// The true system (Gaussian source at the configured truth).
    pub fn true_model(&self) -> Result<PdeModel> {
        PdeModel::new(
            self.config.pde.clone(),
            SourceSpec {
                kind: SourceKind::Gaussian,
                params: self.config.true_source,
            },
            None,
            UnknownParams::SourceLocation,
        )
    }

    /// Run one full stage: physical design + observation + belief update,
    /// error design + observation + training, history refit. Deterministic
    /// in (state, stream).
    pub fn run_stage(
        &self,
        state: &mut SeqState,
        stream: &RngStream,
        counter: &EvalCounter,
    ) -> Result<StageReport> {
        let c = &self.config;
        let stage = state.stage + 1;
        let t = stage_time(stage);
        let sigma = c.noise_var.sqrt();
        let start = counter.count();
        let mut cost = StageCost::default();

        // Physical track: one field per supported belief node, shared by the
        // candidate scan and the pointwise update.
        let support = state.belief.support();
        if support.is_empty() {
            return Err(CoreError::ZeroPosteriorMass);
        }
        let mut locs = DMatrix::zeros(support.len(), 2);
        for (r, &m) in support.iter().enumerate() {
            let (x, y) = state.belief.node(m);
            locs[(r, 0)] = x;
            locs[(r, 1)] = y;
        }
        let phys = self.physical_model(&state.theta_e)?;
        let node_sols = solve_batch(&phys, &locs, t, counter, c.threads)?;
        cost.physical_scan = counter.count() - start;

        let posterior = state.belief.posterior();
        let probs: Vec<f64> = support.iter().map(|&m| posterior[m]).collect();
        let candidates = design_lattice(&c.design_box, c.candidate_nx, c.candidate_ny)?;
        let scan = scan_physical_design(&node_sols, &probs, c.noise_var, &candidates, &self.gh)?;
        let d_g = scan.design.clone();

        // Observe the true system once at this stage's time; the same field
        // serves both tracks' measurements.
        let mark = counter.count();
        let true_model = self.true_model()?;
        let theta_true = DVector::from_row_slice(&[c.true_source.x, c.true_source.y]);
        let true_field = true_model
            .solve_snapshots(&theta_true, &[t], counter)?
            .pop()
            .expect("one snapshot requested");
        let y_g = true_field.interpolate(d_g[0], d_g[1])?
            + sigma * stream.substream(10).standard_normals(1)[0];
        cost.observation = counter.count() - mark;

        // Pointwise Bayes update on the grid; excluded nodes stay excluded.
        let preds_g = node_sols.measure_all(&d_g)?;
        let mut log_lik = vec![0.0; state.belief.len()];
        for (r, &m) in support.iter().enumerate() {
            let resid = y_g - preds_g[(r, 0)];
            log_lik[m] = -resid * resid / (2.0 * c.noise_var);
        }
        state.belief.update(&log_lik)?;
        let map_idx = state.belief.map_node();
        let (map_x, map_y) = state.belief.node(map_idx);
        state.history.push(StageObservation {
            design: vec![d_g[0], d_g[1]],
            y: y_g,
            time: t,
        });

        // Error track: pooled-proposal gradient pipeline under a prior
        // centered at the current error value.
        let mark = counter.count();
        let em = self.error_model(&[map_x, map_y])?;
        let prior = Gaussian::isotropic(state.theta_e.clone(), c.sigma_e * c.sigma_e)?;
        let prep = prepare_outer(
            &em,
            &prior,
            c.n_outer,
            t,
            c.noise_var,
            &stream.substream(12),
            counter,
            c.threads,
        )?;
        let weights = PoolingWeights::uniform(c.n_outer)?;
        let prior_ens = sample_gaussian(&prior, c.n_inner, &stream.substream(13))?;
        let inner_sols = solve_batch(&em, &prior_ens.members, t, counter, c.threads)?;

        let d0 = 0.5 * (&c.design_box.lo + &c.design_box.hi);
        let inner_preds = inner_sols.measure_all(&d0)?;
        let stats = EkiStats::from_parts(&prior_ens.members, &inner_preds)?;
        let mut evaluated = prior_ens.clone();
        evaluated.predictions = Some(inner_preds);

        let outer0 = prep.outer_set_at(&d0)?;
        let pooled0 = make_pooled(&outer0, &weights)?;
        let grouping = make_grouping(
            &outer0,
            &weights,
            &pooled0,
            &stats.pred_cov,
            c.n_inner,
            em.param_dim(),
            &c.grouping,
        )?;
        let mut pset = build_proposals(
            &prep,
            &d0,
            &grouping,
            &weights,
            &evaluated,
            &stats,
            true,
            &stream.substream(14),
        )?;
        let mut design_state = DesignState::new(d0);
        let mut mean_realized_ess = 0.0;
        for _ in 0..c.ascent_steps.max(1) {
            let est = eig_gradient(&em, &prep, &mut pset, &design_state.design, counter, c.threads)?;
            mean_realized_ess =
                est.realized_ess.iter().sum::<f64>() / est.realized_ess.len() as f64;
            design_state.ascend(&est.gradient, c.ascent_step, &c.design_box);
        }
        let d_e = design_state.design.clone();
        cost.error_design = counter.count() - mark;

        // Observe for the error parameter (same true field, new location and
        // noise draw) and train.
        let y_e = true_field.interpolate(d_e[0], d_e[1])?
            + sigma * stream.substream(11).standard_normals(1)[0];
        let mark = counter.count();
        let new_theta_e = match c.kind {
            ErrorModelKind::Parametric => {
                // Strength sensitivity at the chosen design: the prediction
                // of a unit-strength solve.
                let b_sol = em.solve(&DVector::from_element(1, 1.0), t, counter)?;
                let b = b_sol.measure(&d_e)?[0];
                DVector::from_element(
                    1,
                    train_strength(y_e, b, state.theta_e[0], c.noise_var, c.train_steps, c.train_step),
                )
            }
            ErrorModelKind::Structural => train_correction_weights(
                &em,
                &state.theta_e,
                &d_e,
                t,
                y_e,
                c.noise_var,
                c.train_steps,
                c.train_step,
                c.relinearize_every,
                counter,
            )?,
        };
        cost.error_update = counter.count() - mark;

        // Refit the belief from its original prior against the whole
        // history under the updated error parameter. One multi-snapshot
        // march per node with original support; only the current best
        // node's final field is kept, for the report.
        let mark = counter.count();
        let phys_new = self.physical_model(&new_theta_e)?;
        let times: Vec<f64> = state.history.iter().map(|h| h.time).collect();
        let mut new_log = state.original_log_prior.clone();
        let mut best: Option<(f64, usize, Field)> = None;
        for m in 0..state.belief.len() {
            if new_log[m] == f64::NEG_INFINITY {
                continue;
            }
            let (x, y) = state.belief.node(m);
            let node = DVector::from_row_slice(&[x, y]);
            let fields = phys_new.solve_snapshots(&node, &times, counter)?;
            for (field, h) in fields.iter().zip(state.history.iter()) {
                let resid = h.y - field.interpolate(h.design[0], h.design[1])?;
                new_log[m] += -resid * resid / (2.0 * c.noise_var);
            }
            let better = match &best {
                None => true,
                Some((l, _, _)) => new_log[m] > *l,
            };
            if better {
                best = Some((
                    new_log[m],
                    m,
                    fields.into_iter().next_back().expect("one field per time"),
                ));
            }
        }
        let (_, refit_map, map_field) = best.ok_or(CoreError::ZeroPosteriorMass)?;
        state.belief = BeliefGrid::new(
            state.belief.nx(),
            state.belief.ny(),
            [state.belief.lo[0], state.belief.lo[1]],
            [state.belief.hi[0], state.belief.hi[1]],
            new_log,
        )?;
        debug_assert_eq!(state.belief.map_node(), refit_map);
        cost.refit = counter.count() - mark;

        let field_rel_err = map_field.relative_l2_error(&true_field)?;
        state.theta_e = new_theta_e;
        state.stage = stage;

        let report = StageReport {
            stage,
            time: t,
            d_g: vec![d_g[0], d_g[1]],
            y_g,
            map_g: vec![map_x, map_y],
            d_e: vec![d_e[0], d_e[1]],
            y_e,
            theta_e: state.theta_e.iter().cloned().collect(),
            field_rel_err,
            fraction_problematic: grouping.report.fraction_problematic,
            n_groups: grouping.groups.len(),
            mean_realized_ess,
            cost,
        };
        debug_assert_eq!(report.cost.total(), counter.count() - start);
        Ok(report)
    }
}
