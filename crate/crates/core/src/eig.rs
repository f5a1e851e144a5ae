//! Score-based Monte Carlo estimation of the expected-information-gain
//! design gradient, with grouped importance-sampled posteriors.
//!
//! With observations reparameterized through the noise draw,
//! `y(theta, eps, d) = f(theta, d) + eps`, the gradient of the expected
//! information gain is a single nested score expectation:
//!
//! ```text
//! grad I(d) = E_{theta, eps} E_{theta' | y} [
//!     (J_d f(theta, d) - J_d f(theta', d))' (y - f(theta', d)) / sigma^2
//! ],
//! ```
//!
//! the total design derivative of `-log p(y(d) | d)`; the complementary
//! `log p(y(d) | theta, d)` term is constant in `d` because its residual is
//! exactly `eps`. Holding `y` fixed instead would zero out both halves in
//! expectation by the score identity, so the outer Jacobian genuinely has to
//! ride along with the design.
//!
//! The outer expectation is a prior Monte Carlo sum over N synthetic
//! campaigns; the inner posterior expectation is replaced by self-normalized
//! importance sampling against a small family of proposals, each an ensemble
//! Kalman update of one shared prior ensemble toward a pooled observation.
//! Which observations share which proposal is decided by the conservative
//! effective-sample-size screen in [`crate::importance`].
//!
//! Everything expensive is a field solve, and fields do not depend on the
//! design (the design only picks the interpolation point), so the module is
//! built around reuse: outer fields are solved once per campaign, proposal
//! fields once per proposal, and every later design visited by an ascent
//! re-measures the same fields for free. A [`ProposalSet`] is frozen at the
//! design where it was built: its pooled targets, its update, and the
//! denominator half of every importance weight stay fixed while the
//! numerator follows the current design.

use nalgebra::{DMatrix, DVector};

use crate::eki::{update_per_group, EkiStats};
use crate::forward::{solve_batch, EvalCounter, ForwardModel, SolutionSet};
use crate::importance::{
    make_grouping, normalize_logweights, pooled_denominator_quadratics, snis_logweights, Grouping,
    GroupingConfig,
};
use crate::pooling::{make_pooled, OuterSet, PooledObservation, PoolingWeights};
use crate::stats::{sample_gaussian, Ensemble, Gaussian, RngStream};
use crate::{CoreError, Result};

/// Axis-aligned admissible design region.
#[derive(Debug, Clone)]
pub struct DesignBox {
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
}

impl DesignBox {
    pub fn new(lo: DVector<f64>, hi: DVector<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(CoreError::DimensionMismatch {
                context: "DesignBox::new",
                expected: format!("{} bounds", lo.len()),
                got: format!("{}", hi.len()),
            });
        }
        if lo.iter().zip(hi.iter()).any(|(l, h)| !(l < h)) {
            return Err(CoreError::InvalidParameter {
                name: "lo/hi",
                reason: "every lower bound must be strictly below its upper bound".into(),
            });
        }
        Ok(Self { lo, hi })
    }

    pub fn clip(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(x.len(), |i, _| x[i].max(self.lo[i]).min(self.hi[i]))
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(self.hi.iter()))
            .all(|(v, (l, h))| v >= l && v <= h)
    }
}

/// Expected information gain of a linear-Gaussian observation
/// `y = A theta + eps` in closed form: `0.5 logdet(A C0 A' + S) - 0.5 logdet S`.
/// The finite-difference oracle for the sampled gradient differentiates this
/// through a design-dependent `A(d)`.
pub fn eig_value_gaussian_linear(
    prior: &Gaussian,
    a: &DMatrix<f64>,
    noise_cov: &DMatrix<f64>,
) -> Result<f64> {
    if a.ncols() != prior.dim() || noise_cov.nrows() != a.nrows() {
        return Err(CoreError::DimensionMismatch {
            context: "eig_value_gaussian_linear",
            expected: format!("A with {} columns and matching noise", prior.dim()),
            got: format!("A {}x{}, noise {}x{}", a.nrows(), a.ncols(), noise_cov.nrows(), noise_cov.ncols()),
        });
    }
    let marginal = a * prior.cov() * a.transpose() + noise_cov;
    Ok(0.5 * crate::linalg::logdet_spd(&marginal, "eig_value_gaussian_linear")?
        - 0.5 * crate::linalg::logdet_spd(noise_cov, "eig_value_gaussian_linear")?)
}

/// A design iterate and the path that led to it.
#[derive(Debug, Clone)]
pub struct DesignState {
    pub design: DVector<f64>,
    pub trajectory: Vec<DVector<f64>>,
}

impl DesignState {
    pub fn new(design: DVector<f64>) -> Self {
        Self {
            trajectory: vec![design.clone()],
            design,
        }
    }

    /// One projected gradient-ascent step.
    pub fn ascend(&mut self, gradient: &DVector<f64>, step: f64, bounds: &DesignBox) {
        self.design = bounds.clip(&(&self.design + step * gradient));
        self.trajectory.push(self.design.clone());
    }
}

/// Synthetic outer campaigns with their solved fields: parameters drawn from
/// the prior, fixed noise draws, and one solution per campaign. Observations
/// at any design are re-derived from the cached fields; the N solves happen
/// once, in [`prepare_outer`].
pub struct PreparedOuter {
    /// N x d_theta prior draws.
    pub thetas: DMatrix<f64>,
    /// N x d_y noise draws (already scaled by sigma).
    pub eps: DMatrix<f64>,
    pub solutions: SolutionSet,
    pub time: f64,
    pub noise_var: f64,
    obs_dim: usize,
}

/// Draw N outer campaigns and solve them. Parameters come from
/// `stream.substream(0)`, noise from `stream.substream(1)`; exactly N counted
/// solves.
pub fn prepare_outer(
    model: &dyn ForwardModel,
    prior: &Gaussian,
    n: usize,
    time: f64,
    noise_var: f64,
    stream: &RngStream,
    counter: &EvalCounter,
    threads: usize,
) -> Result<PreparedOuter> {
    if prior.dim() != model.param_dim() {
        return Err(CoreError::DimensionMismatch {
            context: "prepare_outer",
            expected: format!("prior of dimension {}", model.param_dim()),
            got: format!("{}", prior.dim()),
        });
    }
    if !(noise_var > 0.0) {
        return Err(CoreError::InvalidParameter {
            name: "noise_var",
            reason: format!("noise variance {noise_var} must be positive"),
        });
    }
    let thetas = sample_gaussian(prior, n, &stream.substream(0))?.members;
    let d_y = model.obs_dim();
    let z = stream.substream(1).standard_normals(n * d_y);
    let sigma = noise_var.sqrt();
    let eps = DMatrix::from_fn(n, d_y, |i, c| sigma * z[i * d_y + c]);
    let solutions = solve_batch(model, &thetas, time, counter, threads)?;
    Ok(PreparedOuter {
        thetas,
        eps,
        solutions,
        time,
        noise_var,
        obs_dim: d_y,
    })
}

impl PreparedOuter {
    pub fn len(&self) -> usize {
        self.thetas.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.thetas.nrows() == 0
    }

    /// Synthetic observations at a design: cached field measurement plus the
    /// fixed noise draw. No solves.
    pub fn observations_at(&self, design: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
        let preds = self.solutions.measure_all(design)?;
        Ok((0..self.len())
            .map(|i| preds.row(i).transpose() + self.eps.row(i).transpose())
            .collect())
    }

    /// The campaigns packaged for pooling, observed at a design.
    pub fn outer_set_at(&self, design: &DVector<f64>) -> Result<OuterSet> {
        let ys = self.observations_at(design)?;
        let noise = DMatrix::identity(self.obs_dim, self.obs_dim) * self.noise_var;
        OuterSet::new(
            ys,
            (0..self.len()).map(|i| self.thetas.row(i).transpose()).collect(),
            vec![noise; self.len()],
        )
    }
}

/// One frozen proposal: the outer observations it serves, its pooled target,
/// the updated ensemble, and (once solved) its fields and cached denominator
/// quadratics.
pub struct Proposal {
    pub indices: Vec<usize>,
    pub pooled: PooledObservation,
    pub ensemble: Ensemble,
    solutions: Option<SolutionSet>,
    denom_quad: Option<DVector<f64>>,
}

impl Proposal {
    pub fn is_solved(&self) -> bool {
        self.solutions.is_some()
    }
}

/// The proposal family frozen at one design.
pub struct ProposalSet {
    pub proposals: Vec<Proposal>,
    pub grouping: Grouping,
    pub freeze_design: DVector<f64>,
}

/// Build the proposal family for a grouping: the well-served set (if any)
/// shares one pooled proposal, and each problematic cluster gets its own,
/// all updated from one shared prior ensemble whose statistics were taken at
/// `design`. Proposal `k` perturbs with `stream.substream(k)`. No solves.
pub fn build_proposals(
    prep: &PreparedOuter,
    design: &DVector<f64>,
    grouping: &Grouping,
    weights: &PoolingWeights,
    prior_ensemble: &Ensemble,
    stats: &EkiStats,
    perturb: bool,
    stream: &RngStream,
) -> Result<ProposalSet> {
    if weights.len() != prep.len() {
        return Err(CoreError::DimensionMismatch {
            context: "build_proposals",
            expected: format!("{} tempering weights", prep.len()),
            got: format!("{}", weights.len()),
        });
    }
    let outer = prep.outer_set_at(design)?;
    let mut index_sets: Vec<Vec<usize>> = Vec::new();
    if !grouping.ok.is_empty() {
        index_sets.push(grouping.ok.clone());
    }
    for g in &grouping.groups {
        index_sets.push(g.clone());
    }
    if index_sets.is_empty() {
        return Err(CoreError::EmptyGroup {
            context: "build_proposals",
        });
    }

    let mut targets = Vec::with_capacity(index_sets.len());
    for indices in &index_sets {
        let sub_outer = outer.subset(indices)?;
        let sub_weights = weights.renormalized_subset(indices)?;
        targets.push(make_pooled(&sub_outer, &sub_weights)?);
    }
    let ensembles = update_per_group(prior_ensemble, stats, &targets, perturb, stream)?;

    let proposals = index_sets
        .into_iter()
        .zip(targets)
        .zip(ensembles)
        .map(|((indices, pooled), ensemble)| Proposal {
            indices,
            pooled,
            ensemble,
            solutions: None,
            denom_quad: None,
        })
        .collect();
    Ok(ProposalSet {
        proposals,
        grouping: grouping.clone(),
        freeze_design: design.clone(),
    })
}

/// Pay for any proposal fields not solved yet and cache the frozen
/// denominator quadratics. J counted solves per unsolved proposal; a no-op
/// afterwards.
pub fn ensure_proposals_solved(
    model: &dyn ForwardModel,
    pset: &mut ProposalSet,
    time: f64,
    counter: &EvalCounter,
    threads: usize,
) -> Result<()> {
    for p in pset.proposals.iter_mut() {
        if p.solutions.is_none() {
            let sols = solve_batch(model, &p.ensemble.members, time, counter, threads)?;
            let preds = sols.measure_all(&pset.freeze_design)?;
            p.denom_quad = Some(pooled_denominator_quadratics(&preds, &p.pooled)?);
            p.solutions = Some(sols);
        }
    }
    Ok(())
}

/// One gradient estimate with everything needed for error bars and cost
/// accounting.
#[derive(Debug, Clone)]
pub struct GradEstimate {
    pub gradient: DVector<f64>,
    /// Per-campaign contributions; `gradient` is their mean in index order.
    pub contributions: Vec<DVector<f64>>,
    /// Realized ESS of each campaign's importance weights.
    pub realized_ess: Vec<f64>,
    /// Counted solves paid inside the producing call.
    pub forward_cost: u64,
}

impl GradEstimate {
    /// Monte Carlo standard error of each gradient component over the N
    /// campaign contributions.
    pub fn standard_error(&self) -> DVector<f64> {
        let n = self.contributions.len();
        let d = self.gradient.len();
        let mut var = DVector::zeros(d);
        for c in &self.contributions {
            let delta = c - &self.gradient;
            var += delta.component_mul(&delta);
        }
        var /= (n - 1).max(1) as f64;
        var.map(|v| (v / n as f64).sqrt())
    }
}

/// Estimate the design gradient of the expected information gain at
/// `design`, reusing every cached field. The first call on a fresh
/// [`ProposalSet`] pays its proposal solves; later calls at any design cost
/// nothing.
pub fn eig_gradient(
    model: &dyn ForwardModel,
    prep: &PreparedOuter,
    pset: &mut ProposalSet,
    design: &DVector<f64>,
    counter: &EvalCounter,
    threads: usize,
) -> Result<GradEstimate> {
    let before = counter.count();
    ensure_proposals_solved(model, pset, prep.time, counter, threads)?;
    let n = prep.len();
    let ys = prep.observations_at(design)?;
    let inv_var = 1.0 / prep.noise_var;
    let d_d = design.len();
    let mut contributions: Vec<Option<DVector<f64>>> = vec![None; n];
    let mut realized = vec![0.0; n];

    // Per proposal: current-design predictions and Jacobians of its frozen
    // members, importance-weighted against each campaign it serves. Campaign
    // i contributes sum_j w_ij (J_i - J'_j)' (y_i - f'_j) / sigma^2.
    for p in &pset.proposals {
        let sols = p.solutions.as_ref().expect("proposals solved above");
        let denom = p.denom_quad.as_ref().expect("denominator cached with solutions");
        let preds = sols.measure_all(design)?;
        let j = preds.nrows();
        let mut jacs = Vec::with_capacity(j);
        for r in 0..j {
            jacs.push(sols.get(r).design_jacobian(design)?);
        }
        let noise = DMatrix::identity(ys[0].len(), ys[0].len()) * prep.noise_var;
        for &i in &p.indices {
            let logw = snis_logweights(&preds, &ys[i], &noise, denom)?;
            let wv = normalize_logweights(logw).map_err(|e| match e {
                CoreError::AllWeightsUnderflow { .. } => CoreError::AllWeightsUnderflow {
                    context: format!("outer campaign {i}"),
                },
                other => other,
            })?;
            let jac_outer = prep.solutions.get(i).design_jacobian(design)?;
            let mut mean_resid = DVector::zeros(ys[i].len());
            let mut inner = DVector::zeros(d_d);
            for r in 0..j {
                let resid = &ys[i] - preds.row(r).transpose();
                inner += wv.w[r] * (jacs[r].transpose() * &resid * inv_var);
                mean_resid += wv.w[r] * resid;
            }
            realized[i] = wv.realized_ess();
            contributions[i] = Some(jac_outer.transpose() * mean_resid * inv_var - inner);
        }
    }

    let mut gradient = DVector::zeros(d_d);
    let mut out = Vec::with_capacity(n);
    for (i, c) in contributions.into_iter().enumerate() {
        let c = c.ok_or(CoreError::InvalidParameter {
            name: "grouping",
            reason: format!("campaign {i} not covered by any proposal"),
        })?;
        gradient += &c;
        out.push(c);
    }
    gradient /= n as f64;
    Ok(GradEstimate {
        gradient,
        contributions: out,
        realized_ess: realized,
        forward_cost: counter.count() - before,
    })
}

/// How [`estimate_grad_std`] decides the grouping.
pub enum GroupingMode<'a> {
    /// Single global proposal regardless of ESS.
    Trivial,
    /// Run the conservative screen with this configuration.
    Auto(&'a GroupingConfig),
    /// Use exactly this grouping.
    Fixed(&'a Grouping),
}

/// What [`estimate_grad_std`] redraws between repeats.
pub enum ReseedPolicy<'a> {
    /// Keep the supplied inner ensemble; redraw only the proposal
    /// perturbations. Cheapest, and isolates the update noise.
    Perturbations,
    /// Redraw the inner ensemble from this prior every repeat, so each
    /// estimate is an independent replicate of the full inner sampling.
    FreshEnsembles(&'a Gaussian),
}

/// Spread of repeated gradient estimates at one design.
#[derive(Debug, Clone)]
pub struct GradStdStudy {
    pub estimates: Vec<DVector<f64>>,
    pub mean: DVector<f64>,
    /// Per-component standard deviation across repeats.
    pub component_std: DVector<f64>,
    pub mean_realized_ess: f64,
    pub forward_cost: u64,
    pub grouping: Grouping,
}

/// Repeat the inner sampling `repeats` times at a fixed design with fixed
/// outer campaigns and report the spread of the gradient estimates. The
/// supplied ensemble is solved once (J counted solves) and screens the
/// grouping; what varies between repeats is the policy's choice: repeat `r`
/// perturbs with `stream.substream(r)` and, under
/// [`ReseedPolicy::FreshEnsembles`], replaces the inner ensemble with a draw
/// from `stream.substream(1000 + r)` at J more solves. Every repeat also pays
/// its proposal solves.
#[allow(clippy::too_many_arguments)]
pub fn estimate_grad_std(
    model: &dyn ForwardModel,
    prep: &PreparedOuter,
    design: &DVector<f64>,
    weights: &PoolingWeights,
    prior_ensemble: &Ensemble,
    mode: GroupingMode,
    policy: ReseedPolicy,
    repeats: usize,
    stream: &RngStream,
    counter: &EvalCounter,
    threads: usize,
) -> Result<GradStdStudy> {
    if repeats < 5 {
        return Err(CoreError::InvalidParameter {
            name: "repeats",
            reason: format!("a spread estimate needs at least 5 repeats, got {repeats}"),
        });
    }
    let before = counter.count();
    let inner_sols = solve_batch(model, &prior_ensemble.members, prep.time, counter, threads)?;
    let inner_preds = inner_sols.measure_all(design)?;
    let stats = EkiStats::from_parts(&prior_ensemble.members, &inner_preds)?;
    let mut evaluated = prior_ensemble.clone();
    evaluated.predictions = Some(inner_preds);

    let grouping = match mode {
        GroupingMode::Trivial => Grouping::trivial(prep.len()),
        GroupingMode::Auto(config) => {
            let outer = prep.outer_set_at(design)?;
            let pooled = make_pooled(&outer, weights)?;
            make_grouping(
                &outer,
                weights,
                &pooled,
                &stats.pred_cov,
                prior_ensemble.size(),
                model.param_dim(),
                config,
            )?
        }
        GroupingMode::Fixed(g) => g.clone(),
    };

    let mut estimates = Vec::with_capacity(repeats);
    let mut ess_sum = 0.0;
    let mut ess_count = 0usize;
    for r in 0..repeats {
        let sub = stream.substream(r as u64);
        let (ens_r, stats_r) = match policy {
            ReseedPolicy::Perturbations => (None, None),
            ReseedPolicy::FreshEnsembles(prior) => {
                let fresh = sample_gaussian(prior, prior_ensemble.size(), &stream.substream(1000 + r as u64))?;
                let sols = solve_batch(model, &fresh.members, prep.time, counter, threads)?;
                let preds = sols.measure_all(design)?;
                let st = EkiStats::from_parts(&fresh.members, &preds)?;
                let mut ev = fresh;
                ev.predictions = Some(preds);
                (Some(ev), Some(st))
            }
        };
        let mut pset = build_proposals(
            prep,
            design,
            &grouping,
            weights,
            ens_r.as_ref().unwrap_or(&evaluated),
            stats_r.as_ref().unwrap_or(&stats),
            true,
            &sub,
        )?;
        let est = eig_gradient(model, prep, &mut pset, design, counter, threads)?;
        ess_sum += est.realized_ess.iter().sum::<f64>();
        ess_count += est.realized_ess.len();
        estimates.push(est.gradient);
    }

    let d = estimates[0].len();
    let mut mean = DVector::zeros(d);
    for e in &estimates {
        mean += e;
    }
    mean /= repeats as f64;
    let mut var = DVector::zeros(d);
    for e in &estimates {
        let delta = e - &mean;
        var += delta.component_mul(&delta);
    }
    var /= (repeats - 1) as f64;
    Ok(GradStdStudy {
        estimates,
        mean,
        component_std: var.map(f64::sqrt),
        mean_realized_ess: ess_sum / ess_count as f64,
        forward_cost: counter.count() - before,
        grouping,
    })
}
