//! Self-normalized importance weights, effective-sample-size estimates, and
//! the conservative grouping of outer observations.
//!
//! The proposal for observation `i` is the tempered-product posterior, so the
//! unnormalized log weight of proposal member `j` splits into a numerator
//! quadratic against `y_i` and a denominator quadratic against the pooled
//! observation:
//!
//! ```text
//! log w_j = -1/2 |y_i - f_j|^2_{S_i}  +  1/2 |y_nu - f_j|^2_{S_nu}.
//! ```
//!
//! The denominator half is a property of the frozen proposal; callers that
//! keep a proposal fixed while the design moves cache it once via
//! [`pooled_denominator_quadratics`] and recompute only the numerator.
//!
//! In the homoskedastic case the quadratic terms in `f_j` cancel exactly and
//! `log w_j = const + a' f_j` with `a = S^-1 (y_i - y_nu)`, so under a
//! Gaussian prediction spread the weights are lognormal and
//! `ESS ~ J exp(-a' C a)` with `C` the prediction covariance. Substituting
//! the pre-update prediction covariance for the (contracted) post-update one
//! makes the estimate a conservative floor and costs no extra solves; that
//! floor decides which observations get grouped into joint proposals.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::linalg::{spd_cholesky, spd_solve_with_jitter};
use crate::pooling::{OuterSet, PooledObservation, PoolingWeights};
use crate::{CoreError, Result};

/// Normalized importance weights with their raw log form.
#[derive(Debug, Clone)]
pub struct WeightVector {
    /// Unnormalized log weights as supplied.
    pub logw: DVector<f64>,
    /// Self-normalized weights, summing to one.
    pub w: DVector<f64>,
}

impl WeightVector {
    /// 1 / sum w_j^2; equals J for uniform weights and 1 for a point mass.
    pub fn realized_ess(&self) -> f64 {
        1.0 / self.w.iter().map(|v| v * v).sum::<f64>()
    }
}

/// Normalize log weights by max-shift exponentiation.
pub fn normalize_logweights(logw: DVector<f64>) -> Result<WeightVector> {
    if logw.is_empty() {
        return Err(CoreError::InvalidParameter {
            name: "logw",
            reason: "no weights to normalize".into(),
        });
    }
    let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(CoreError::AllWeightsUnderflow {
            context: "no finite log weight".into(),
        });
    }
    let mut w = logw.map(|l| (l - max).exp());
    let sum: f64 = w.iter().sum();
    if !(sum > 0.0) || !sum.is_finite() {
        return Err(CoreError::AllWeightsUnderflow {
            context: "shifted weights sum to zero".into(),
        });
    }
    w /= sum;
    Ok(WeightVector { logw, w })
}

/// The denominator half of every member's log weight against a pooled
/// observation: `1/2 |y_nu - f_j|^2_{S_nu}` per row of `preds`. Computed at
/// the design where the proposal was frozen and reused afterwards.
pub fn pooled_denominator_quadratics(
    preds: &DMatrix<f64>,
    pooled: &PooledObservation,
) -> Result<DVector<f64>> {
    if preds.ncols() != pooled.y.len() {
        return Err(CoreError::DimensionMismatch {
            context: "pooled_denominator_quadratics",
            expected: format!("predictions with {} columns", pooled.y.len()),
            got: format!("{}", preds.ncols()),
        });
    }
    let chol = spd_cholesky(&pooled.cov, "pooled_denominator_quadratics")?;
    let mut out = DVector::zeros(preds.nrows());
    for (j, row) in preds.row_iter().enumerate() {
        let r = &pooled.y - row.transpose();
        out[j] = 0.5 * r.dot(&chol.solve(&r));
    }
    Ok(out)
}

/// Unnormalized log weights from current predictions and a cached
/// denominator.
pub fn snis_logweights(
    preds: &DMatrix<f64>,
    y: &DVector<f64>,
    noise: &DMatrix<f64>,
    denom_quad: &DVector<f64>,
) -> Result<DVector<f64>> {
    let j = preds.nrows();
    if denom_quad.len() != j {
        return Err(CoreError::DimensionMismatch {
            context: "snis_logweights",
            expected: format!("{j} denominator quadratics"),
            got: format!("{}", denom_quad.len()),
        });
    }
    if preds.ncols() != y.len() {
        return Err(CoreError::DimensionMismatch {
            context: "snis_logweights",
            expected: format!("predictions with {} columns", y.len()),
            got: format!("{}", preds.ncols()),
        });
    }
    let chol = spd_cholesky(noise, "snis_logweights")?;
    let mut logw = DVector::zeros(j);
    for (row, pred) in preds.row_iter().enumerate() {
        let r = y - pred.transpose();
        logw[row] = -0.5 * r.dot(&chol.solve(&r)) + denom_quad[row];
    }
    Ok(logw)
}

/// Normalized weights for target observation `y` when numerator and
/// denominator are evaluated at the same design.
pub fn snis_weights(
    preds: &DMatrix<f64>,
    y: &DVector<f64>,
    noise: &DMatrix<f64>,
    pooled: &PooledObservation,
) -> Result<WeightVector> {
    let denom = pooled_denominator_quadratics(preds, pooled)?;
    normalize_logweights(snis_logweights(preds, y, noise, &denom)?)
}

/// Realized ESS for diagnostics: an observation whose weights all underflow
/// is reported as one effective sample and flagged degenerate instead of
/// aborting the whole report.
pub fn realized_ess_flagged(
    preds: &DMatrix<f64>,
    y: &DVector<f64>,
    noise: &DMatrix<f64>,
    pooled: &PooledObservation,
) -> Result<(f64, bool)> {
    match snis_weights(preds, y, noise, pooled) {
        Ok(wv) => Ok((wv.realized_ess(), false)),
        Err(CoreError::AllWeightsUnderflow { .. }) => Ok((1.0, true)),
        Err(e) => Err(e),
    }
}

/// Lognormal effective-sample-size estimate `J exp(-a' C a)` with
/// `a = S^-1 (y - y_nu)` and `C` a prediction covariance. Passing the
/// pre-update covariance gives the conservative floor; there is no separate
/// code path for it.
pub fn lognormal_ess(
    j: usize,
    pred_cov: &DMatrix<f64>,
    y: &DVector<f64>,
    pooled: &PooledObservation,
    noise: &DMatrix<f64>,
) -> Result<f64> {
    if j == 0 {
        return Err(CoreError::InvalidParameter {
            name: "j",
            reason: "ensemble size must be positive".into(),
        });
    }
    let d = y.len();
    if pred_cov.nrows() != d || pooled.y.len() != d {
        return Err(CoreError::DimensionMismatch {
            context: "lognormal_ess",
            expected: format!("observation dimension {d}"),
            got: format!("pred_cov {}x{}, pooled {}", pred_cov.nrows(), pred_cov.ncols(), pooled.y.len()),
        });
    }
    let diff = DMatrix::from_column_slice(d, 1, (y - &pooled.y).as_slice());
    let a = spd_solve_with_jitter(noise, &diff)?.column(0).into_owned();
    let quad = (pred_cov * &a).dot(&a);
    // A proposal never has fewer than one effective member; the floor keeps
    // far-tail observations reportable instead of rounding to zero.
    Ok((j as f64 * (-quad).exp()).max(1.0))
}

/// Per-observation ESS diagnostics. The conservative floor is always
/// present; the proposal-based estimate and the realized 1/sum w^2 are
/// filled in by callers that have paid for the relevant predictions.
#[derive(Debug, Clone, Serialize)]
pub struct EssEntry {
    pub index: usize,
    pub ess_conservative: f64,
    pub ess_lognormal: Option<f64>,
    pub realized: Option<f64>,
    pub problematic: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct EssReport {
    pub threshold: f64,
    pub entries: Vec<EssEntry>,
    pub fraction_problematic: f64,
}

/// Grouping policy knobs.
#[derive(Debug, Clone)]
pub struct GroupingConfig {
    /// ESS floor below which an observation is problematic; `None` uses the
    /// parameter dimension (a gradient needs at least that many effective
    /// samples).
    pub threshold: Option<f64>,
    /// Number of clusters for the problematic set.
    pub k: usize,
    /// Problematic fraction at or below which grouping is skipped entirely.
    pub trigger_fraction: f64,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        Self {
            threshold: None,
            k: 3,
            trigger_fraction: 0.05,
        }
    }
}

impl GroupingConfig {
    pub fn resolve_threshold(&self, param_dim: usize) -> f64 {
        self.threshold.unwrap_or(param_dim as f64)
    }
}

/// A partition of outer-observation indices into a well-served set and
/// clustered problematic groups.
#[derive(Debug, Clone, Serialize)]
pub struct Grouping {
    /// Indices whose conservative ESS clears the threshold.
    pub ok: Vec<usize>,
    /// Clusters of problematic indices, each of which gets its own proposal.
    pub groups: Vec<Vec<usize>>,
    pub report: EssReport,
}

impl Grouping {
    /// The grouping that declares every observation well served, bypassing
    /// the ESS screen entirely.
    pub fn trivial(n: usize) -> Self {
        Grouping {
            ok: (0..n).collect(),
            groups: Vec::new(),
            report: EssReport {
                threshold: 0.0,
                entries: Vec::new(),
                fraction_problematic: 0.0,
            },
        }
    }

    /// No problematic clusters: every observation shares the global proposal.
    pub fn is_trivial(&self) -> bool {
        self.groups.is_empty()
    }

    /// Number of proposals the grouping implies (ok set plus clusters).
    pub fn proposal_count(&self) -> usize {
        usize::from(!self.ok.is_empty()) + self.groups.len()
    }
}

/// Screen every outer observation by its conservative ESS floor and cluster
/// the problematic ones in whitened observation space. Uses only quantities
/// already in hand (prior prediction covariance, pooled observation), so it
/// costs no forward solves.
pub fn make_grouping(
    outer: &OuterSet,
    weights: &PoolingWeights,
    pooled: &PooledObservation,
    prior_pred_cov: &DMatrix<f64>,
    ensemble_size: usize,
    param_dim: usize,
    config: &GroupingConfig,
) -> Result<Grouping> {
    if config.k == 0 {
        return Err(CoreError::InvalidParameter {
            name: "k",
            reason: "cluster count must be positive".into(),
        });
    }
    if weights.len() != outer.len() {
        return Err(CoreError::DimensionMismatch {
            context: "make_grouping",
            expected: format!("{} tempering weights", outer.len()),
            got: format!("{}", weights.len()),
        });
    }
    let threshold = config.resolve_threshold(param_dim);
    let n = outer.len();
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let ess = lognormal_ess(ensemble_size, prior_pred_cov, &outer.ys[i], pooled, &outer.noise[i])?;
        entries.push(EssEntry {
            index: i,
            ess_conservative: ess,
            ess_lognormal: None,
            realized: None,
            problematic: ess < threshold,
        });
    }
    let problematic: Vec<usize> = entries.iter().filter(|e| e.problematic).map(|e| e.index).collect();
    let fraction = problematic.len() as f64 / n as f64;
    let report = EssReport {
        threshold,
        entries,
        fraction_problematic: fraction,
    };

    if fraction <= config.trigger_fraction {
        return Ok(Grouping {
            ok: (0..n).collect(),
            groups: Vec::new(),
            report,
        });
    }
    if config.k < 2 {
        return Err(CoreError::InvalidParameter {
            name: "k",
            reason: format!(
                "{} problematic observations need at least 2 clusters, got k = {}",
                problematic.len(),
                config.k
            ),
        });
    }

    // Cluster problematic observations by Mahalanobis distance under the
    // pooled covariance: whiten with its Cholesky factor, then run
    // deterministic k-means.
    let chol = spd_cholesky(&pooled.cov, "make_grouping")?;
    let whitened: Vec<DVector<f64>> = problematic
        .iter()
        .map(|&i| {
            let l = chol.l();
            l.solve_lower_triangular(&outer.ys[i])
                .ok_or(CoreError::SingularCovariance {
                    context: "make_grouping",
                })
        })
        .collect::<Result<_>>()?;
    let k_eff = config.k.min(problematic.len());
    let clusters = deterministic_kmeans(&whitened, k_eff);
    let groups: Vec<Vec<usize>> = clusters
        .into_iter()
        .map(|members| members.into_iter().map(|m| problematic[m]).collect())
        .collect();
    let ok: Vec<usize> = (0..n).filter(|i| !problematic.contains(i)).collect();
    Ok(Grouping { ok, groups, report })
}

/// Plain k-means with deterministic farthest-point seeding and tie-breaking
/// by lowest index. Empty clusters steal the point farthest from the largest
/// cluster's centroid, so exactly `k` nonempty clusters come back whenever
/// `k <= points.len()` and at least `k` distinct points exist; with fewer
/// distinct points some clusters may stay empty and are dropped.
fn deterministic_kmeans(points: &[DVector<f64>], k: usize) -> Vec<Vec<usize>> {
    let n = points.len();
    debug_assert!(k >= 1 && k <= n);
    let dim = points[0].len();

    // Seed 1: farthest from the overall mean; then classic farthest-point.
    let mean = points.iter().sum::<DVector<f64>>() / n as f64;
    let mut seeds = Vec::with_capacity(k);
    let far = argmax_by_distance(points, |p| (p - &mean).norm_squared(), &[]);
    seeds.push(far);
    while seeds.len() < k {
        let next = argmax_by_distance(
            points,
            |p| {
                seeds
                    .iter()
                    .map(|&s| (p - &points[s]).norm_squared())
                    .fold(f64::INFINITY, f64::min)
            },
            &seeds,
        );
        seeds.push(next);
    }

    let mut centroids: Vec<DVector<f64>> = seeds.iter().map(|&s| points[s].clone()).collect();
    let mut assignment = vec![usize::MAX; n];
    for _ in 0..100 {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, cent) in centroids.iter().enumerate() {
                let d = (p - cent).norm_squared();
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        // Recompute centroids; refill any empty cluster from the largest.
        let mut counts = vec![0usize; k];
        let mut sums = vec![DVector::zeros(dim); k];
        for (i, &c) in assignment.iter().enumerate() {
            counts[c] += 1;
            sums[c] += &points[i];
        }
        for c in 0..k {
            if counts[c] == 0 {
                let largest = (0..k).max_by_key(|&g| counts[g]).unwrap();
                if counts[largest] <= 1 {
                    continue; // not enough distinct mass to split
                }
                let donor = argmax_by_distance(
                    points,
                    |p| (p - &centroids[largest]).norm_squared(),
                    &[],
                );
                // Donor must come out of the largest cluster for counts to
                // stay consistent; fall back to any member if it does not.
                let donor = if assignment[donor] == largest {
                    donor
                } else {
                    assignment.iter().position(|&g| g == largest).unwrap()
                };
                counts[assignment[donor]] -= 1;
                sums[assignment[donor]] -= &points[donor];
                assignment[donor] = c;
                counts[c] = 1;
                sums[c] = points[donor].clone();
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = &sums[c] / counts[c] as f64;
            }
        }
    }

    let mut clusters = vec![Vec::new(); k];
    for (i, &c) in assignment.iter().enumerate() {
        clusters[c].push(i);
    }
    clusters.retain(|c| !c.is_empty());
    clusters
}

/// Index maximizing a distance score, skipping `exclude`, ties to the lowest
/// index.
fn argmax_by_distance<F>(points: &[DVector<f64>], score: F, exclude: &[usize]) -> usize
where
    F: Fn(&DVector<f64>) -> f64,
{
    let mut best = usize::MAX;
    let mut best_score = f64::NEG_INFINITY;
    for (i, p) in points.iter().enumerate() {
        if exclude.contains(&i) {
            continue;
        }
        let s = score(p);
        if s > best_score {
            best_score = s;
            best = i;
        }
    }
    best
}
