//! Ensemble Kalman inversion updates toward pooled or stacked targets.
//!
//! One update step moves every ensemble member by the Kalman gain assembled
//! from ensemble sample covariances:
//!
//! ```text
//! theta_j' = theta_j + K (y_target + eta_j - f(theta_j)),
//! K = P_tf (P_ff + R)^-1,
//! ```
//!
//! where `R` is the target's noise covariance and `eta_j` is a mean-zero
//! perturbation with covariance `R` (stochastic variant) or zero
//! (deterministic variant). Two targets are supported: the pooled observation
//! (effective measurement of the tempered likelihood product) and the stacked
//! form that keeps every outer observation as its own block with inflated
//! noise `S_i / nu_i`. For the deterministic update the two coincide exactly,
//! which the tests pin down member-wise; the pooled form is what production
//! paths use because its gain solve stays at the observation dimension.

use nalgebra::{DMatrix, DVector};

use crate::linalg::{psd_factor, spd_solve_with_jitter};
use crate::pooling::{stacked_covariance, OuterSet, PooledObservation, PoolingWeights};
use crate::stats::{Ensemble, RngStream};
use crate::{CoreError, Result};

/// Sample moments of an evaluated ensemble: prediction mean, the
/// parameter-prediction cross covariance, and the prediction covariance
/// (all with the unbiased 1/(J-1) normalization).
#[derive(Debug, Clone)]
pub struct EkiStats {
    pub pred_mean: DVector<f64>,
    /// d_theta x d_y.
    pub cross_cov: DMatrix<f64>,
    /// d_y x d_y, symmetrized.
    pub pred_cov: DMatrix<f64>,
}

impl EkiStats {
    /// Moments from an ensemble whose predictions have been attached.
    pub fn from_ensemble(ensemble: &Ensemble) -> Result<Self> {
        let preds = ensemble.predictions.as_ref().ok_or(CoreError::InvalidParameter {
            name: "predictions",
            reason: "ensemble has no attached forward predictions".into(),
        })?;
        Self::from_parts(&ensemble.members, preds)
    }

    /// Moments from explicit member and prediction matrices (rows are
    /// members).
    pub fn from_parts(members: &DMatrix<f64>, preds: &DMatrix<f64>) -> Result<Self> {
        let j = members.nrows();
        if preds.nrows() != j {
            return Err(CoreError::DimensionMismatch {
                context: "EkiStats::from_parts",
                expected: format!("{j} prediction rows"),
                got: format!("{}", preds.nrows()),
            });
        }
        if j < 2 {
            return Err(CoreError::DegenerateEnsemble {
                size: j,
                context: "EkiStats::from_parts",
            });
        }
        let denom = (j - 1) as f64;
        let theta_mean = members.row_mean();
        let pred_mean = preds.row_mean();
        let mut theta_c = members.clone();
        for mut row in theta_c.row_iter_mut() {
            row -= &theta_mean;
        }
        let mut pred_c = preds.clone();
        for mut row in pred_c.row_iter_mut() {
            row -= &pred_mean;
        }
        let cross_cov = theta_c.transpose() * &pred_c / denom;
        let pred_cov = pred_c.transpose() * &pred_c / denom;
        let pred_cov = 0.5 * (&pred_cov + pred_cov.transpose());
        Ok(Self {
            pred_mean: pred_mean.transpose(),
            cross_cov,
            pred_cov,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.pred_mean.len()
    }
}

/// What the update pulls the ensemble toward.
#[derive(Debug, Clone, Copy)]
pub enum EkiTarget<'a> {
    /// Effective pooled observation; gain solve at dimension d_y.
    Pooled(&'a PooledObservation),
    /// All outer observations stacked with noise S_i / nu_i; gain solve at
    /// dimension N d_y. Kept for equivalence checks against the pooled path.
    Stacked {
        outer: &'a OuterSet,
        weights: &'a PoolingWeights,
    },
}

/// One update step. `perturb` draws observation perturbations from the given
/// stream (member-major order); `None` is the deterministic variant.
pub fn update(
    ensemble: &Ensemble,
    stats: &EkiStats,
    target: EkiTarget,
    perturb: Option<&RngStream>,
) -> Result<Ensemble> {
    let preds = ensemble.predictions.as_ref().ok_or(CoreError::InvalidParameter {
        name: "predictions",
        reason: "ensemble has no attached forward predictions".into(),
    })?;
    let j = ensemble.size();
    let d_y = stats.obs_dim();
    if preds.ncols() != d_y {
        return Err(CoreError::DimensionMismatch {
            context: "eki::update",
            expected: format!("predictions with {d_y} columns"),
            got: format!("{}", preds.ncols()),
        });
    }

    // Assemble target vector, innovation noise, and (tiled) moment blocks.
    let (target_vec, noise, cross, pred_block): (DVector<f64>, DMatrix<f64>, DMatrix<f64>, _) =
        match target {
            EkiTarget::Pooled(pooled) => {
                if pooled.y.len() != d_y {
                    return Err(CoreError::DimensionMismatch {
                        context: "eki::update",
                        expected: format!("pooled observation of length {d_y}"),
                        got: format!("{}", pooled.y.len()),
                    });
                }
                (
                    pooled.y.clone(),
                    pooled.cov.clone(),
                    stats.cross_cov.clone(),
                    None,
                )
            }
            EkiTarget::Stacked { outer, weights } => {
                if outer.obs_dim() != d_y {
                    return Err(CoreError::DimensionMismatch {
                        context: "eki::update",
                        expected: format!("outer observations of length {d_y}"),
                        got: format!("{}", outer.obs_dim()),
                    });
                }
                let n = outer.len();
                let mut stacked_y = DVector::zeros(n * d_y);
                for (i, y) in outer.ys.iter().enumerate() {
                    stacked_y.rows_mut(i * d_y, d_y).copy_from(y);
                }
                let noise = stacked_covariance(outer, weights)?;
                // P_tF = [P_tf ... P_tf], P_FF = ones(N,N) (x) P_ff: every
                // block repeats because all stacks share one prediction.
                let d_t = stats.cross_cov.nrows();
                let mut cross = DMatrix::zeros(d_t, n * d_y);
                let mut pred_big = DMatrix::zeros(n * d_y, n * d_y);
                for i in 0..n {
                    cross
                        .view_mut((0, i * d_y), (d_t, d_y))
                        .copy_from(&stats.cross_cov);
                    for k in 0..n {
                        pred_big
                            .view_mut((i * d_y, k * d_y), (d_y, d_y))
                            .copy_from(&stats.pred_cov);
                    }
                }
                (stacked_y, noise, cross, Some(pred_big))
            }
        };

    let pred_cov_full = pred_block.unwrap_or_else(|| stats.pred_cov.clone());
    let innovation_cov = &pred_cov_full + &noise;
    // K = P_tF (P_FF + R)^-1, obtained as the transpose of a symmetric solve.
    let gain = spd_solve_with_jitter(&innovation_cov, &cross.transpose())?.transpose();

    let eta = match perturb {
        Some(stream) => {
            let block = target_vec.len();
            let factor = psd_factor(&noise, "eki::update perturbation")?;
            let z = stream.standard_normals(j * block);
            let mut eta = DMatrix::zeros(j, block);
            for row in 0..j {
                let zj = z.rows(row * block, block).into_owned();
                eta.row_mut(row).copy_from(&(&factor * zj).transpose());
            }
            Some(eta)
        }
        None => None,
    };

    let mut updated = ensemble.members.clone();
    let n_stack = target_vec.len() / d_y;
    for row in 0..j {
        let f_j = preds.row(row).transpose();
        let mut innovation = target_vec.clone();
        for i in 0..n_stack {
            let mut seg = innovation.rows_mut(i * d_y, d_y);
            seg -= &f_j;
        }
        if let Some(eta) = &eta {
            innovation += eta.row(row).transpose();
        }
        let step = &gain * innovation;
        let mut member = updated.row_mut(row);
        member += step.transpose();
    }
    Ensemble::new(updated)
}

/// Independent updates of one shared prior ensemble toward several pooled
/// targets. Group `k` perturbs with `stream.substream(k)`, so the result is
/// identical to running [`update`] separately with those substreams.
pub fn update_per_group(
    ensemble: &Ensemble,
    stats: &EkiStats,
    targets: &[PooledObservation],
    perturb: bool,
    stream: &RngStream,
) -> Result<Vec<Ensemble>> {
    targets
        .iter()
        .enumerate()
        .map(|(k, pooled)| {
            let sub = stream.substream(k as u64);
            update(
                ensemble,
                stats,
                EkiTarget::Pooled(pooled),
                perturb.then_some(&sub),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{eval_forward_batch, EvalCounter, LinearModel, Measurement};
    use crate::pooling::make_pooled;
    use crate::stats::{ensemble_mean_cov, sample_gaussian, Gaussian};
    use approx::assert_abs_diff_eq;

    fn evaluated_prior(j: usize, stream: &RngStream) -> (Ensemble, LinearModel) {
        let prior = Gaussian::scalar(0.0, 1.0).unwrap();
        let model = LinearModel::new(
            DMatrix::from_element(1, 1, 1.0),
            Gaussian::scalar(0.0, 1.0).unwrap(),
        )
        .unwrap();
        let mut ens = sample_gaussian(&prior, j, stream).unwrap();
        let meas = Measurement::new(DVector::from_element(1, 0.0), 1.0, 1.0).unwrap();
        let counter = EvalCounter::new();
        eval_forward_batch(&model, &mut ens, &meas, &counter, 1).unwrap();
        (ens, model)
    }

    #[test]
    fn stochastic_update_approaches_conjugate_posterior() {
        let stream = RngStream::new(7, 1);
        let (ens, _) = evaluated_prior(20_000, &stream);
        let stats = EkiStats::from_ensemble(&ens).unwrap();
        let pooled = PooledObservation {
            y: DVector::from_element(1, 2.0),
            cov: DMatrix::from_element(1, 1, 1.0),
        };
        let post = update(
            &ens,
            &stats,
            EkiTarget::Pooled(&pooled),
            Some(&stream.substream(9)),
        )
        .unwrap();
        let (mean, cov) = ensemble_mean_cov(&post).unwrap();
        // Conjugate answer: N(1, 1/2). Monte Carlo error at J = 2e4 is well
        // inside these tolerances.
        assert_abs_diff_eq!(mean[0], 1.0, epsilon = 0.03);
        assert_abs_diff_eq!(cov[(0, 0)], 0.5, epsilon = 0.03);
    }

    #[test]
    fn deterministic_stacked_update_equals_pooled_update() {
        let stream = RngStream::new(21, 4);
        let prior = Gaussian::new(
            DVector::from_row_slice(&[0.2, -0.4]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.8]),
        )
        .unwrap();
        let mut ens = sample_gaussian(&prior, 40, &stream).unwrap();
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, -0.5, 1.2]);
        let model = LinearModel::new(a, Gaussian::isotropic(DVector::zeros(2), 0.5).unwrap()).unwrap();
        let meas = Measurement::new(DVector::zeros(2), 1.0, 0.5).unwrap();
        let counter = EvalCounter::new();
        eval_forward_batch(&model, &mut ens, &meas, &counter, 1).unwrap();
        let stats = EkiStats::from_ensemble(&ens).unwrap();

        let noise = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.7]);
        let outer = OuterSet::homoskedastic(
            vec![
                DVector::from_row_slice(&[0.6, -0.1]),
                DVector::from_row_slice(&[-0.3, 0.9]),
                DVector::from_row_slice(&[1.1, 0.4]),
            ],
            vec![DVector::zeros(2); 3],
            noise,
        )
        .unwrap();
        let weights = PoolingWeights::new(vec![0.5, 0.3, 0.2]).unwrap();
        let pooled = make_pooled(&outer, &weights).unwrap();

        let via_pooled = update(&ens, &stats, EkiTarget::Pooled(&pooled), None).unwrap();
        let via_stacked = update(
            &ens,
            &stats,
            EkiTarget::Stacked {
                outer: &outer,
                weights: &weights,
            },
            None,
        )
        .unwrap();
        let diff = (&via_pooled.members - &via_stacked.members).amax();
        assert!(diff < 1e-10, "stacked and pooled updates differ by {diff:.3e}");
    }

    #[test]
    fn per_group_updates_match_separate_substream_updates() {
        let stream = RngStream::new(3, 8);
        let (ens, _) = evaluated_prior(64, &stream);
        let stats = EkiStats::from_ensemble(&ens).unwrap();
        let targets = vec![
            PooledObservation {
                y: DVector::from_element(1, 1.0),
                cov: DMatrix::from_element(1, 1, 0.8),
            },
            PooledObservation {
                y: DVector::from_element(1, -0.5),
                cov: DMatrix::from_element(1, 1, 1.3),
            },
        ];
        let perturb_stream = stream.substream(40);
        let grouped = update_per_group(&ens, &stats, &targets, true, &perturb_stream).unwrap();
        for (k, pooled) in targets.iter().enumerate() {
            let sub = perturb_stream.substream(k as u64);
            let single = update(&ens, &stats, EkiTarget::Pooled(pooled), Some(&sub)).unwrap();
            assert_eq!(grouped[k].members, single.members);
        }
    }

    #[test]
    fn deterministic_update_never_inflates_spread() {
        let stream = RngStream::new(11, 2);
        let (ens, _) = evaluated_prior(500, &stream);
        let stats = EkiStats::from_ensemble(&ens).unwrap();
        let pooled = PooledObservation {
            y: DVector::from_element(1, 2.0),
            cov: DMatrix::from_element(1, 1, 1.0),
        };
        let post = update(&ens, &stats, EkiTarget::Pooled(&pooled), None).unwrap();
        let (_, c_prior) = ensemble_mean_cov(&ens).unwrap();
        let (_, c_post) = ensemble_mean_cov(&post).unwrap();
        assert!(c_post[(0, 0)] <= c_prior[(0, 0)] + 1e-12);
    }
}
