//! Pooled observations: collapsing a set of synthetic observations into one
//! tempered likelihood target.
//!
//! Given observations y_1..y_N with noise covariances S_1..S_N and tempering
//! weights nu (nonnegative, summing to one), the pooled likelihood
//! `prod_i p(y_i | theta)^nu_i` is again Gaussian in the prediction with
//! effective noise `S_nu = (sum_i nu_i S_i^-1)^-1` and effective observation
//! `y_nu = S_nu sum_i nu_i S_i^-1 y_i`. When all S_i are equal this collapses
//! exactly to `S_nu = S`, `y_nu = sum_i nu_i y_i`, which is the production
//! path for measurement campaigns with a shared noise model. The block
//! covariance `diag(S_i / nu_i)` of the equivalent stacked observation vector
//! is kept for verifying that the two update formulations agree.

use nalgebra::{DMatrix, DVector};

use crate::forward::{eval_forward, EvalCounter, ForwardModel, Measurement};
use crate::linalg;
use crate::stats::Gaussian;
use crate::{CoreError, Result};

/// Tempering weights over outer observations: nonnegative, summing to one
/// within 1e-12.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolingWeights(Vec<f64>);

impl PoolingWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(CoreError::InvalidParameter {
                name: "weights",
                reason: "weight vector is empty".into(),
            });
        }
        for (i, w) in weights.iter().enumerate() {
            if !w.is_finite() || *w < 0.0 {
                return Err(CoreError::InvalidParameter {
                    name: "weights",
                    reason: format!("weight {i} is {w}, must be finite and nonnegative"),
                });
            }
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(CoreError::WeightSumError { sum });
        }
        Ok(Self(weights))
    }

    /// Uniform weights 1/n.
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(CoreError::InvalidParameter {
                name: "n",
                reason: "cannot build weights over zero observations".into(),
            });
        }
        Ok(Self(vec![1.0 / n as f64; n]))
    }

    /// Restrict to a subset of indices and renormalize to sum one.
    pub fn renormalized_subset(&self, indices: &[usize]) -> Result<Self> {
        let total: f64 = indices.iter().map(|&i| self.0[i]).sum();
        if total <= 0.0 {
            return Err(CoreError::ZeroWeight {
                index: indices.first().copied().unwrap_or(0),
            });
        }
        Self::new(indices.iter().map(|&i| self.0[i] / total).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> f64 {
        self.0[i]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Synthetic outer observations with the parameters that generated them and
/// their noise covariances.
#[derive(Debug, Clone)]
pub struct OuterSet {
    pub ys: Vec<DVector<f64>>,
    pub thetas: Vec<DVector<f64>>,
    pub noise: Vec<DMatrix<f64>>,
}

impl OuterSet {
    pub fn new(
        ys: Vec<DVector<f64>>,
        thetas: Vec<DVector<f64>>,
        noise: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        if ys.is_empty() {
            return Err(CoreError::InvalidParameter {
                name: "ys",
                reason: "outer set is empty".into(),
            });
        }
        if ys.len() != thetas.len() || ys.len() != noise.len() {
            return Err(CoreError::DimensionMismatch {
                context: "OuterSet::new",
                expected: format!("{} observations, parameters, and noise blocks", ys.len()),
                got: format!("{} / {} / {}", ys.len(), thetas.len(), noise.len()),
            });
        }
        let d_y = ys[0].len();
        for (i, y) in ys.iter().enumerate() {
            if y.len() != d_y || noise[i].nrows() != d_y || noise[i].ncols() != d_y {
                return Err(CoreError::DimensionMismatch {
                    context: "OuterSet::new",
                    expected: format!("observation dimension {d_y}"),
                    got: format!(
                        "y[{i}] len {}, noise[{i}] {}x{}",
                        y.len(),
                        noise[i].nrows(),
                        noise[i].ncols()
                    ),
                });
            }
        }
        Ok(Self { ys, thetas, noise })
    }

    /// Shared-noise constructor for the usual homoskedastic campaign.
    pub fn homoskedastic(
        ys: Vec<DVector<f64>>,
        thetas: Vec<DVector<f64>>,
        noise: DMatrix<f64>,
    ) -> Result<Self> {
        let n = ys.len();
        Self::new(ys, thetas, vec![noise; n])
    }

    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.ys[0].len()
    }

    /// The sub-campaign at the given indices, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<OuterSet> {
        for &i in indices {
            if i >= self.len() {
                return Err(CoreError::InvalidParameter {
                    name: "indices",
                    reason: format!("observation index {i} out of range {}", self.len()),
                });
            }
        }
        OuterSet::new(
            indices.iter().map(|&i| self.ys[i].clone()).collect(),
            indices.iter().map(|&i| self.thetas[i].clone()).collect(),
            indices.iter().map(|&i| self.noise[i].clone()).collect(),
        )
    }
}

/// The pooled observation: effective measurement and effective noise of the
/// tempered likelihood product.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledObservation {
    pub y: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Pool an outer set under tempering weights.
///
/// The homoskedastic case (all noise blocks identical) is detected exactly
/// and returns `cov = S` unchanged with `y = sum nu_i y_i`, so no inversion
/// round-off enters the common path.
pub fn make_pooled(outer: &OuterSet, weights: &PoolingWeights) -> Result<PooledObservation> {
    check_weight_len(outer, weights)?;
    let d = outer.obs_dim();
    if outer.noise.iter().all(|s| s == &outer.noise[0]) {
        let mut y = DVector::zeros(d);
        for (i, yi) in outer.ys.iter().enumerate() {
            y += yi * weights.get(i);
        }
        return Ok(PooledObservation {
            y,
            cov: outer.noise[0].clone(),
        });
    }
    // Heteroskedastic path: accumulate the weighted precision and its
    // precision-weighted observation, then invert once.
    let mut precision = DMatrix::zeros(d, d);
    let mut weighted = DVector::zeros(d);
    for i in 0..outer.len() {
        let nu = weights.get(i);
        if nu == 0.0 {
            continue;
        }
        let chol = linalg::spd_cholesky(&outer.noise[i], "make_pooled")
            .map_err(|_| CoreError::SingularNoise { index: i })?;
        precision += chol.solve(&DMatrix::identity(d, d)) * nu;
        weighted += chol.solve(&outer.ys[i]) * nu;
    }
    let chol = linalg::spd_cholesky(&precision, "make_pooled: pooled precision")?;
    let cov = chol.solve(&DMatrix::identity(d, d));
    let y = chol.solve(&weighted);
    // Symmetrize away solve round-off so downstream constructors accept it.
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(PooledObservation { y, cov })
}

/// Block-diagonal covariance `diag(S_i / nu_i)` of the stacked observation
/// vector. Requires every weight positive.
pub fn stacked_covariance(outer: &OuterSet, weights: &PoolingWeights) -> Result<DMatrix<f64>> {
    check_weight_len(outer, weights)?;
    let d = outer.obs_dim();
    let n = outer.len();
    let mut out = DMatrix::zeros(n * d, n * d);
    for i in 0..n {
        let nu = weights.get(i);
        if nu == 0.0 {
            return Err(CoreError::ZeroWeight { index: i });
        }
        let block = &outer.noise[i] / nu;
        out.view_mut((i * d, i * d), (d, d)).copy_from(&block);
    }
    Ok(out)
}

/// Tempered misfit `sum_i nu_i ||y_i - pred||^2_{S_i}` of a prediction.
pub fn pooled_quadratic_sum(
    pred: &DVector<f64>,
    outer: &OuterSet,
    weights: &PoolingWeights,
) -> Result<f64> {
    check_weight_len(outer, weights)?;
    let mut total = 0.0;
    for i in 0..outer.len() {
        let nu = weights.get(i);
        if nu == 0.0 {
            continue;
        }
        let r = &outer.ys[i] - pred;
        total += nu * linalg::inv_quadratic(&outer.noise[i], &r, "pooled_quadratic_sum")?;
    }
    Ok(total)
}

/// Pooled misfit `||y_nu - pred||^2_{S_nu}` of a prediction. Differs from
/// [`pooled_quadratic_sum`] by a prediction-independent constant.
pub fn pooled_quadratic_mean_obs(pred: &DVector<f64>, pooled: &PooledObservation) -> Result<f64> {
    let r = &pooled.y - pred;
    linalg::inv_quadratic(&pooled.cov, &r, "pooled_quadratic_mean_obs")
}

/// Unnormalized log density of the pooled target at `theta`: the log prior
/// (when supplied) minus half the tempered misfit of the forward prediction.
/// Costs one counted forward solve.
pub fn pooled_logdensity_unnorm(
    theta: &DVector<f64>,
    outer: &OuterSet,
    weights: &PoolingWeights,
    model: &dyn ForwardModel,
    meas: &Measurement,
    counter: &EvalCounter,
    prior: Option<&Gaussian>,
) -> Result<f64> {
    let pred = eval_forward(model, theta, meas, counter)?;
    let misfit = pooled_quadratic_sum(&pred, outer, weights)?;
    let log_prior = match prior {
        Some(g) => {
            let r = theta - g.mean();
            -0.5 * linalg::inv_quadratic(g.cov(), &r, "pooled_logdensity_unnorm: prior")?
        }
        None => 0.0,
    };
    Ok(log_prior - 0.5 * misfit)
}

fn check_weight_len(outer: &OuterSet, weights: &PoolingWeights) -> Result<()> {
    if outer.len() != weights.len() {
        return Err(CoreError::DimensionMismatch {
            context: "pooling",
            expected: format!("{} weights", outer.len()),
            got: format!("{}", weights.len()),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    const TOLERANCE: f64 = 1e-12;

    fn vec1(x: f64) -> DVector<f64> {
        DVector::from_element(1, x)
    }

    fn mat1(x: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, x)
    }

    #[test]
    fn weights_validate_sum_and_sign() {
        assert!(PoolingWeights::new(vec![0.5, 0.5]).is_ok());
        assert!(matches!(
            PoolingWeights::new(vec![0.5, 0.6]),
            Err(CoreError::WeightSumError { .. })
        ));
        assert!(PoolingWeights::new(vec![1.5, -0.5]).is_err());
    }

    #[test]
    fn uniform_weights_sum_to_one() {
        let w = PoolingWeights::uniform(7).unwrap();
        assert_abs_diff_eq!(w.as_slice().iter().sum::<f64>(), 1.0, epsilon = TOLERANCE);
    }

    #[test]
    fn renormalized_subset_sums_to_one() {
        let w = PoolingWeights::new(vec![0.25, 0.75]).unwrap();
        let sub = w.renormalized_subset(&[1]).unwrap();
        assert_abs_diff_eq!(sub.get(0), 1.0, epsilon = TOLERANCE);
    }

    #[test]
    fn homoskedastic_pooling_is_exact_weighted_mean() {
        let outer = OuterSet::homoskedastic(
            vec![vec1(0.0), vec1(4.0)],
            vec![vec1(0.0), vec1(0.0)],
            mat1(2.0),
        )
        .unwrap();
        let w = PoolingWeights::new(vec![0.25, 0.75]).unwrap();
        let pooled = make_pooled(&outer, &w).unwrap();
        assert_eq!(pooled.cov, mat1(2.0));
        assert_abs_diff_eq!(pooled.y[0], 3.0, epsilon = TOLERANCE);
    }

    #[test]
    fn heteroskedastic_pooling_matches_hand_calculation() {
        // y = {0, 4}, S = {1, 3}, nu = (1/2, 1/2):
        // S_nu^-1 = 1/2 + 1/6 = 2/3, S_nu = 3/2, y_nu = 3/2 * (0 + 2/3) = 1.
        let outer = OuterSet::new(
            vec![vec1(0.0), vec1(4.0)],
            vec![vec1(0.0), vec1(0.0)],
            vec![mat1(1.0), mat1(3.0)],
        )
        .unwrap();
        let w = PoolingWeights::new(vec![0.5, 0.5]).unwrap();
        let pooled = make_pooled(&outer, &w).unwrap();
        assert_abs_diff_eq!(pooled.cov[(0, 0)], 1.5, epsilon = TOLERANCE);
        assert_abs_diff_eq!(pooled.y[0], 1.0, epsilon = TOLERANCE);
    }

    #[test]
    fn stacked_covariance_divides_by_weights() {
        let outer = OuterSet::homoskedastic(
            vec![vec1(0.0), vec1(1.0)],
            vec![vec1(0.0), vec1(0.0)],
            mat1(1.0),
        )
        .unwrap();
        let w = PoolingWeights::new(vec![0.25, 0.75]).unwrap();
        let s = stacked_covariance(&outer, &w).unwrap();
        assert_abs_diff_eq!(s[(0, 0)], 4.0, epsilon = TOLERANCE);
        assert_abs_diff_eq!(s[(1, 1)], 4.0 / 3.0, epsilon = TOLERANCE);
        assert_eq!(s[(0, 1)], 0.0);

        let zero = PoolingWeights::new(vec![1.0, 0.0]).unwrap();
        assert!(matches!(
            stacked_covariance(&outer, &zero),
            Err(CoreError::ZeroWeight { index: 1 })
        ));
    }

    #[test]
    fn quadratic_forms_differ_by_constant_in_prediction() {
        // Heteroskedastic fixture: the sum form and the pooled form must agree
        // up to a prediction-independent constant.
        let outer = OuterSet::new(
            vec![vec1(0.3), vec1(2.1), vec1(-1.0)],
            vec![vec1(0.0); 3],
            vec![mat1(0.5), mat1(1.5), mat1(2.5)],
        )
        .unwrap();
        let w = PoolingWeights::new(vec![0.2, 0.5, 0.3]).unwrap();
        let pooled = make_pooled(&outer, &w).unwrap();
        let offset_at = |p: f64| {
            let pred = vec1(p);
            pooled_quadratic_sum(&pred, &outer, &w).unwrap()
                - pooled_quadratic_mean_obs(&pred, &pooled).unwrap()
        };
        let base = offset_at(0.0);
        for i in 0..100 {
            let p = -3.0 + 0.06 * i as f64;
            assert_abs_diff_eq!(offset_at(p), base, epsilon = 1e-10);
        }
    }
}
