//! Independent verification routes for the estimators in this crate.
//!
//! Everything here recomputes a quantity the production code obtains some
//! other way: conjugate posteriors through the Kalman gain identity,
//! importance weights through fully normalized log densities, gradients
//! through central differences, and linear-Gaussian information gain through
//! its log-determinant closed form. Tests compare the two routes; production
//! code never calls into this module, and nothing here is tuned for speed.

use nalgebra::{DMatrix, DVector};

use crate::linalg::{inv_quadratic, logdet_spd, spd_cholesky};
use crate::pooling::{make_pooled, OuterSet, PoolingWeights};
use crate::stats::Gaussian;
use crate::{CoreError, Result};

/// Fully normalized Gaussian log density, the long way.
pub fn gaussian_logpdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    if x.len() != mean.len() || cov.nrows() != mean.len() {
        return Err(CoreError::DimensionMismatch {
            context: "gaussian_logpdf",
            expected: format!("dimension {}", mean.len()),
            got: format!("x len {}, cov {}x{}", x.len(), cov.nrows(), cov.ncols()),
        });
    }
    let d = mean.len() as f64;
    let resid = x - mean;
    let quad = inv_quadratic(cov, &resid, "gaussian_logpdf")?;
    let logdet = logdet_spd(cov, "gaussian_logpdf")?;
    Ok(-0.5 * (d * (2.0 * std::f64::consts::PI).ln() + logdet + quad))
}

/// A linear-Gaussian observation model y = A theta + eps, eps ~ N(0, S),
/// with Gaussian prior on theta. Everything downstream of it has a closed
/// form.
#[derive(Debug, Clone)]
pub struct ConjugateSpec {
    pub prior: Gaussian,
    pub a: DMatrix<f64>,
    pub noise_cov: DMatrix<f64>,
}

impl ConjugateSpec {
    pub fn new(prior: Gaussian, a: DMatrix<f64>, noise_cov: DMatrix<f64>) -> Result<Self> {
        if a.ncols() != prior.dim() {
            return Err(CoreError::DimensionMismatch {
                context: "ConjugateSpec::new",
                expected: format!("A with {} columns", prior.dim()),
                got: format!("{}x{}", a.nrows(), a.ncols()),
            });
        }
        if noise_cov.nrows() != a.nrows() || noise_cov.ncols() != a.nrows() {
            return Err(CoreError::DimensionMismatch {
                context: "ConjugateSpec::new",
                expected: format!("{0}x{0} noise covariance", a.nrows()),
                got: format!("{}x{}", noise_cov.nrows(), noise_cov.ncols()),
            });
        }
        Ok(Self { prior, a, noise_cov })
    }

    /// Exact posterior for one observation, via the gain identity:
    /// K = C A' (A C A' + S)^-1, mean += K innovation, cov = (I - K A) C.
    pub fn posterior(&self, y: &DVector<f64>) -> Result<Gaussian> {
        linear_posterior(&self.prior, &self.a, &self.noise_cov, y)
    }

    /// Expected information gain of the observation in closed form:
    /// 0.5 logdet(A C A' + S) - 0.5 logdet S.
    pub fn information_gain(&self) -> Result<f64> {
        let marginal = &self.a * self.prior.cov() * self.a.transpose() + &self.noise_cov;
        Ok(0.5 * logdet_spd(&marginal, "ConjugateSpec::information_gain")?
            - 0.5 * logdet_spd(&self.noise_cov, "ConjugateSpec::information_gain")?)
    }

    /// Exact tempered-product posterior: the single conjugate update against
    /// the precision-weighted mean observation with its effective covariance.
    pub fn pooled_posterior(&self, outer: &OuterSet, weights: &PoolingWeights) -> Result<Gaussian> {
        let pooled = make_pooled(outer, weights)?;
        linear_posterior(&self.prior, &self.a, &pooled.cov, &pooled.y)
    }
}

/// Exact Gaussian posterior update for a linear observation.
pub fn linear_posterior(
    prior: &Gaussian,
    a: &DMatrix<f64>,
    noise_cov: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<Gaussian> {
    if y.len() != a.nrows() {
        return Err(CoreError::DimensionMismatch {
            context: "linear_posterior",
            expected: format!("observation of length {}", a.nrows()),
            got: format!("{}", y.len()),
        });
    }
    let c0 = prior.cov();
    let marginal = a * c0 * a.transpose() + noise_cov;
    let chol = spd_cholesky(&marginal, "linear_posterior")?;
    // K = C0 A' M^-1 computed as (M^-1 (A C0))' to keep one factorization.
    let gain = chol.solve(&(a * c0)).transpose();
    let mean = prior.mean() + &gain * (y - a * prior.mean());
    let cov = c0 - &gain * a * c0;
    // Round-trip through the constructor so symmetry is restored and the
    // result is certified PSD.
    let cov = 0.5 * (&cov + cov.transpose());
    Gaussian::new(mean, cov)
}

/// Self-normalized importance weights for the target that conditions on
/// observation `i`, under the tempered-product proposal, computed from fully
/// normalized log densities on both sides (prior factors included even
/// though they cancel).
pub fn snis_bruteforce(
    prior: &Gaussian,
    outer: &OuterSet,
    weights: &PoolingWeights,
    i: usize,
    thetas: &DMatrix<f64>,
    predictions: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    if i >= outer.len() {
        return Err(CoreError::InvalidParameter {
            name: "i",
            reason: format!("observation index {i} out of range {}", outer.len()),
        });
    }
    if weights.len() != outer.len() {
        return Err(CoreError::DimensionMismatch {
            context: "snis_bruteforce",
            expected: format!("{} tempering weights", outer.len()),
            got: format!("{}", weights.len()),
        });
    }
    let j = predictions.nrows();
    if thetas.nrows() != j {
        return Err(CoreError::DimensionMismatch {
            context: "snis_bruteforce",
            expected: format!("{j} parameter rows"),
            got: format!("{}", thetas.nrows()),
        });
    }
    let mut logw = DVector::zeros(j);
    for row in 0..j {
        let theta = thetas.row(row).transpose();
        let pred = predictions.row(row).transpose();
        let log_prior = gaussian_logpdf(&theta, prior.mean(), prior.cov())?;
        let log_target = log_prior + gaussian_logpdf(&outer.ys[i], &pred, &outer.noise[i])?;
        let mut log_proposal = log_prior;
        for (k, nu) in weights.as_slice().iter().enumerate() {
            log_proposal += nu * gaussian_logpdf(&outer.ys[k], &pred, &outer.noise[k])?;
        }
        logw[row] = log_target - log_proposal;
    }
    let max = logw.max();
    let mut w = logw.map(|l| (l - max).exp());
    let sum: f64 = w.iter().sum();
    if !(sum > 0.0) || !sum.is_finite() {
        return Err(CoreError::AllWeightsUnderflow {
            context: "brute-force density ratios".into(),
        });
    }
    w /= sum;
    Ok(w)
}

/// Central-difference gradient of a scalar function.
pub fn fd_gradient<F>(f: F, x: &DVector<f64>, h: f64) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(CoreError::InvalidParameter {
            name: "h",
            reason: format!("finite-difference step {h} must be positive"),
        });
    }
    let mut grad = DVector::zeros(x.len());
    for k in 0..x.len() {
        let mut hi = x.clone();
        let mut lo = x.clone();
        hi[k] += h;
        lo[k] -= h;
        grad[k] = (f(&hi)? - f(&lo)?) / (2.0 * h);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn scalar_conjugate_posterior_matches_hand_calculation() {
        // Prior N(0,1), y = theta + eps with eps ~ N(0,1), y = 2:
        // posterior N(1, 1/2).
        let spec = ConjugateSpec::new(
            Gaussian::scalar(0.0, 1.0).unwrap(),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let post = spec.posterior(&DVector::from_element(1, 2.0)).unwrap();
        assert_abs_diff_eq!(post.mean()[0], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(post.cov()[(0, 0)], 0.5, epsilon = 1e-14);
    }

    #[test]
    fn gain_form_matches_precision_form() {
        let prior = Gaussian::new(
            DVector::from_row_slice(&[0.5, -1.0, 2.0]),
            DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.0, 0.3, 1.5, -0.2, 0.0, -0.2, 1.0]),
        )
        .unwrap();
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 0.5, 0.0, -0.3, 1.0, 0.8]);
        let noise = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.4]);
        let y = DVector::from_row_slice(&[1.2, -0.7]);
        let spec = ConjugateSpec::new(prior.clone(), a.clone(), noise.clone()).unwrap();
        let post = spec.posterior(&y).unwrap();

        // Precision route: C = (C0^-1 + A' S^-1 A)^-1.
        let c0_inv = prior.cov().clone().try_inverse().unwrap();
        let s_inv = noise.try_inverse().unwrap();
        let prec = &c0_inv + a.transpose() * &s_inv * &a;
        let cov = prec.try_inverse().unwrap();
        let mean = &cov * (&c0_inv * prior.mean() + a.transpose() * &s_inv * &y);
        assert!((post.mean() - &mean).amax() < 1e-12);
        assert!((post.cov() - &cov).amax() < 1e-12);
    }

    #[test]
    fn information_gain_matches_scalar_closed_form() {
        let spec = ConjugateSpec::new(
            Gaussian::scalar(0.0, 2.0).unwrap(),
            DMatrix::from_element(1, 1, 3.0),
            DMatrix::from_element(1, 1, 0.25),
        )
        .unwrap();
        // 0.5 ln((9*2 + 0.25)/0.25)
        let expected = 0.5 * (18.25f64 / 0.25).ln();
        assert_abs_diff_eq!(spec.information_gain().unwrap(), expected, epsilon = 1e-14);
    }

    #[test]
    fn degenerate_tempering_gives_uniform_weights() {
        // With all tempering mass on observation i, target and proposal are
        // identical, so every normalized weight is exactly 1/J.
        let noise = DMatrix::from_element(1, 1, 0.3);
        let outer = OuterSet::homoskedastic(
            vec![DVector::from_element(1, 0.4), DVector::from_element(1, -1.1)],
            vec![DVector::from_element(1, 0.0), DVector::from_element(1, 0.0)],
            noise,
        )
        .unwrap();
        let weights = PoolingWeights::new(vec![1.0, 0.0]).unwrap();
        let prior = Gaussian::scalar(0.0, 1.0).unwrap();
        let thetas = DMatrix::from_row_slice(4, 1, &[0.1, -0.2, 0.5, 1.3]);
        let preds = thetas.clone() * 2.0;
        let w = snis_bruteforce(&prior, &outer, &weights, 0, &thetas, &preds).unwrap();
        for &v in w.iter() {
            assert_abs_diff_eq!(v, 0.25, epsilon = 1e-14);
        }
    }

    #[test]
    fn fd_gradient_is_exact_on_quadratics() {
        let f = |x: &DVector<f64>| Ok(x[0] * x[0] + 3.0 * x[0] * x[1] - x[1]);
        let x = DVector::from_row_slice(&[1.5, -0.5]);
        let g = fd_gradient(f, &x, 1e-4).unwrap();
        // Central differences are exact on quadratics up to round-off.
        assert_abs_diff_eq!(g[0], 2.0 * 1.5 + 3.0 * -0.5, epsilon = 1e-9);
        assert_abs_diff_eq!(g[1], 3.0 * 1.5 - 1.0, epsilon = 1e-9);
    }

    /// Random well-conditioned spec of the given dimensions.
    fn random_spec(seed: u64, d_theta: usize, d_y: usize) -> ConjugateSpec {
        let stream = crate::stats::RngStream::new(seed, 41);
        let z = stream.standard_normals(d_theta * d_theta + d_y * d_theta + d_y * d_y + d_theta);
        let mut at = 0;
        let mut take = |n: usize| {
            let s: Vec<f64> = z.as_slice()[at..at + n].to_vec();
            at += n;
            s
        };
        let g = DMatrix::from_row_slice(d_theta, d_theta, &take(d_theta * d_theta));
        let c0 = &g * g.transpose() + DMatrix::identity(d_theta, d_theta) * 0.3;
        let a = DMatrix::from_row_slice(d_y, d_theta, &take(d_y * d_theta));
        let h = DMatrix::from_row_slice(d_y, d_y, &take(d_y * d_y));
        let noise = &h * h.transpose() + DMatrix::identity(d_y, d_y) * 0.2;
        let mean = DVector::from_row_slice(&take(d_theta));
        ConjugateSpec::new(Gaussian::new(mean, c0).unwrap(), a, noise).unwrap()
    }

    #[test]
    fn posterior_never_exceeds_prior_in_loewner_order() {
        for seed in 0..8 {
            let spec = random_spec(seed, 3, 2);
            let y = DVector::from_row_slice(&[0.7, -1.3]);
            let post = spec.posterior(&y).unwrap();
            let gap = spec.prior.cov() - post.cov();
            let sym = 0.5 * (&gap + gap.transpose());
            let min_eig = sym
                .symmetric_eigenvalues()
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min);
            assert!(min_eig >= -1e-10, "seed {seed}: min eigenvalue {min_eig}");
        }
    }

    #[test]
    fn pooled_closed_form_matches_hand_scalar_update() {
        // Observations {1, 3} with uniform tempering collapse to a single
        // unit-noise observation of 2; prior N(0,1) then gives N(1, 1/2).
        let spec = ConjugateSpec::new(
            Gaussian::scalar(0.0, 1.0).unwrap(),
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
        )
        .unwrap();
        let outer = OuterSet::homoskedastic(
            vec![DVector::from_element(1, 1.0), DVector::from_element(1, 3.0)],
            vec![DVector::zeros(1); 2],
            DMatrix::identity(1, 1),
        )
        .unwrap();
        let post = spec
            .pooled_posterior(&outer, &PoolingWeights::uniform(2).unwrap())
            .unwrap();
        assert_abs_diff_eq!(post.mean()[0], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(post.cov()[(0, 0)], 0.5, epsilon = 1e-14);

        // A single observation with full weight reduces to the plain update.
        let single = OuterSet::homoskedastic(
            vec![DVector::from_element(1, 2.0)],
            vec![DVector::zeros(1)],
            DMatrix::identity(1, 1),
        )
        .unwrap();
        let one = spec
            .pooled_posterior(&single, &PoolingWeights::uniform(1).unwrap())
            .unwrap();
        let direct = spec.posterior(&DVector::from_element(1, 2.0)).unwrap();
        assert_abs_diff_eq!(one.mean()[0], direct.mean()[0], epsilon = 1e-14);
        assert_abs_diff_eq!(one.cov()[(0, 0)], direct.cov()[(0, 0)], epsilon = 1e-14);
    }

    #[test]
    fn pooled_closed_form_equals_sequential_stacked_assimilation() {
        // Assimilating each observation on its own with covariance S_i/nu_i
        // must land on the same posterior as the one-shot pooled update.
        let stream = crate::stats::RngStream::new(77, 42);
        for trial in 0..6 {
            let spec = random_spec(100 + trial, 2, 2);
            let nu_raw: Vec<f64> = (0..4).map(|k| 0.1 + 0.2 * ((trial + k as u64) % 5) as f64).collect();
            let total: f64 = nu_raw.iter().sum();
            let weights = PoolingWeights::new(nu_raw.iter().map(|v| v / total).collect()).unwrap();
            let z = stream.substream(trial).standard_normals(4 * 2);
            let ys: Vec<DVector<f64>> = (0..4)
                .map(|i| DVector::from_row_slice(&z.as_slice()[2 * i..2 * i + 2]))
                .collect();
            let outer = OuterSet::homoskedastic(
                ys.clone(),
                vec![DVector::zeros(2); 4],
                spec.noise_cov.clone(),
            )
            .unwrap();

            let pooled = spec.pooled_posterior(&outer, &weights).unwrap();

            let mut running = spec.prior.clone();
            for (i, y) in ys.iter().enumerate() {
                let scaled = &spec.noise_cov / weights.get(i);
                running = linear_posterior(&running, &spec.a, &scaled, y).unwrap();
            }
            assert!((pooled.mean() - running.mean()).amax() < 1e-10);
            assert!((pooled.cov() - running.cov()).amax() < 1e-10);
        }
    }
}
