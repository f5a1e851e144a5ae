//! Gaussian distributions, sample ensembles, and seeded randomness.
//!
//! Every stochastic operation in the crate draws from a [`RngStream`]: a
//! (seed, stream) pair backed by a counter-based generator, so a run is
//! reproducible bit-for-bit from its seed and each consumer owns a private
//! stream. Substreams are derived by hashing, which lets nested components
//! (per-stage, per-group, per-repeat) allocate disjoint streams without
//! central coordination.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::linalg;
use crate::{CoreError, Result};

/// A multivariate normal distribution with validated covariance.
///
/// Construction checks that the covariance is square, symmetric to 1e-12
/// relative tolerance, and positive semidefinite up to the crate's clipping
/// rule (eigenvalues above `-1e-10 * max(trace, 1)`).
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl Gaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != cov.ncols() {
            return Err(CoreError::NonSquare {
                rows: cov.nrows(),
                cols: cov.ncols(),
            });
        }
        if mean.len() != cov.nrows() {
            return Err(CoreError::DimensionMismatch {
                context: "Gaussian::new",
                expected: format!("mean of length {}", cov.nrows()),
                got: format!("length {}", mean.len()),
            });
        }
        if mean.iter().any(|v| !v.is_finite()) || cov.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::InvalidParameter {
                name: "gaussian",
                reason: "non-finite entry in mean or covariance".into(),
            });
        }
        let scale = cov.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        let asym = linalg::max_asymmetry(&cov);
        if asym > 1e-12 * scale {
            return Err(CoreError::NotSymmetric { max_asym: asym });
        }
        let tol = linalg::EIG_CLIP_REL * cov.trace().abs().max(1.0);
        let min_eig = cov
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .fold(f64::INFINITY, |m, v| m.min(*v));
        if min_eig < -tol {
            return Err(CoreError::NegativeEigenvalue {
                value: min_eig,
                tol,
            });
        }
        Ok(Self { mean, cov })
    }

    /// One-dimensional convenience constructor.
    pub fn scalar(mean: f64, var: f64) -> Result<Self> {
        Self::new(DVector::from_element(1, mean), DMatrix::from_element(1, 1, var))
    }

    /// Isotropic Gaussian with covariance `var * I`.
    pub fn isotropic(mean: DVector<f64>, var: f64) -> Result<Self> {
        let n = mean.len();
        Self::new(mean, DMatrix::identity(n, n) * var)
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// A collection of parameter samples, one row per member, with optional
/// forward predictions attached by the most recent batch evaluation.
#[derive(Debug, Clone)]
pub struct Ensemble {
    /// J x d_theta member matrix.
    pub members: DMatrix<f64>,
    /// J x d_y predictions at the design they were last evaluated for.
    pub predictions: Option<DMatrix<f64>>,
}

impl Ensemble {
    pub fn new(members: DMatrix<f64>) -> Result<Self> {
        if members.nrows() == 0 || members.ncols() == 0 {
            return Err(CoreError::DegenerateEnsemble {
                size: members.nrows(),
                context: "Ensemble::new",
            });
        }
        if members.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::InvalidParameter {
                name: "members",
                reason: "non-finite member entry".into(),
            });
        }
        Ok(Self {
            members,
            predictions: None,
        })
    }

    /// Number of members J.
    pub fn size(&self) -> usize {
        self.members.nrows()
    }

    /// Parameter dimension d_theta.
    pub fn dim(&self) -> usize {
        self.members.ncols()
    }

    /// Member `j` as a column vector.
    pub fn member(&self, j: usize) -> DVector<f64> {
        self.members.row(j).transpose()
    }
}

/// Sample mean and unbiased covariance (1/(J-1)) of an ensemble.
pub fn ensemble_mean_cov(ensemble: &Ensemble) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let j = ensemble.size();
    if j < 2 {
        return Err(CoreError::DegenerateEnsemble {
            size: j,
            context: "ensemble_mean_cov",
        });
    }
    Ok(mean_cov_of(&ensemble.members))
}

/// Column means and unbiased sample covariance of a row-per-sample matrix.
pub(crate) fn mean_cov_of(rows: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let j = rows.nrows();
    let d = rows.ncols();
    let mean = rows.row_mean().transpose();
    let mut centered = rows.clone();
    for i in 0..j {
        for k in 0..d {
            centered[(i, k)] -= mean[k];
        }
    }
    let cov = centered.transpose() * &centered / (j as f64 - 1.0);
    (mean, cov)
}

/// A reproducible randomness source: a base seed plus a stream id.
///
/// The same (seed, stream) always produces the same draws on every platform;
/// distinct stream ids produce statistically independent draws. Substreams
/// are derived by mixing a tag into the stream id, so consumers can fan out
/// without coordinating id ranges.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
    stream: u64,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Derive a child stream for consumer `tag`. Collisions between distinct
    /// (stream, tag) paths are as unlikely as 64-bit hash collisions.
    pub fn substream(&self, tag: u64) -> Self {
        Self {
            seed: self.seed,
            stream: splitmix64(self.stream ^ splitmix64(tag)),
        }
    }

    /// Instantiate the generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha12Rng {
        let mut rng = ChaCha12Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }

    /// Draw `n` standard normal variates.
    pub fn standard_normals(&self, n: usize) -> DVector<f64> {
        let mut rng = self.rng();
        DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
    }
}

/// Draw `n` members from a Gaussian into an ensemble.
///
/// The covariance factor comes from a symmetric eigendecomposition with the
/// clipping rule, so exactly semidefinite covariances are accepted. Draws are
/// member-major: member j consumes variates j*d..(j+1)*d of the stream.
pub fn sample_gaussian(g: &Gaussian, n: usize, stream: &RngStream) -> Result<Ensemble> {
    if n == 0 {
        return Err(CoreError::InvalidParameter {
            name: "n",
            reason: "sample count must be positive".into(),
        });
    }
    let d = g.dim();
    let factor = linalg::psd_factor(g.cov(), "sample_gaussian")?;
    let mut rng = stream.rng();
    let mut members = DMatrix::zeros(n, d);
    let mut z = DVector::zeros(d);
    for j in 0..n {
        for k in 0..d {
            z[k] = rng.sample(StandardNormal);
        }
        let x = g.mean() + &factor * &z;
        members.row_mut(j).copy_from(&x.transpose());
    }
    Ensemble::new(members)
}

/// KL divergence KL(p || q) between Gaussians, in nats.
///
/// Exactly zero when `p == q` (including semidefinite covariances); infinite
/// when `p` is singular but `q` is not, since `p` then fails absolute
/// continuity. Errors only when `q`'s covariance is not invertible.
pub fn gaussian_kl(p: &Gaussian, q: &Gaussian) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(CoreError::DimensionMismatch {
            context: "gaussian_kl",
            expected: format!("dimension {}", p.dim()),
            got: format!("dimension {}", q.dim()),
        });
    }
    if p == q {
        return Ok(0.0);
    }
    let chol_q = linalg::spd_cholesky(q.cov(), "gaussian_kl: q.cov")?;
    let n = p.dim() as f64;
    let trace_term = chol_q.solve(p.cov()).trace();
    let diff = q.mean() - p.mean();
    let mahal = diff.dot(&chol_q.solve(&diff));
    let logdet_q: f64 = chol_q.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    let logdet_p = match linalg::logdet_spd(p.cov(), "gaussian_kl: p.cov") {
        Ok(v) => v,
        Err(_) => return Ok(f64::INFINITY),
    };
    Ok(0.5 * (trace_term + mahal - n + logdet_q - logdet_p))
}

/// 2-Wasserstein distance between Gaussians (Bures metric on covariances).
///
/// Exactly zero when `p == q`; otherwise
/// `W2^2 = |m_p - m_q|^2 + tr(C_p + C_q - 2 (C_q^1/2 C_p C_q^1/2)^1/2)`.
pub fn gaussian_w2(p: &Gaussian, q: &Gaussian) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(CoreError::DimensionMismatch {
            context: "gaussian_w2",
            expected: format!("dimension {}", p.dim()),
            got: format!("dimension {}", q.dim()),
        });
    }
    if p == q {
        return Ok(0.0);
    }
    let mean_term = (p.mean() - q.mean()).norm_squared();
    let sqrt_q = linalg::psd_sqrt(q.cov(), "gaussian_w2: q.cov")?;
    let inner = &sqrt_q * p.cov() * &sqrt_q;
    let cross = linalg::psd_sqrt(&inner, "gaussian_w2: cross term")?;
    let bures = p.cov().trace() + q.cov().trace() - 2.0 * cross.trace();
    Ok((mean_term + bures.max(0.0)).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    const TOLERANCE: f64 = 1e-10;

    fn gaussian_2d() -> Gaussian {
        Gaussian::new(
            DVector::from_row_slice(&[1.0, -0.5]),
            DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.5]),
        )
        .unwrap()
    }

    #[test]
    fn constructor_rejects_asymmetric_cov() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.1, 1.0]);
        assert!(matches!(
            Gaussian::new(DVector::zeros(2), cov),
            Err(CoreError::NotSymmetric { .. })
        ));
    }

    #[test]
    fn constructor_rejects_indefinite_cov() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.1]);
        assert!(matches!(
            Gaussian::new(DVector::zeros(2), cov),
            Err(CoreError::NegativeEigenvalue { .. })
        ));
    }

    #[test]
    fn constructor_accepts_semidefinite_cov() {
        // Rank-one covariance: eigenvalues {2, 0}.
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(Gaussian::new(DVector::zeros(2), cov).is_ok());
    }

    #[test]
    fn kl_matches_scalar_closed_form() {
        let p = Gaussian::scalar(0.0, 1.0).unwrap();
        let q = Gaussian::scalar(0.0, 2.0).unwrap();
        // 0.5 * (1/2 - 1 + ln 2)
        assert_abs_diff_eq!(
            gaussian_kl(&p, &q).unwrap(),
            0.5 * (0.5 - 1.0 + 2.0f64.ln()),
            epsilon = TOLERANCE
        );
        let shifted = Gaussian::scalar(1.0, 1.0).unwrap();
        let std = Gaussian::scalar(0.0, 1.0).unwrap();
        assert_abs_diff_eq!(gaussian_kl(&shifted, &std).unwrap(), 0.5, epsilon = TOLERANCE);
    }

    #[test]
    fn kl_of_identical_is_exactly_zero() {
        let p = gaussian_2d();
        assert_eq!(gaussian_kl(&p, &p).unwrap(), 0.0);
        // Also for a semidefinite covariance where the general path would fail.
        let singular = Gaussian::new(
            DVector::zeros(2),
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]),
        )
        .unwrap();
        assert_eq!(gaussian_kl(&singular, &singular).unwrap(), 0.0);
    }

    #[test]
    fn w2_matches_scalar_closed_forms() {
        let p = Gaussian::scalar(0.0, 1.0).unwrap();
        let q = Gaussian::scalar(0.0, 4.0).unwrap();
        assert_abs_diff_eq!(gaussian_w2(&p, &q).unwrap(), 1.0, epsilon = TOLERANCE);
        let r = Gaussian::scalar(3.0, 1.0).unwrap();
        assert_abs_diff_eq!(gaussian_w2(&p, &r).unwrap(), 3.0, epsilon = TOLERANCE);
        assert_eq!(gaussian_w2(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn w2_is_symmetric() {
        let p = gaussian_2d();
        let q = Gaussian::new(
            DVector::from_row_slice(&[0.0, 0.2]),
            DMatrix::from_row_slice(2, 2, &[1.0, -0.2, -0.2, 0.8]),
        )
        .unwrap();
        assert_abs_diff_eq!(
            gaussian_w2(&p, &q).unwrap(),
            gaussian_w2(&q, &p).unwrap(),
            epsilon = TOLERANCE
        );
    }

    #[test]
    fn sampling_is_stream_deterministic() {
        let g = gaussian_2d();
        let stream = RngStream::new(7, 3);
        let a = sample_gaussian(&g, 64, &stream).unwrap();
        let b = sample_gaussian(&g, 64, &stream).unwrap();
        assert_eq!(a.members, b.members);
        let c = sample_gaussian(&g, 64, &RngStream::new(7, 4)).unwrap();
        assert_ne!(a.members, c.members);
    }

    #[test]
    fn substreams_are_deterministic_and_distinct() {
        let s = RngStream::new(11, 0);
        assert_eq!(s.substream(5), s.substream(5));
        assert_ne!(s.substream(5), s.substream(6));
        assert_ne!(s.substream(5).substream(1), s.substream(5).substream(2));
    }

    #[test]
    fn sample_moments_shrink_like_inverse_sqrt_j() {
        let g = gaussian_2d();
        // RMS moment error over several replicate streams per ensemble size;
        // each tenfold J should shrink the error by about sqrt(10).
        let err_at = |j: usize| -> f64 {
            let mut sq = 0.0;
            let reps = 8;
            for rep in 0..reps {
                let ens =
                    sample_gaussian(&g, j, &RngStream::new(1234, 10 * rep + j as u64)).unwrap();
                let (mean, cov) = ensemble_mean_cov(&ens).unwrap();
                sq += (mean - g.mean()).norm_squared() + (cov - g.cov()).norm_squared();
            }
            (sq / reps as f64).sqrt()
        };
        let e2 = err_at(100);
        let e3 = err_at(1000);
        let e4 = err_at(10_000);
        let expect = 10.0f64.sqrt();
        for ratio in [e2 / e3, e3 / e4] {
            assert!(
                ratio > expect / 2.0 && ratio < expect * 2.0,
                "convergence ratio {ratio} outside [sqrt(10)/2, 2 sqrt(10)]"
            );
        }
    }

    #[test]
    fn degenerate_ensemble_is_rejected() {
        let ens = Ensemble::new(DMatrix::from_row_slice(1, 2, &[0.0, 1.0])).unwrap();
        assert!(matches!(
            ensemble_mean_cov(&ens),
            Err(CoreError::DegenerateEnsemble { .. })
        ));
    }
}
