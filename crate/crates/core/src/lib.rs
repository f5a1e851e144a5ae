//! Pooled-posterior machinery for simulation-based sequential experimental design.
//!
//! The crate is organized around one estimation pipeline: synthetic outer
//! observations are pooled into a single geometric tempered likelihood, an
//! ensemble Kalman update turns a prior ensemble into a cheap proposal for the
//! per-observation posteriors, self-normalized importance weights correct the
//! proposal, and the resulting weighted scores drive gradient ascent on the
//! expected information gain of a measurement design. A conservative effective
//! sample size diagnostic decides when one shared proposal is not enough and
//! splits the outer observations into clusters, each served by its own pooled
//! proposal at no additional forward-solve cost.
//!
//! Modules:
//! - [`stats`]: Gaussians, ensembles, seeded RNG streams, KL and Wasserstein
//!   distances between Gaussians.
//! - [`forward`]: forward-model abstraction plus the concrete models (linear
//!   maps, a 2D convection-diffusion solver, a tiny MLP source correction) and
//!   the forward-solve counter every cost claim is audited against.
//! - [`pooling`]: pooled observations, tempering weights, stacked covariances.
//! - [`eki`]: ensemble statistics and Kalman updates (pooled mean-observation
//!   form and the stacked verification form), including per-group updates.
//! - [`importance`]: SNIS weights, ESS estimators, and ESS-guided grouping.
//! - [`eig`]: information-gain values and the grouped score-based design
//!   gradient estimator with its variance-study harness.
//! - [`sequential`]: the staged calibration loop (physical design on a belief
//!   grid, error-parameter design via the gradient pipeline, history refits).
//! - [`oracle`]: closed-form conjugate references and brute-force recomputations
//!   used to test the estimation paths.

pub mod eig;
pub mod eki;
mod error;
pub mod forward;
pub mod importance;
mod linalg;
pub mod oracle;
pub mod pooling;
pub mod sequential;
pub mod stats;

pub use error::CoreError;

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, CoreError>;
