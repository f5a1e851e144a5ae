//! Strict TOML run configuration. Unknown keys are rejected everywhere so a
//! typo cannot silently fall back to a default.

use std::path::PathBuf;

use serde::Deserialize;

use crate::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Parametric,
    Structural,
    LinearToy,
    Diagnostics,
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::Parametric => "parametric",
            Experiment::Structural => "structural",
            Experiment::LinearToy => "linear-toy",
            Experiment::Diagnostics => "diagnostics",
        }
    }
}

/// Model family a diagnostics pass conditions on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Parametric,
    Structural,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub seed: u64,
    /// Output directory; `--out` overrides.
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub samples: Samples,
    #[serde(default)]
    pub pde: Pde,
    #[serde(default)]
    pub sequential: Sequential,
    #[serde(default)]
    pub design: Design,
    #[serde(default)]
    pub truth: Truth,
    #[serde(default)]
    pub toy: Toy,
    #[serde(default)]
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Samples {
    /// Outer observation campaigns N.
    pub n_outer: usize,
    /// Inner proposal ensemble size J.
    pub n_inner: usize,
    /// Cluster count K for problematic observations.
    pub k_groups: usize,
    /// Problematic fraction at or below which grouping is skipped.
    pub trigger_fraction: f64,
    /// Repeats for the gradient-spread table (structural runs).
    pub reseeds: usize,
}

impl Default for Samples {
    fn default() -> Self {
        Self {
            n_outer: 180,
            n_inner: 180,
            k_groups: 3,
            trigger_fraction: 0.05,
            reseeds: 5,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Pde {
    pub nx: usize,
    pub ny: usize,
    pub lo: f64,
    pub hi: f64,
    pub diffusion: f64,
    pub velocity_scale: f64,
}

impl Default for Pde {
    fn default() -> Self {
        Self {
            nx: 64,
            ny: 64,
            lo: -3.0,
            hi: 2.0,
            diffusion: 1.0,
            velocity_scale: 50.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Sequential {
    pub stages: usize,
    pub belief_nx: usize,
    pub belief_ny: usize,
    pub candidate_nx: usize,
    pub candidate_ny: usize,
    pub noise_var: f64,
    /// Error-prior spread; the family default applies when absent.
    pub sigma_e: Option<f64>,
    pub ascent_steps: usize,
    pub ascent_step: f64,
    pub train_steps: usize,
    pub train_step: f64,
    pub relinearize_every: usize,
}

impl Default for Sequential {
    fn default() -> Self {
        Self {
            stages: 3,
            belief_nx: 50,
            belief_ny: 50,
            candidate_nx: 10,
            candidate_ny: 10,
            noise_var: 0.0025,
            sigma_e: None,
            ascent_steps: 10,
            ascent_step: 0.02,
            train_steps: 200,
            train_step: 0.05,
            relinearize_every: 50,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Design {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
}

impl Default for Design {
    fn default() -> Self {
        Self {
            lo: [0.0, 0.0],
            hi: [1.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Truth {
    /// True source location and shape.
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub strength: f64,
    /// Strength the structural model fixes.
    pub model_strength: f64,
    /// Initial strength guess of the parametric error model.
    pub init_strength: f64,
}

impl Default for Truth {
    fn default() -> Self {
        Self {
            x: 0.3,
            y: 0.4,
            width: 0.2,
            strength: 2.0,
            model_strength: 2.0,
            init_strength: 3.0,
        }
    }
}

/// Scalar linear-Gaussian toy for oracle comparisons.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Toy {
    pub slope: f64,
    pub prior_mean: f64,
    pub prior_var: f64,
    pub noise_var: f64,
    /// Outer observations S.
    pub n_obs: usize,
    /// Ensemble size for the sampled updates.
    pub ensemble: usize,
}

impl Default for Toy {
    fn default() -> Self {
        Self {
            slope: 1.0,
            prior_mean: 0.0,
            prior_var: 4.0,
            noise_var: 1.0,
            n_obs: 50,
            ensemble: 4096,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Diagnostics {
    pub family: Family,
}

impl Default for Diagnostics {
    fn default() -> Self {
        Self {
            family: Family::Parametric,
        }
    }
}

impl RunConfig {
    pub fn parse(raw: &str) -> Result<Self, Failure> {
        let config: RunConfig =
            toml::from_str(raw).map_err(|e| Failure::Config(format!("config parse error: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<(), Failure> {
        let bad = |what: &str, detail: String| Err(Failure::Config(format!("{what}: {detail}")));
        let s = &self.samples;
        if s.n_outer == 0 || s.n_inner == 0 || s.k_groups == 0 {
            return bad(
                "samples",
                format!(
                    "n_outer, n_inner, k_groups must be at least 1 (got {}, {}, {})",
                    s.n_outer, s.n_inner, s.k_groups
                ),
            );
        }
        if !(0.0..=1.0).contains(&s.trigger_fraction) {
            return bad("samples", format!("trigger_fraction {} not in [0, 1]", s.trigger_fraction));
        }
        if s.reseeds < 5 {
            return bad("samples", format!("reseeds {} below the spread-estimate minimum of 5", s.reseeds));
        }
        if self.pde.nx < 4 || self.pde.ny < 4 {
            return bad("pde", format!("grid {}x{} too coarse", self.pde.nx, self.pde.ny));
        }
        if !(self.pde.lo < self.pde.hi) {
            return bad("pde", format!("domain corners {} >= {}", self.pde.lo, self.pde.hi));
        }
        if self.pde.diffusion <= 0.0 {
            return bad("pde", format!("diffusion {} must be positive", self.pde.diffusion));
        }
        let q = &self.sequential;
        if q.stages == 0 {
            return bad("sequential", "stages must be at least 1".into());
        }
        if q.belief_nx < 2 || q.belief_ny < 2 || q.candidate_nx < 2 || q.candidate_ny < 2 {
            return bad("sequential", "belief and candidate grids need at least 2 nodes per axis".into());
        }
        if q.noise_var <= 0.0 {
            return bad("sequential", format!("noise_var {} must be positive", q.noise_var));
        }
        if let Some(se) = q.sigma_e {
            if se <= 0.0 {
                return bad("sequential", format!("sigma_e {se} must be positive"));
            }
        }
        if !(self.design.lo[0] < self.design.hi[0] && self.design.lo[1] < self.design.hi[1]) {
            return bad("design", "box corners must be ordered".into());
        }
        if self.truth.width <= 0.0 {
            return bad("truth", format!("width {} must be positive", self.truth.width));
        }
        let t = &self.toy;
        if t.n_obs == 0 {
            return bad("toy", "n_obs must be at least 1".into());
        }
        if t.ensemble < 2 {
            return bad("toy", format!("ensemble {} below the minimum of 2", t.ensemble));
        }
        if t.prior_var <= 0.0 || t.noise_var <= 0.0 {
            return bad("toy", "prior_var and noise_var must be positive".into());
        }
        Ok(())
    }
}
