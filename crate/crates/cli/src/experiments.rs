//! The four experiment drivers. Each writes its result files into the run
//! directory and returns the total counted forward solves.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde_json::json;

use poolbed_core::eig::{estimate_grad_std, prepare_outer, DesignBox, GroupingMode, ReseedPolicy};
use poolbed_core::eki::{update, EkiStats, EkiTarget};
use poolbed_core::forward::{
    solve_batch, AdvectionScheme, EvalCounter, ForwardModel, PdeConfig, SourceParams,
};
use poolbed_core::importance::{make_grouping, GroupingConfig};
use poolbed_core::oracle::ConjugateSpec;
use poolbed_core::pooling::{make_pooled, OuterSet, PoolingWeights};
use poolbed_core::sequential::{stage_time, ErrorModelKind, SeqConfig, SeqRunner};
use poolbed_core::stats::{ensemble_mean_cov, gaussian_w2, sample_gaussian, Gaussian, RngStream};

use crate::config::{Family, RunConfig};
use crate::emit::{fmt, write_csv, write_json};
use crate::Failure;

/// Assemble the library-side configuration; failures here are config
/// mistakes, not numerical ones.
fn seq_config(cfg: &RunConfig, kind: ErrorModelKind) -> Result<SeqConfig, Failure> {
    let map_cfg = |e: poolbed_core::CoreError| Failure::Config(format!("config rejected: {e}"));
    let truth = SourceParams {
        x: cfg.truth.x,
        y: cfg.truth.y,
        width: cfg.truth.width,
        strength: cfg.truth.strength,
    };
    let mut out = SeqConfig::defaults(kind, truth).map_err(map_cfg)?;
    out.pde = PdeConfig {
        nx: cfg.pde.nx,
        ny: cfg.pde.ny,
        lo: cfg.pde.lo,
        hi: cfg.pde.hi,
        diffusion: cfg.pde.diffusion,
        velocity_scale: cfg.pde.velocity_scale,
        t_end: stage_time(cfg.sequential.stages),
        cfl: 0.9,
        scheme: AdvectionScheme::Central,
    };
    out.model_strength = cfg.truth.model_strength;
    out.belief_nx = cfg.sequential.belief_nx;
    out.belief_ny = cfg.sequential.belief_ny;
    out.design_box = DesignBox::new(
        DVector::from_row_slice(&cfg.design.lo),
        DVector::from_row_slice(&cfg.design.hi),
    )
    .map_err(map_cfg)?;
    out.candidate_nx = cfg.sequential.candidate_nx;
    out.candidate_ny = cfg.sequential.candidate_ny;
    out.noise_var = cfg.sequential.noise_var;
    out.n_outer = cfg.samples.n_outer;
    out.n_inner = cfg.samples.n_inner;
    out.grouping = GroupingConfig {
        threshold: None,
        k: cfg.samples.k_groups,
        trigger_fraction: cfg.samples.trigger_fraction,
    };
    if let Some(se) = cfg.sequential.sigma_e {
        out.sigma_e = se;
    }
    out.ascent_steps = cfg.sequential.ascent_steps;
    out.ascent_step = cfg.sequential.ascent_step;
    out.train_steps = cfg.sequential.train_steps;
    out.train_step = cfg.sequential.train_step;
    out.relinearize_every = cfg.sequential.relinearize_every;
    Ok(out)
}

fn initial_theta(cfg: &RunConfig, kind: ErrorModelKind) -> DVector<f64> {
    match kind {
        ErrorModelKind::Parametric => DVector::from_element(1, cfg.truth.init_strength),
        ErrorModelKind::Structural => DVector::zeros(37),
    }
}

/// Sequential parametric or structural run: per-stage reports, posterior
/// grids, a stage summary, and a long-format cost ledger whose solve
/// column sums to the counter total.
pub fn run_sequential(cfg: &RunConfig, kind: ErrorModelKind, out: &Path, seed: u64, threads: usize) -> Result<u64, Failure> {
    let mut config = seq_config(cfg, kind)?;
    config.threads = threads;
    let runner = SeqRunner::new(config).map_err(|e| Failure::Config(format!("config rejected: {e}")))?;
    let mut state = runner
        .initial_state(initial_theta(cfg, kind))
        .map_err(|e| Failure::Config(format!("config rejected: {e}")))?;
    let counter = EvalCounter::new();
    let stream = RngStream::new(seed, 0);

    let mut reports = Vec::new();
    for n in 1..=cfg.sequential.stages {
        let report = runner.run_stage(&mut state, &stream.substream(n as u64), &counter)?;
        write_json(&out.join(format!("stage_{n:02}.json")), &report)?;
        let belief = &state.belief;
        let probs = belief.posterior();
        write_csv(
            &out.join(format!("posterior_stage_{n:02}.csv")),
            &["x", "y", "probability"],
            (0..belief.len()).map(|m| {
                let (x, y) = belief.node(m);
                vec![fmt(x), fmt(y), fmt(probs[m])]
            }),
        )?;
        reports.push(report);
    }

    write_csv(
        &out.join("stages.csv"),
        &[
            "stage",
            "time_s",
            "d_g_x",
            "d_g_y",
            "y_g",
            "map_x",
            "map_y",
            "d_e_x",
            "d_e_y",
            "y_e",
            "theta_e_first",
            "theta_e_norm",
            "field_rel_err",
            "fraction_problematic",
            "n_groups",
            "mean_realized_ess",
        ],
        reports.iter().map(|r| {
            let norm = r.theta_e.iter().map(|v| v * v).sum::<f64>().sqrt();
            vec![
                r.stage.to_string(),
                fmt(r.time),
                fmt(r.d_g[0]),
                fmt(r.d_g[1]),
                fmt(r.y_g),
                fmt(r.map_g[0]),
                fmt(r.map_g[1]),
                fmt(r.d_e[0]),
                fmt(r.d_e[1]),
                fmt(r.y_e),
                fmt(r.theta_e[0]),
                fmt(norm),
                fmt(r.field_rel_err),
                fmt(r.fraction_problematic),
                r.n_groups.to_string(),
                fmt(r.mean_realized_ess),
            ]
        }),
    )?;

    // Structural runs also tabulate the gradient spread with and without
    // grouping at matched proposal budgets.
    let mut ledger: Vec<(String, String, u64)> = Vec::new();
    for r in &reports {
        let block = format!("stage_{:02}", r.stage);
        ledger.push((block.clone(), "physical_scan".into(), r.cost.physical_scan));
        ledger.push((block.clone(), "observation".into(), r.cost.observation));
        ledger.push((block.clone(), "error_design".into(), r.cost.error_design));
        ledger.push((block.clone(), "error_update".into(), r.cost.error_update));
        ledger.push((block, "refit".into(), r.cost.refit));
    }
    if kind == ErrorModelKind::Structural {
        let study_costs = grad_spread_table(cfg, &runner, out, seed, threads, &counter)?;
        for (label, solves) in study_costs {
            ledger.push(("grad_spread".into(), label, solves));
        }
    }

    let total = counter.count();
    let ledger_sum: u64 = ledger.iter().map(|(_, _, s)| s).sum();
    if ledger_sum != total {
        return Err(Failure::Numerical(poolbed_core::CoreError::InvalidParameter {
            name: "cost ledger",
            reason: format!("ledger sum {ledger_sum} disagrees with counter {total}"),
        }));
    }
    let mut rows: Vec<Vec<String>> = ledger
        .iter()
        .map(|(b, c, s)| vec![b.clone(), c.clone(), s.to_string()])
        .collect();
    rows.push(vec!["all".into(), "total".into(), total.to_string()]);
    write_csv(&out.join("cost_ledger.csv"), &["block", "category", "solves"], rows)?;
    Ok(total)
}

/// Per-component gradient standard deviation across reseeds: one proposal
/// at J, one proposal at K*J, and K grouped proposals at J each.
fn grad_spread_table(
    cfg: &RunConfig,
    runner: &SeqRunner,
    out: &Path,
    seed: u64,
    threads: usize,
    counter: &EvalCounter,
) -> Result<Vec<(String, u64)>, Failure> {
    let c = runner.config();
    let em = runner.error_model(&[cfg.truth.x, cfg.truth.y])?;
    let prior = Gaussian::isotropic(DVector::zeros(37), c.sigma_e * c.sigma_e)?;
    let t1 = stage_time(1);
    let stream = RngStream::new(seed, 90);
    let d = 0.5 * (&c.design_box.lo + &c.design_box.hi);
    let weights = PoolingWeights::uniform(c.n_outer)?;
    let j = c.n_inner;
    let kj = c.grouping.k * c.n_inner;

    let before = counter.count();
    let prep = prepare_outer(&em, &prior, c.n_outer, t1, c.noise_var, &stream.substream(0), counter, threads)?;
    let prep_cost = counter.count() - before;

    let ens_j = sample_gaussian(&prior, j, &stream.substream(1))?;
    let ens_kj = sample_gaussian(&prior, kj, &stream.substream(2))?;
    let repeats = cfg.samples.reseeds;

    let before = counter.count();
    let single_j = estimate_grad_std(
        &em, &prep, &d, &weights, &ens_j, GroupingMode::Trivial, ReseedPolicy::Perturbations, repeats, &stream.substream(3), counter, threads,
    )?;
    let single_j_cost = counter.count() - before;

    let before = counter.count();
    let single_kj = estimate_grad_std(
        &em, &prep, &d, &weights, &ens_kj, GroupingMode::Trivial, ReseedPolicy::Perturbations, repeats, &stream.substream(4), counter, threads,
    )?;
    let single_kj_cost = counter.count() - before;

    let before = counter.count();
    let grouped = estimate_grad_std(
        &em, &prep, &d, &weights, &ens_j, GroupingMode::Auto(&c.grouping), ReseedPolicy::Perturbations, repeats, &stream.substream(5), counter, threads,
    )?;
    let grouped_cost = counter.count() - before;

    write_csv(
        &out.join("grad_spread.csv"),
        &[
            "component",
            "std_single_j_nats",
            "std_single_kj_nats",
            "std_grouped_kj_nats",
            "ratio_grouped_over_single_kj",
        ],
        (0..d.len()).map(|i| {
            let ratio = grouped.component_std[i] / single_kj.component_std[i];
            vec![
                i.to_string(),
                fmt(single_j.component_std[i]),
                fmt(single_kj.component_std[i]),
                fmt(grouped.component_std[i]),
                fmt(ratio),
            ]
        }),
    )?;
    write_json(
        &out.join("grad_spread_meta.json"),
        &json!({
            "repeats": repeats,
            "inner_single_j": j,
            "inner_single_kj": kj,
            "grouped_groups": grouped.grouping.groups.len(),
            "grouped_fraction_problematic": grouped.grouping.report.fraction_problematic,
            "mean_realized_ess_single_j": single_j.mean_realized_ess,
            "mean_realized_ess_grouped": grouped.mean_realized_ess,
        }),
    )?;
    Ok(vec![
        ("outer_prep".into(), prep_cost),
        ("single_j".into(), single_j_cost),
        ("single_kj".into(), single_kj_cost),
        ("grouped_kj".into(), grouped_cost),
    ])
}

/// Proposal diagnostics without paying for proposals: N outer solves, J
/// inner solves, then conservative ESS screening and grouping only.
pub fn run_diagnostics(cfg: &RunConfig, out: &Path, seed: u64, threads: usize) -> Result<u64, Failure> {
    let kind = match cfg.diagnostics.family {
        Family::Parametric => ErrorModelKind::Parametric,
        Family::Structural => ErrorModelKind::Structural,
    };
    let mut config = seq_config(cfg, kind)?;
    config.threads = threads;
    let runner = SeqRunner::new(config).map_err(|e| Failure::Config(format!("config rejected: {e}")))?;
    let c = runner.config();
    let em = runner.error_model(&[cfg.truth.x, cfg.truth.y])?;
    let theta0 = initial_theta(cfg, kind);
    let prior = Gaussian::isotropic(theta0, c.sigma_e * c.sigma_e)?;
    let t1 = stage_time(1);
    let counter = EvalCounter::new();
    let stream = RngStream::new(seed, 0);

    let prep = prepare_outer(&em, &prior, c.n_outer, t1, c.noise_var, &stream.substream(12), &counter, threads)?;
    let ens = sample_gaussian(&prior, c.n_inner, &stream.substream(13))?;
    let sols = solve_batch(&em, &ens.members, t1, &counter, threads)?;
    let expected = (c.n_outer + c.n_inner) as u64;
    if counter.count() != expected {
        return Err(Failure::Numerical(poolbed_core::CoreError::InvalidParameter {
            name: "diagnostics cost",
            reason: format!("expected {expected} solves, counted {}", counter.count()),
        }));
    }

    let d = 0.5 * (&c.design_box.lo + &c.design_box.hi);
    let preds = sols.measure_all(&d)?;
    let stats = EkiStats::from_parts(&ens.members, &preds)?;
    let weights = PoolingWeights::uniform(c.n_outer)?;
    let outer = prep.outer_set_at(&d)?;
    let pooled = make_pooled(&outer, &weights)?;
    let grouping = make_grouping(&outer, &weights, &pooled, &stats.pred_cov, c.n_inner, em.param_dim(), &c.grouping)?;

    let group_of = |idx: usize| -> i64 {
        for (g, members) in grouping.groups.iter().enumerate() {
            if members.contains(&idx) {
                return g as i64;
            }
        }
        -1
    };
    write_csv(
        &out.join("ess.csv"),
        &["sample", "ess_conservative", "problematic", "group"],
        grouping.report.entries.iter().map(|e| {
            vec![
                e.index.to_string(),
                fmt(e.ess_conservative),
                (e.problematic as u8).to_string(),
                group_of(e.index).to_string(),
            ]
        }),
    )?;

    // Histogram of conservative ESS over [0, J].
    let bins = 20usize;
    let width = c.n_inner as f64 / bins as f64;
    let mut counts = vec![0u64; bins];
    for e in &grouping.report.entries {
        let b = ((e.ess_conservative / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    write_csv(
        &out.join("ess_histogram.csv"),
        &["bin_lo", "bin_hi", "count"],
        counts.iter().enumerate().map(|(b, n)| {
            vec![fmt(b as f64 * width), fmt((b + 1) as f64 * width), n.to_string()]
        }),
    )?;
    write_json(&out.join("grouping.json"), &grouping)?;
    Ok(counter.count())
}

/// Scalar linear-Gaussian toy: every quantity also has a closed form, so
/// the run emits oracle-vs-sampled posteriors and the distance scatter
/// between individual, pooled, and prior beliefs.
pub fn run_linear_toy(cfg: &RunConfig, out: &Path, seed: u64) -> Result<u64, Failure> {
    let t = &cfg.toy;
    let prior = Gaussian::scalar(t.prior_mean, t.prior_var)?;
    let a = DMatrix::from_element(1, 1, t.slope);
    let noise = DMatrix::from_element(1, 1, t.noise_var);
    let spec = ConjugateSpec::new(prior.clone(), a.clone(), noise.clone())?;
    let stream = RngStream::new(seed, 0);

    // Outer campaigns: parameters from the prior, observations through the
    // forward map.
    let thetas = sample_gaussian(&prior, t.n_obs, &stream.substream(0))?;
    let eps = stream.substream(1).standard_normals(t.n_obs);
    let mut ys = Vec::with_capacity(t.n_obs);
    let mut theta_vecs = Vec::with_capacity(t.n_obs);
    for i in 0..t.n_obs {
        let th = thetas.members[(i, 0)];
        ys.push(DVector::from_element(1, t.slope * th + t.noise_var.sqrt() * eps[i]));
        theta_vecs.push(DVector::from_element(1, th));
    }
    let outer = OuterSet::homoskedastic(ys.clone(), theta_vecs, noise.clone())?;
    let weights = PoolingWeights::uniform(t.n_obs)?;
    let pooled = make_pooled(&outer, &weights)?;
    let pooled_post = spec.pooled_posterior(&outer, &weights)?;

    // Individual posteriors against the pooled posterior and the prior.
    let mut scatter = Vec::with_capacity(t.n_obs);
    let mut posts = Vec::with_capacity(t.n_obs);
    for (i, y) in ys.iter().enumerate() {
        let post = spec.posterior(y)?;
        scatter.push(vec![
            i.to_string(),
            fmt(gaussian_w2(&post, &pooled_post)?),
            fmt(gaussian_w2(&post, &prior)?),
        ]);
        posts.push(post);
    }
    write_csv(
        &out.join("distance_scatter.csv"),
        &["sample", "w2_to_pooled_theta", "w2_to_prior_theta"],
        scatter,
    )?;

    // Sampled Kalman updates against the conjugate oracle, one ensemble per
    // observation plus the pooled case; the perturbed-observation update
    // targets the exact posterior, so the deviation column shows pure
    // finite-ensemble error.
    let mut rows = Vec::with_capacity(t.n_obs + 1);
    let case = |label: String, target: EkiTarget, oracle: &Gaussian, tag: u64| -> Result<Vec<String>, Failure> {
        let mut ens = sample_gaussian(&prior, t.ensemble, &stream.substream(100 + tag))?;
        let preds = &ens.members * a.transpose();
        ens.predictions = Some(preds.clone());
        let stats = EkiStats::from_parts(&ens.members, &preds)?;
        let updated = update(&ens, &stats, target, Some(&stream.substream(200 + tag)))?;
        let (mean, cov) = ensemble_mean_cov(&updated)?;
        let dev = (mean[0] - oracle.mean()[0])
            .abs()
            .max((cov[(0, 0)] - oracle.cov()[(0, 0)]).abs());
        Ok(vec![
            label,
            fmt(oracle.mean()[0]),
            fmt(mean[0]),
            fmt(oracle.cov()[(0, 0)]),
            fmt(cov[(0, 0)]),
            fmt(dev),
        ])
    };
    for (i, y) in ys.iter().enumerate() {
        let single = poolbed_core::pooling::PooledObservation {
            y: y.clone(),
            cov: noise.clone(),
        };
        rows.push(case(format!("sample_{i:02}"), EkiTarget::Pooled(&single), &posts[i], i as u64)?);
    }
    rows.push(case("pooled".into(), EkiTarget::Pooled(&pooled), &pooled_post, t.n_obs as u64)?);
    write_csv(
        &out.join("oracle_vs_eki.csv"),
        &[
            "case",
            "mean_oracle",
            "mean_eki",
            "var_oracle",
            "var_eki",
            "max_abs_deviation",
        ],
        rows,
    )?;
    // No field solves in the toy.
    Ok(0)
}
