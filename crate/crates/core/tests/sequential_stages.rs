//! Stage-loop behavior on small grids: determinism, ledger exactness,
//! refit consistency, training sanity.

use approx::assert_abs_diff_eq;
use nalgebra::DVector;
use poolbed_core::forward::{EvalCounter, PdeConfig, SourceParams};
use poolbed_core::sequential::{BeliefGrid, ErrorModelKind, SeqConfig, SeqRunner, SeqState};
use poolbed_core::stats::RngStream;

fn small_config(kind: ErrorModelKind) -> SeqConfig {
    let truth = SourceParams {
        x: 0.3,
        y: 0.4,
        width: 0.2,
        strength: 2.0,
    };
    let mut config = SeqConfig::defaults(kind, truth).unwrap();
    config.pde = PdeConfig {
        nx: 32,
        ny: 32,
        t_end: 0.08,
        ..PdeConfig::default()
    };
    config.belief_nx = 6;
    config.belief_ny = 6;
    config.candidate_nx = 3;
    config.candidate_ny = 3;
    config.n_outer = 8;
    config.n_inner = 8;
    config.ascent_steps = 3;
    config.train_steps = 40;
    config
}

fn initial_theta(kind: ErrorModelKind) -> DVector<f64> {
    match kind {
        ErrorModelKind::Parametric => DVector::from_element(1, 3.0),
        ErrorModelKind::Structural => DVector::zeros(37),
    }
}

#[test]
fn stages_are_deterministic_and_thread_count_invariant() {
    let mut reports = Vec::new();
    let mut posts = Vec::new();
    for threads in [1usize, 2] {
        let mut config = small_config(ErrorModelKind::Parametric);
        config.threads = threads;
        let runner = SeqRunner::new(config).unwrap();
        let mut state = runner.initial_state(initial_theta(ErrorModelKind::Parametric)).unwrap();
        let counter = EvalCounter::new();
        let stream = RngStream::new(4242, 7);
        let r1 = runner.run_stage(&mut state, &stream.substream(1), &counter).unwrap();
        let r2 = runner.run_stage(&mut state, &stream.substream(2), &counter).unwrap();
        reports.push((r1, r2));
        posts.push(state.belief.log_posterior().to_vec());
    }
    let (a1, a2) = &reports[0];
    let (b1, b2) = &reports[1];
    for (a, b) in [(a1, b1), (a2, b2)] {
        assert_eq!(a.d_g, b.d_g);
        assert_eq!(a.y_g, b.y_g);
        assert_eq!(a.d_e, b.d_e);
        assert_eq!(a.y_e, b.y_e);
        assert_eq!(a.theta_e, b.theta_e);
        assert_eq!(a.field_rel_err, b.field_rel_err);
        assert_eq!(a.cost.total(), b.cost.total());
    }
    assert_eq!(posts[0], posts[1]);
    // Stage times follow the published schedule.
    assert_abs_diff_eq!(a1.time, 0.055, epsilon = 1e-15);
    assert_abs_diff_eq!(a2.time, 0.06, epsilon = 1e-15);
}

#[test]
fn stage_cost_equals_counter_delta_with_exact_categories() {
    let config = small_config(ErrorModelKind::Parametric);
    let n = config.n_outer as u64;
    let j = config.n_inner as u64;
    let nodes = (config.belief_nx * config.belief_ny) as u64;
    let runner = SeqRunner::new(config).unwrap();
    let mut state = runner.initial_state(initial_theta(ErrorModelKind::Parametric)).unwrap();
    let counter = EvalCounter::new();
    let stream = RngStream::new(11, 0);
    let report = runner.run_stage(&mut state, &stream, &counter).unwrap();

    assert_eq!(report.cost.total(), counter.count());
    // Uniform belief: every node is solved for the scan and again for the
    // refit; the truth is solved once and its field reused for both
    // observations; the strength sensitivity costs one more solve.
    assert_eq!(report.cost.physical_scan, nodes);
    assert_eq!(report.cost.refit, nodes);
    assert_eq!(report.cost.observation, 1);
    assert_eq!(report.cost.error_update, 1);
    // Proposal construction is outer + inner + (proposals x inner).
    let extra = report.cost.error_design - n - j;
    assert_eq!(extra % j, 0);
    let proposals = extra / j;
    assert!((1..=4).contains(&proposals), "got {proposals} proposals");
}

#[test]
fn structural_stage_pays_grouped_proposal_cost() {
    let mut config = small_config(ErrorModelKind::Structural);
    config.train_steps = 10;
    config.relinearize_every = 0;
    let n = config.n_outer as u64;
    let j = config.n_inner as u64;
    let k = config.grouping.k as u64;
    let runner = SeqRunner::new(config).unwrap();
    let mut state = runner.initial_state(initial_theta(ErrorModelKind::Structural)).unwrap();
    let counter = EvalCounter::new();
    let stream = RngStream::new(5, 3);
    let report = runner.run_stage(&mut state, &stream, &counter).unwrap();

    // Eight effective samples cannot cover 37 parameters, so every outer
    // sample is problematic and the full grouped budget is paid.
    assert_eq!(report.n_groups, k as usize);
    assert_abs_diff_eq!(report.fraction_problematic, 1.0, epsilon = 0.0);
    assert_eq!(report.cost.error_design, n + j + k * j);
    // One linearization: the base solve plus one march per weight.
    assert_eq!(report.cost.error_update, 1 + 37);
    assert_eq!(report.cost.total(), counter.count());
}

#[test]
fn refit_with_unchanged_error_parameter_matches_incremental_update() {
    let mut config = small_config(ErrorModelKind::Parametric);
    config.train_steps = 0;
    let noise_var = config.noise_var;
    let (bnx, bny) = (config.belief_nx, config.belief_ny);
    let runner = SeqRunner::new(config).unwrap();
    let theta0 = initial_theta(ErrorModelKind::Parametric);
    let mut state = runner.initial_state(theta0.clone()).unwrap();
    let counter = EvalCounter::new();
    let stream = RngStream::new(900, 1);
    let report = runner.run_stage(&mut state, &stream, &counter).unwrap();
    assert_eq!(report.theta_e, vec![3.0]);

    // Incremental route: apply the stage's likelihood to the uniform prior
    // by hand, through the same solver.
    let phys = runner.physical_model(&theta0).unwrap();
    let scratch = EvalCounter::new();
    let mut manual = BeliefGrid::uniform(bnx, bny).unwrap();
    let mut log_lik = Vec::new();
    for m in 0..manual.len() {
        let (x, y) = manual.node(m);
        let field = &phys
            .solve_snapshots(&DVector::from_row_slice(&[x, y]), &[report.time], &scratch)
            .unwrap()[0];
        let resid = report.y_g - field.interpolate(report.d_g[0], report.d_g[1]).unwrap();
        log_lik.push(-resid * resid / (2.0 * noise_var));
    }
    manual.update(&log_lik).unwrap();
    for (a, b) in state.belief.log_posterior().iter().zip(manual.log_posterior().iter()) {
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }
}

#[test]
fn strength_training_recovers_truth_when_location_is_known() {
    // Point-mass belief on the true node isolates the error track: the
    // conditioned model is then exactly the truth rescaled, so one stage
    // must pull the strength toward it.
    let mut config = small_config(ErrorModelKind::Parametric);
    config.true_source.x = 0.4;
    config.true_source.y = 0.4;
    config.train_steps = 80;
    let runner = SeqRunner::new(config).unwrap();
    let mut log_w = vec![f64::NEG_INFINITY; 36];
    log_w[2 * 6 + 2] = 0.0;
    let belief = BeliefGrid::new(6, 6, [0.0, 0.0], [1.0, 1.0], log_w).unwrap();
    let mut state = SeqState::new(belief, initial_theta(ErrorModelKind::Parametric));
    let counter = EvalCounter::new();
    let stream = RngStream::new(21, 4);
    let report = runner.run_stage(&mut state, &stream, &counter).unwrap();

    assert_eq!(report.map_g, vec![0.4, 0.4]);
    // Only the single supported node is ever solved.
    assert_eq!(report.cost.physical_scan, 1);
    assert_eq!(report.cost.refit, 1);
    let before = (3.0f64 - 2.0).abs();
    let after = (report.theta_e[0] - 2.0).abs();
    assert!(
        after < before,
        "strength error did not shrink: {after} vs {before}"
    );
    assert!(after < 0.7, "fitted strength too far off: {}", report.theta_e[0]);
    // The report mirrors the state.
    assert_eq!(state.theta_e[0], report.theta_e[0]);
    assert_eq!(state.stage, 1);
    assert_eq!(state.history.len(), 1);
}

#[test]
fn two_stage_history_refit_keeps_belief_normalized() {
    let config = small_config(ErrorModelKind::Parametric);
    let runner = SeqRunner::new(config).unwrap();
    let mut state = runner.initial_state(initial_theta(ErrorModelKind::Parametric)).unwrap();
    let counter = EvalCounter::new();
    let stream = RngStream::new(314, 0);
    runner.run_stage(&mut state, &stream.substream(1), &counter).unwrap();
    let r2 = runner.run_stage(&mut state, &stream.substream(2), &counter).unwrap();
    let total: f64 = state.belief.posterior().iter().sum();
    assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
    assert_eq!(state.history.len(), 2);
    assert!(state.history[1].time > state.history[0].time);
    // The second refit re-solves every node against both observations but
    // still reports one march per node.
    assert_eq!(r2.cost.refit, (runner.config().belief_nx * runner.config().belief_ny) as u64);
    assert!(r2.field_rel_err.is_finite() && r2.field_rel_err >= 0.0);
}

#[test]
fn linearized_weight_gradient_matches_finite_differences() {
    let config = small_config(ErrorModelKind::Structural);
    let runner = SeqRunner::new(config).unwrap();
    let model = runner.error_model(&[0.3, 0.4]).unwrap();
    let time = 0.055;
    let design = DVector::from_row_slice(&[0.6, 0.5]);
    let noise_var = 0.0025;
    let w0 = DVector::from_iterator(37, RngStream::new(77, 7).standard_normals(37).iter().map(|z| 0.3 * z));
    let counter = EvalCounter::new();

    // Exact sensitivities: marched derivative fields of the network output.
    let u0 = model.solve_snapshots(&w0, &[time], &counter).unwrap()[0]
        .interpolate(design[0], design[1])
        .unwrap();
    let wfields = model.correction_weight_fields(&w0).unwrap();
    let mut b = DVector::zeros(37);
    for (k, field) in wfields.iter().enumerate() {
        b[k] = model.march_source_field(field, &[time], &counter).unwrap()[0]
            .interpolate(design[0], design[1])
            .unwrap();
    }
    let y = u0 + 0.1;
    let grad = &b * ((y - u0) / noise_var);

    // Central differences of the log likelihood through full solves.
    let h = 1e-4;
    let mut fd = DVector::zeros(37);
    for kidx in 0..37 {
        let mut wp = w0.clone();
        wp[kidx] += h;
        let mut wm = w0.clone();
        wm[kidx] -= h;
        let up = model.solve_snapshots(&wp, &[time], &counter).unwrap()[0]
            .interpolate(design[0], design[1])
            .unwrap();
        let um = model.solve_snapshots(&wm, &[time], &counter).unwrap()[0]
            .interpolate(design[0], design[1])
            .unwrap();
        let lp = -(y - up) * (y - up) / (2.0 * noise_var);
        let lm = -(y - um) * (y - um) / (2.0 * noise_var);
        fd[kidx] = (lp - lm) / (2.0 * h);
    }
    let scale = grad.amax().max(fd.amax());
    assert!(scale > 0.0, "degenerate fixture: zero gradient");
    for kidx in 0..37 {
        assert_abs_diff_eq!(grad[kidx], fd[kidx], epsilon = 1e-4 * scale);
    }
}
