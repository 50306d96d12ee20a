use slqr::linalg::{self, Mat, Vector};
use slqr::offpolicy::{
    collect_offpolicy_data, iterate_on_buffer, recompute_rows, run_offpolicy, OffPolicyObjective,
    ReplayBuffer, TargetPolicy,
};
use slqr::onpolicy::{assemble_onpolicy_row, run_onpolicy};
use slqr::scenario::{
    build_min_intervention_target, build_takeover_target, run_parallel_offpolicy, run_scenario,
    run_with_gain_switch, verify_takeover_after_exit, Mode, SharedScenario,
};
use slqr::sim::{simulate_segment, HumanPolicy, LearningEnv};

const TOL: f64 = 1e-3;

fn car(mode: Mode) -> SharedScenario {
    SharedScenario::car_following(mode, 0)
}

fn scalar_scenario(a: f64, mode: &str) -> SharedScenario {
    let json = format!(
        r#"{{
            "schema_version": 1,
            "plant": {{"a": [[{a:?}]], "b": [[1.0]]}},
            "human": {{"kh": [[-1.0]], "ch": [[1.0]]}},
            "weights": {{"q": [[1.0]], "m": [[0.0]], "r": [[1.0]], "tau": 0.05}},
            "mode": "{mode}",
            "x0": [1.0]
        }}"#
    );
    SharedScenario::from_json(&json).unwrap()
}

fn behavior() -> Mat {
    Mat::from_row_slice(1, 3, &[0.1, -0.2, 0.15])
}

#[test]
fn scalar_onpolicy_reaches_closed_form_value() {
    let s = scalar_scenario(0.0, "on_policy_min_intervention");
    let rep = run_scenario(&s).unwrap();
    assert!((rep.learned_p[(0, 0)] - (2f64.sqrt() - 1.0)).abs() < 1e-6);
    assert!(rep.convergence.converged);
}

#[test]
fn onpolicy_car_following_converges() {
    let rep = run_scenario(&car(Mode::OnPolicyMinIntervention)).unwrap();
    assert!(rep.relative_error <= TOL, "relative error {}", rep.relative_error);
    assert!(rep.convergence.iterations.len() <= 10);
    assert!(rep.convergence.iterations.iter().all(|it| it.segments >= 6));
    assert!(rep.passed(TOL));
}

#[test]
fn optimal_gain_is_a_fixed_point() {
    let s = car(Mode::OnPolicyMinIntervention);
    let t = build_min_intervention_target(&s).unwrap();
    let mut env = s.environment().unwrap();
    let rep = run_onpolicy(&mut env, &t.k_star, &s.learner, Some(&t.p_star)).unwrap();
    let first = &rep.iterations[0];
    assert!(t.relative_error(&first.p) < 1e-6);
    assert!((&first.next_gain - &t.k_star).amax() < 1e-6);
}

#[test]
fn values_decrease_monotonically() {
    let s = car(Mode::OnPolicyMinIntervention);
    let rep = run_scenario(&s).unwrap();
    let ps: Vec<&Mat> = rep.convergence.iterations.iter().map(|it| &it.p).collect();
    for p in &ps {
        assert!((*p).clone().symmetric_eigenvalues().min() > 0.0);
    }
    for pair in ps.windows(2) {
        let diff = pair[0] - pair[1];
        assert!(diff.symmetric_eigenvalues().min() >= -1e-5 * pair[0].norm());
    }
    let star = &rep.oracle.p_star;
    for p in &ps {
        assert!((*p - star).symmetric_eigenvalues().min() >= -1e-5 * star.norm());
    }
}

#[test]
fn offpolicy_min_intervention_uses_one_buffer() {
    let rep = run_scenario(&car(Mode::OffPolicyMinIntervention)).unwrap();
    assert!(rep.relative_error <= TOL, "relative error {}", rep.relative_error);
    assert_eq!(rep.fresh_segments_after_collection, 0);
    let buf = rep.buffer.as_ref().unwrap();
    assert_eq!(buf.len(), rep.collected_segments);
    assert!(rep.convergence.iterations[1..].iter().all(|it| it.segments == 0));
}

/// Composite Simpson quadrature along `x(t) = expm(acl t) x0`.
fn simpson<F: Fn(&Vector) -> Vector>(acl: &Mat, x0: &Vector, tau: f64, f: F) -> Vector {
    let intervals = 200;
    let h = tau / intervals as f64;
    (0..=intervals)
        .map(|k| {
            let x = linalg::expm_at(acl, k as f64 * h).unwrap() * x0;
            let c = match k {
                0 => 1.0,
                k if k == intervals => 1.0,
                k if k % 2 == 1 => 4.0,
                _ => 2.0,
            };
            f(&x) * (c * h / 3.0)
        })
        .reduce(|a, b| a + b)
        .unwrap()
}

#[test]
fn replayed_rows_match_direct_reintegration() {
    let s = car(Mode::OffPolicyMinIntervention);
    let mut env = s.environment().unwrap();
    let f = behavior();
    let buf = collect_offpolicy_data(&mut env, &f, 8, 1).unwrap();
    let target = Mat::from_row_slice(1, 3, &[0.2, 0.3, -0.25]);
    let sys = recompute_rows(
        &buf,
        TargetPolicy::Gain(&target),
        OffPolicyObjective::MinIntervention,
        &s.weights.q,
        &s.weights.r,
    )
    .unwrap();
    let g = s.human.effective_gain();
    let acl = s.human_closed_loop() + s.plant.b() * &f;
    let cost = &s.weights.q + g.transpose() * &s.weights.m * &g + target.transpose() * &s.weights.r * &target;
    for (seg, (row, rhs)) in buf.segments().iter().zip(sys.rows()) {
        let again = simulate_segment(&s.plant, Some(&s.human), &f, &seg.x_start, &s.weights, s.substeps).unwrap();
        let delta = simpson(&acl, &seg.x_start, s.weights.tau, |x| {
            linalg::grad_vec_l(x) * (s.plant.b() * ((&f - &target) * x))
        });
        let reward = simpson(&acl, &seg.x_start, s.weights.tau, |x| Vector::from_element(1, x.dot(&(&cost * x))));
        let direct = again.phi_diff() - delta;
        assert!((row - &direct).amax() <= 1e-9);
        assert!((rhs + reward[0]).abs() <= 1e-9);
    }
}

#[test]
fn behavior_equal_to_target_reproduces_onpolicy_rows() {
    let s = car(Mode::OffPolicyMinIntervention);
    let mut env = s.environment().unwrap();
    let k = behavior();
    let buf = collect_offpolicy_data(&mut env, &k, 6, 1).unwrap();
    let sys = recompute_rows(
        &buf,
        TargetPolicy::Gain(&k),
        OffPolicyObjective::MinIntervention,
        &s.weights.q,
        &s.weights.r,
    )
    .unwrap();
    for (seg, (row, rhs)) in buf.segments().iter().zip(sys.rows()) {
        let (on_row, on_rhs) = assemble_onpolicy_row(seg, &k, &s.weights.r).unwrap();
        assert!((row - on_row).amax() <= 1e-9);
        assert!((rhs - on_rhs).abs() <= 1e-9);
    }
}

#[test]
fn offpolicy_learns_under_a_nonzero_behavior() {
    let s = car(Mode::OffPolicyMinIntervention);
    let t = build_min_intervention_target(&s).unwrap();
    let mut env = s.environment().unwrap();
    let rep = run_offpolicy(
        &mut env,
        &behavior(),
        OffPolicyObjective::MinIntervention,
        &s.learner,
        Some(&t.p_star),
    )
    .unwrap();
    assert!(t.relative_error(rep.convergence.p()) <= TOL);
}

#[test]
fn buffer_replayed_from_disk_gives_the_same_result() {
    let s = car(Mode::OffPolicyMinIntervention);
    let rep = run_scenario(&s).unwrap();
    let buf = rep.buffer.clone().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("buffer.json");
    buf.save(&path).unwrap();
    let loaded = ReplayBuffer::load(&path).unwrap();
    assert_eq!(loaded, buf);
    let zero = Mat::zeros(1, 3);
    let again = iterate_on_buffer(
        loaded,
        None,
        s.plant.b(),
        &s.weights.q,
        &s.weights.r,
        &zero,
        OffPolicyObjective::MinIntervention,
        &s.learner,
        None,
    )
    .unwrap();
    assert_eq!(again.convergence.p(), &rep.learned_p);
}

#[test]
fn takeover_learns_with_the_human_in_the_loop() {
    let rep = run_scenario(&car(Mode::OffPolicyTakeover)).unwrap();
    assert!(rep.relative_error <= TOL, "relative error {}", rep.relative_error);
    assert!(rep.convergence.iterations[0].evaluated_gain.is_none());
    let post = rep.post_exit.as_ref().unwrap();
    assert!(post.passed);
    assert!(post.spectral_abscissa < 0.0);
    assert!(post.relative_cost_error <= 1e-2);
    assert!(rep.passed(TOL));
}

#[test]
fn post_exit_check_with_the_optimal_gain() {
    let s = car(Mode::OffPolicyTakeover);
    let t = build_takeover_target(&s).unwrap();
    let rep = verify_takeover_after_exit(&s, &t.k_star, &t.p_star, &s.x0).unwrap();
    assert!(rep.passed);
    assert!(rep.relative_cost_error < 1e-6);
    assert!(rep.state_ratio <= 1e-3);
}

#[test]
fn post_exit_suboptimal_gain_costs_more() {
    let s = scalar_scenario(-1.0, "off_policy_takeover");
    let t = build_takeover_target(&s).unwrap();
    let zero = Mat::zeros(1, 1);
    let p_zero = linalg::solve_lyapunov(s.plant.a(), &s.weights.q).unwrap();
    let rep = verify_takeover_after_exit(&s, &zero, &p_zero, &s.x0).unwrap();
    assert!(rep.passed);
    assert!((rep.realized_cost - 0.5).abs() < 1e-6);
    let optimal = s.x0.dot(&(&t.p_star * &s.x0));
    assert!(rep.realized_cost > optimal);
}

#[test]
fn post_exit_from_the_origin_is_trivial() {
    let s = car(Mode::OffPolicyTakeover);
    let t = build_takeover_target(&s).unwrap();
    let rep = verify_takeover_after_exit(&s, &t.k_star, &t.p_star, &Vector::zeros(3)).unwrap();
    assert!(rep.passed);
    assert_eq!(rep.realized_cost, 0.0);
}

#[test]
fn both_objectives_learn_from_one_shared_buffer() {
    let rep = run_parallel_offpolicy(&car(Mode::OffPolicyTakeover)).unwrap();
    assert!(rep.min_intervention.relative_error <= TOL);
    assert!(rep.takeover.relative_error <= TOL);
    assert_eq!(rep.min_intervention.collected_segments, rep.buffer.len());
    assert_eq!(rep.takeover.collected_segments, rep.buffer.len());
    assert!(rep.takeover.post_exit.as_ref().unwrap().passed);
}

#[test]
fn human_gain_switch_is_detected_and_relearned() {
    let s = car(Mode::OnPolicyMinIntervention);
    let new_human = HumanPolicy::new(Mat::from_row_slice(1, 2, &[2.0, -2.0]), s.human.ch().clone()).unwrap();
    let rep = run_with_gain_switch(&s, new_human, 1e-3, 6).unwrap();
    assert!(rep.residual_before_switch < 1e-3, "before {}", rep.residual_before_switch);
    assert!(rep.residual_after_switch > 1e-3, "after {}", rep.residual_after_switch);
    assert!(rep.change_detected);
    assert!(rep.relative_error_after <= TOL);
    assert!(rep.oracle_after.relative_error(&rep.before.oracle.p_star) > 1e-2);
}

#[test]
fn first_iteration_is_shared_between_on_and_off_policy() {
    let on = run_scenario(&car(Mode::OnPolicyMinIntervention)).unwrap();
    let off = run_scenario(&car(Mode::OffPolicyMinIntervention)).unwrap();
    let (a, b) = (on.trajectory.unwrap(), off.trajectory.unwrap());
    let first = on.convergence.iterations[0].segments.min(off.collected_segments);
    // Both start from u_a = 0 and draw the same nudges.
    let prefix = first * 10 - 1;
    assert!(a.rows.len() > prefix && b.rows.len() > prefix);
    assert_eq!(a.rows[..prefix], b.rows[..prefix]);
    let (p_on, p_off) = (&on.convergence.iterations[0].p, &off.convergence.iterations[0].p);
    assert!((p_on - p_off).amax() <= 1e-9 * p_on.amax());
}

#[test]
fn learners_see_only_the_input_matrix_and_measurements() {
    for (name, src) in [
        ("onpolicy", include_str!("../src/onpolicy.rs")),
        ("offpolicy", include_str!("../src/offpolicy.rs")),
    ] {
        let body = src.split("#[cfg(test)]").next().unwrap();
        for forbidden in ["LtiPlant", "SharedLoop", "HumanPolicy", "SharedScenario", "human_closed_loop", ".a()"] {
            assert!(!body.contains(forbidden), "{name} references {forbidden}");
        }
    }
}

#[test]
fn learned_gains_keep_a_stability_margin() {
    for mode in Mode::ALL {
        let rep = run_scenario(&car(mode)).unwrap();
        assert!(rep.closed_loop_abscissa <= -1e-6, "{mode:?}: {}", rep.closed_loop_abscissa);
    }
}

#[test]
fn constant_exploration_free_data_are_collinear() {
    for mode in Mode::ALL {
        let mut s = car(mode);
        s.nudge.amplitude = Some(0.0);
        let err = run_scenario(&s).unwrap_err();
        assert!(matches!(err, slqr::Error::Collinear { .. }), "{mode:?}: {err}");
    }
}

#[test]
fn settings_limit_the_iterations() {
    let mut s = car(Mode::OffPolicyTakeover);
    s.learner.max_iterations = 2;
    let rep = run_scenario(&s).unwrap();
    assert_eq!(rep.convergence.iterations.len(), 2);
    assert!(!rep.convergence.converged);
}

#[test]
fn learning_is_reproducible() {
    let s = car(Mode::OffPolicyTakeover);
    let a = run_scenario(&s).unwrap();
    let b = run_scenario(&s).unwrap();
    assert_eq!(a.learned_p, b.learned_p);
    assert_eq!(a.buffer, b.buffer);
    let mut env = s.environment().unwrap();
    assert_eq!(env.input_dim(), 1);
    env.measure_segment(&Mat::zeros(1, 3)).unwrap();
}
