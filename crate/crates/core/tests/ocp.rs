//! Prediction, cost, constraint-margin and SQP solver tests, including the
//! dense-KKT oracle for the linear-regime solve and finite-difference checks
//! of every NLP callback.

use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ccmpc_core::chance::{inflate_box, uniform_risk_allocation, BoundingBox};
use ccmpc_core::dynamics::{DisturbanceSpec, InputVector, RobotParams, StateVector, STATE_DIM};
use ccmpc_core::gaussian::GaussianBelief;
use ccmpc_core::ocp::{
    assemble_nlp, obstacle_constraint_margins, predict_open_loop, solve_sqp, total_cost,
    ConstraintKind, OcpConfig,
};
use ccmpc_core::scenario::parse_scenario;
use ccmpc_core::{ellipsoid_margin, mc_collision_probability};

fn scenario_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
}

fn benchmark_scenario() -> ccmpc_core::Scenario {
    parse_scenario(&scenario_path("benchmark.json")).expect("bundled benchmark scenario")
}

fn zero_inputs(n: usize) -> Vec<InputVector> {
    vec![InputVector::zeros(); n]
}

fn simple_config(n_steps: usize, reference: Vec<StateVector>) -> OcpConfig {
    OcpConfig {
        n_steps,
        dt: 0.2,
        alpha: 0.01,
        state_weights: nalgebra::SMatrix::identity(),
        input_weights: nalgebra::SMatrix::identity(),
        state_lower: StateVector::from_element(f64::NEG_INFINITY),
        state_upper: StateVector::from_element(f64::INFINITY),
        input_lower: InputVector::from_element(f64::NEG_INFINITY),
        input_upper: InputVector::from_element(f64::INFINITY),
        reference,
        robust_sigma_factor: 4.0,
        use_fd_jacobians: false,
    }
}

fn default_params() -> RobotParams {
    RobotParams::new(
        Vector3::new(1.0, 1.0, 1.0),
        1.0,
        Vector3::new(0.3, 0.3, 0.3),
        0.3,
    )
    .unwrap()
}

fn obstacle_belief(pos: [f64; 3], pos_vars: [f64; 3]) -> GaussianBelief {
    let mut mean = DVector::zeros(STATE_DIM);
    mean[0] = pos[0];
    mean[1] = pos[1];
    mean[2] = pos[2];
    let mut vars = [0.0; STATE_DIM];
    vars[..3].copy_from_slice(&pos_vars);
    GaussianBelief::from_diagonal(mean, &vars).unwrap()
}

#[test]
fn static_obstacle_belief_stays_constant_without_noise() {
    let config = simple_config(5, vec![StateVector::zeros(); 5]);
    let robot = GaussianBelief::deterministic(DVector::zeros(STATE_DIM));
    let obstacle = obstacle_belief([3.0, 1.0, 0.0], [0.2, 0.1, 0.05]);
    let noise = DisturbanceSpec::new(
        DMatrix::zeros(STATE_DIM, STATE_DIM),
        vec![DMatrix::zeros(STATE_DIM, STATE_DIM)],
    )
    .unwrap();
    let pred = predict_open_loop(
        &robot,
        &zero_inputs(5),
        &[obstacle.clone()],
        &default_params(),
        &noise,
        &config,
    )
    .unwrap();
    for t in 0..=5 {
        assert_eq!(pred.obstacles[0][t].mean(), obstacle.mean());
        assert_eq!(pred.obstacles[0][t].cov(), obstacle.cov());
    }
}

#[test]
fn one_step_covariance_is_exact_first_order_propagation() {
    let config = simple_config(1, vec![StateVector::zeros()]);
    let mut cov_diag = [0.0; STATE_DIM];
    cov_diag[3] = 0.04; // velocity uncertainty feeds the linear subsystem
    cov_diag[4] = 0.09;
    let robot =
        GaussianBelief::from_diagonal(DVector::zeros(STATE_DIM), &cov_diag).unwrap();
    let mut w = DMatrix::zeros(STATE_DIM, STATE_DIM);
    w[(3, 3)] = 0.01;
    let noise = DisturbanceSpec::new(w.clone(), vec![]).unwrap();
    let params = default_params();
    let pred = predict_open_loop(&robot, &zero_inputs(1), &[], &params, &noise, &config).unwrap();

    let state = ccmpc_core::RobotState::from_vector(&StateVector::zeros());
    let jac = ccmpc_core::robot_jacobian(&state, &InputVector::zeros(), &params, config.dt);
    let expected = ccmpc_core::propagate_covariance(
        robot.cov(),
        &ccmpc_core::dynamics::to_dmatrix(&jac),
        &w,
    )
    .unwrap();
    assert!((pred.robot[1].cov() - expected).amax() < 1e-14);
}

#[test]
fn cv_position_variance_matches_scalar_recursion() {
    // Axis-aligned obstacle (ψ = 0, ψ̇ = 0): each (q_j, v_j) pair follows an
    // independent 2x2 linear recursion. Expand it symbolically step by step
    // and compare the full 8x8 pipeline against it.
    let n = 12;
    let config = simple_config(n, vec![StateVector::zeros(); n]);
    let dt = config.dt;
    let robot = GaussianBelief::deterministic(DVector::zeros(STATE_DIM));
    let obstacle = obstacle_belief([2.0, -1.0, 0.5], [0.05, 0.02, 0.01]);
    let mut v = DMatrix::zeros(STATE_DIM, STATE_DIM);
    let (vq, vv) = (1e-4, 2e-3);
    for j in 0..3 {
        v[(j, j)] = vq;
        v[(3 + j, 3 + j)] = vv;
    }
    let noise = DisturbanceSpec::new(DMatrix::zeros(STATE_DIM, STATE_DIM), vec![v]).unwrap();
    let pred = predict_open_loop(
        &robot,
        &zero_inputs(n),
        &[obstacle.clone()],
        &default_params(),
        &noise,
        &config,
    )
    .unwrap();

    for j in 0..3 {
        // Scalar oracle: [qq, qv, vv] recursion for q' = q + dt·v, v' = v.
        let (mut qq, mut qv, mut vvv) = (obstacle.cov()[(j, j)], 0.0, 0.0);
        for step in 1..=n {
            let new_qq = qq + 2.0 * dt * qv + dt * dt * vvv + vq;
            let new_qv = qv + dt * vvv;
            let new_vv = vvv + vv;
            qq = new_qq;
            qv = new_qv;
            vvv = new_vv;
            let got = pred.obstacles[0][step].cov()[(j, j)];
            assert!(
                (got - qq).abs() <= 1e-12 * qq.max(1.0),
                "axis {j} step {step}: pipeline {got} vs oracle {qq}"
            );
        }
    }
}

#[test]
fn obstacle_covariance_trace_grows_with_positive_noise() {
    let n = 10;
    let config = simple_config(n, vec![StateVector::zeros(); n]);
    let robot = GaussianBelief::deterministic(DVector::zeros(STATE_DIM));
    let obstacle = obstacle_belief([1.0, 1.0, 1.0], [0.1, 0.1, 0.1]);
    let v = DMatrix::identity(STATE_DIM, STATE_DIM) * 1e-3;
    let noise = DisturbanceSpec::new(DMatrix::zeros(STATE_DIM, STATE_DIM), vec![v]).unwrap();
    let pred = predict_open_loop(
        &robot,
        &zero_inputs(n),
        &[obstacle],
        &default_params(),
        &noise,
        &config,
    )
    .unwrap();
    let mut prev = pred.obstacles[0][0].cov().trace();
    for t in 1..=n {
        let tr = pred.obstacles[0][t].cov().trace();
        assert!(tr > prev, "trace must grow: {tr} vs {prev}");
        prev = tr;
    }
}

#[test]
fn total_cost_examples() {
    let reference: Vec<StateVector> = (0..3)
        .map(|t| StateVector::from_fn(|i, _| (i + t) as f64 * 0.1))
        .collect();
    let config = simple_config(3, reference.clone());
    // States equal to the reference with zero inputs cost nothing.
    assert_eq!(
        total_cost(&reference, &zero_inputs(3), &config).unwrap(),
        0.0
    );
    // Single step with P = I: cost is the squared deviation norm.
    let config1 = simple_config(1, vec![StateVector::zeros()]);
    let e = StateVector::from_fn(|i, _| i as f64);
    assert_eq!(
        total_cost(&[e], &zero_inputs(1), &config1).unwrap(),
        e.norm_squared()
    );
    // Length mismatch is an error.
    assert!(total_cost(&reference, &zero_inputs(2), &config).is_err());
}

/// Helper: assemble the bundled benchmark NLP for a kind.
fn benchmark_problem(kind: ConstraintKind) -> (ccmpc_core::NlpProblem, DVector<f64>) {
    let scenario = benchmark_scenario();
    let ctx = scenario.planning_context(0.0).unwrap();
    let warm = zero_inputs(ctx.config.n_steps);
    let problem = assemble_nlp(&ctx.inputs(&warm), kind).unwrap();
    let init = problem.initial_decision_vector(&warm).unwrap();
    (problem, init)
}

#[test]
fn margins_with_zero_covariance_reduce_to_nominal() {
    let n = 4;
    let config = simple_config(n, vec![StateVector::zeros(); n]);
    let robot = GaussianBelief::deterministic(DVector::zeros(STATE_DIM));
    let obstacle = obstacle_belief([4.0, 0.5, 0.0], [0.0, 0.0, 0.0]);
    let noise = DisturbanceSpec::new(
        DMatrix::zeros(STATE_DIM, STATE_DIM),
        vec![DMatrix::zeros(STATE_DIM, STATE_DIM)],
    )
    .unwrap();
    let pred = predict_open_loop(
        &robot,
        &zero_inputs(n),
        &[obstacle],
        &default_params(),
        &noise,
        &config,
    )
    .unwrap();
    let boxes = [BoundingBox::new(Vector3::new(1.0, 0.5, 1.5)).unwrap()];
    let risk = uniform_risk_allocation(0.01, n, 1).unwrap();

    let ours = obstacle_constraint_margins(ConstraintKind::EllipsoidCc, &pred, &boxes, &risk, 4.0)
        .unwrap();
    let robust =
        obstacle_constraint_margins(ConstraintKind::RobustSetBound, &pred, &boxes, &risk, 4.0)
            .unwrap();
    let nominal_box = ccmpc_core::InflatedBox::new(Vector3::new(1.0, 0.5, 1.5)).unwrap();
    for t in 1..=n {
        let rel = pred.robot_position_mean(t) - pred.obstacle_position_mean(t, 0);
        let nominal = ellipsoid_margin(&rel, &nominal_box);
        assert!((ours[(t - 1, 0)] - nominal).abs() < 1e-12);
        assert!((robust[(t - 1, 0)] - nominal).abs() < 1e-12);
    }
}

#[test]
fn far_obstacle_margins_are_large() {
    let n = 3;
    let config = simple_config(n, vec![StateVector::zeros(); n]);
    let robot = GaussianBelief::deterministic(DVector::zeros(STATE_DIM));
    let obstacle = obstacle_belief([500.0, 0.0, 0.0], [0.1, 0.1, 0.1]);
    let noise = DisturbanceSpec::new(
        DMatrix::zeros(STATE_DIM, STATE_DIM),
        vec![DMatrix::zeros(STATE_DIM, STATE_DIM)],
    )
    .unwrap();
    let pred = predict_open_loop(
        &robot,
        &zero_inputs(n),
        &[obstacle],
        &default_params(),
        &noise,
        &config,
    )
    .unwrap();
    let boxes = [BoundingBox::new(Vector3::new(1.0, 1.0, 1.0)).unwrap()];
    let risk = uniform_risk_allocation(0.01, n, 1).unwrap();
    for kind in ConstraintKind::ALL {
        let m = obstacle_constraint_margins(kind, &pred, &boxes, &risk, 4.0).unwrap();
        assert!(m.min() > 1e3, "{kind}: {}", m.min());
    }
}

#[test]
fn benchmark_step_margins_match_hand_composition() {
    // Route 1: the margin matrix of the module. Route 2: inflate_box and
    // ellipsoid_margin composed by hand from the same beliefs.
    let scenario = benchmark_scenario();
    let ctx = scenario.planning_context(0.0).unwrap();
    let warm = zero_inputs(ctx.config.n_steps);
    let pred = predict_open_loop(
        &ctx.robot,
        &warm,
        &ctx.obstacles,
        &ctx.params,
        &ctx.noise,
        &ctx.config,
    )
    .unwrap();
    let margins = obstacle_constraint_margins(
        ConstraintKind::EllipsoidCc,
        &pred,
        &ctx.boxes,
        &ctx.risk,
        ctx.config.robust_sigma_factor,
    )
    .unwrap();

    let alpha_it = 0.01 / 40.0;
    for t in 1..=ctx.config.n_steps {
        let infl = inflate_box(
            &ctx.boxes[0],
            alpha_it,
            &pred.robot_position_variances(t),
            &pred.obstacle_position_variances(t, 0),
        )
        .unwrap();
        let rel = pred.robot_position_mean(t) - pred.obstacle_position_mean(t, 0);
        let by_hand = ellipsoid_margin(&rel, &infl);
        assert!(
            (margins[(t - 1, 0)] - by_hand).abs() < 1e-12,
            "step {t}: {} vs {}",
            margins[(t - 1, 0)],
            by_hand
        );
    }
    // Spot-check the inflation numbers themselves: d̃ = d + Ψ⁻¹(0.99975)·σ.
    let infl = inflate_box(
        &ctx.boxes[0],
        alpha_it,
        &Vector3::zeros(),
        &Vector3::new(0.4, 0.1, 0.0001),
    )
    .unwrap();
    approx::assert_abs_diff_eq!(infl.semi_sizes()[0], 3.2014, epsilon = 1e-3);
    approx::assert_abs_diff_eq!(infl.semi_sizes()[1], 1.6007, epsilon = 1e-3);
}

#[test]
fn nlp_layout_matches_spec_arithmetic() {
    // N = 1, no obstacles: 12 decision variables, 8 equalities.
    let config = simple_config(1, vec![StateVector::zeros()]);
    let robot = GaussianBelief::deterministic(DVector::zeros(STATE_DIM));
    let noise = DisturbanceSpec::new(DMatrix::zeros(STATE_DIM, STATE_DIM), vec![]).unwrap();
    let risk = ccmpc_core::RiskAllocation::new(0.01, DMatrix::zeros(1, 0)).unwrap();
    let params = default_params();
    let warm = zero_inputs(1);
    let inputs = ccmpc_core::PlanningInputs {
        config: &config,
        params: &params,
        noise: &noise,
        robot: &robot,
        obstacles: &[],
        boxes: &[],
        risk: &risk,
        warm_inputs: &warm,
    };
    let p = assemble_nlp(&inputs, ConstraintKind::EllipsoidCc).unwrap();
    assert_eq!(p.num_vars(), 12);
    assert_eq!(p.num_eq(), 8);
    assert_eq!(p.num_ineq(), 0);

    // N = 20 with 2 obstacles: 40 obstacle inequalities.
    let config = simple_config(20, vec![StateVector::zeros(); 20]);
    let obstacles = vec![
        obstacle_belief([5.0, 0.0, 0.0], [0.1, 0.1, 0.1]),
        obstacle_belief([-5.0, 2.0, 0.0], [0.1, 0.1, 0.1]),
    ];
    let noise = DisturbanceSpec::new(
        DMatrix::zeros(STATE_DIM, STATE_DIM),
        vec![DMatrix::zeros(STATE_DIM, STATE_DIM); 2],
    )
    .unwrap();
    let boxes = vec![
        BoundingBox::new(Vector3::new(1.0, 1.0, 1.0)).unwrap(),
        BoundingBox::new(Vector3::new(0.5, 0.5, 0.5)).unwrap(),
    ];
    let risk = uniform_risk_allocation(0.01, 20, 2).unwrap();
    let warm = zero_inputs(20);
    let inputs = ccmpc_core::PlanningInputs {
        config: &config,
        params: &params,
        noise: &noise,
        robot: &robot,
        obstacles: &obstacles,
        boxes: &boxes,
        risk: &risk,
        warm_inputs: &warm,
    };
    let p = assemble_nlp(&inputs, ConstraintKind::EllipsoidCc).unwrap();
    assert_eq!(p.num_vars(), 240);
    assert_eq!(p.num_eq(), 160);
    assert_eq!(p.num_ineq(), 40);

    // Constraint Jacobian sparsity: an obstacle row touches only that step's
    // position variables.
    let w = p.initial_decision_vector(&warm).unwrap();
    let jac = p.inequality_jacobian(&w);
    for r in 0..40 {
        let step = r / 2 + 1;
        for col in 0..p.num_vars() {
            let pos_block = p.state_index(step)..p.state_index(step) + 3;
            if !pos_block.contains(&col) {
                assert_eq!(jac[(r, col)], 0.0, "row {r} col {col}");
            }
        }
    }
}

#[test]
fn nlp_callback_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for kind in ConstraintKind::ALL {
        let (problem, base) = benchmark_problem(kind);
        for trial in 0..7 {
            // Random perturbation so defects and margins are nonzero.
            let w = &base
                + DVector::from_fn(base.len(), |_, _| rng.random_range(-0.3..0.3));
            let h = 1e-6;

            // Cost gradient.
            let g = problem.cost_gradient(&w);
            for j in (0..w.len()).step_by(17) {
                let mut hi = w.clone();
                let mut lo = w.clone();
                hi[j] += h;
                lo[j] -= h;
                let fd = (problem.cost(&hi) - problem.cost(&lo)) / (2.0 * h);
                assert!(
                    (g[j] - fd).abs() <= 1e-5 * g[j].abs().max(1.0),
                    "{kind} trial {trial} cost grad var {j}: {} vs {fd}",
                    g[j]
                );
            }

            // Equality and inequality Jacobians.
            let jac_eq = problem.equality_jacobian(&w);
            let jac_in = problem.inequality_jacobian(&w);
            for j in (0..w.len()).step_by(13) {
                let mut hi = w.clone();
                let mut lo = w.clone();
                hi[j] += h;
                lo[j] -= h;
                let fd_eq = (problem.equality_constraints(&hi)
                    - problem.equality_constraints(&lo))
                    / (2.0 * h);
                for i in 0..problem.num_eq() {
                    assert!(
                        (jac_eq[(i, j)] - fd_eq[i]).abs() <= 1e-5 * jac_eq[(i, j)].abs().max(1.0),
                        "{kind} eq jac ({i},{j}): {} vs {}",
                        jac_eq[(i, j)],
                        fd_eq[i]
                    );
                }
                let fd_in = (problem.inequality_constraints(&hi)
                    - problem.inequality_constraints(&lo))
                    / (2.0 * h);
                for i in 0..problem.num_ineq() {
                    assert!(
                        (jac_in[(i, j)] - fd_in[i]).abs() <= 1e-5 * jac_in[(i, j)].abs().max(1.0),
                        "{kind} ineq jac ({i},{j}): {} vs {}",
                        jac_in[(i, j)],
                        fd_in[i]
                    );
                }
            }
        }
    }
}

/// Dense KKT oracle for the linear regime: with ψ ≡ 0 the dynamics are
/// linear, so the equality-constrained QP has a closed-form minimizer.
fn linear_kkt_oracle(
    problem: &ccmpc_core::NlpProblem,
    config: &OcpConfig,
    params: &RobotParams,
) -> DVector<f64> {
    let n = config.n_steps;
    let nv = problem.num_vars();
    let ne = problem.num_eq();
    let hover = ccmpc_core::RobotState::from_vector(&StateVector::zeros());
    let a = ccmpc_core::robot_jacobian(&hover, &InputVector::zeros(), params, config.dt);
    let b = ccmpc_core::dynamics::robot_input_jacobian(
        &hover,
        &InputVector::zeros(),
        params,
        config.dt,
    );

    let mut h = DMatrix::zeros(nv, nv);
    let mut g0 = DVector::zeros(nv);
    for t in 0..n {
        for i in 0..4 {
            for j in 0..4 {
                h[(problem.input_index(t) + i, problem.input_index(t) + j)] =
                    2.0 * config.input_weights[(i, j)];
            }
        }
        for i in 0..8 {
            for j in 0..8 {
                h[(problem.state_index(t + 1) + i, problem.state_index(t + 1) + j)] =
                    2.0 * config.state_weights[(i, j)];
            }
        }
        let gr = config.state_weights * config.reference[t] * -2.0;
        for i in 0..8 {
            g0[problem.state_index(t + 1) + i] = gr[i];
        }
    }
    let mut jac = DMatrix::zeros(ne, nv);
    for t in 0..n {
        for i in 0..8 {
            jac[(8 * t + i, problem.state_index(t + 1) + i)] = 1.0;
            for j in 0..4 {
                jac[(8 * t + i, problem.input_index(t) + j)] = -b[(i, j)];
            }
            if t >= 1 {
                for j in 0..8 {
                    jac[(8 * t + i, problem.state_index(t) + j)] = -a[(i, j)];
                }
            }
        }
    }
    let mut kkt = DMatrix::zeros(nv + ne, nv + ne);
    kkt.view_mut((0, 0), (nv, nv)).copy_from(&h);
    kkt.view_mut((nv, 0), (ne, nv)).copy_from(&jac);
    kkt.view_mut((0, nv), (nv, ne)).copy_from(&jac.transpose());
    let mut rhs = DVector::zeros(nv + ne);
    rhs.rows_mut(0, nv).copy_from(&(-&g0));
    let sol = kkt.lu().solve(&rhs).expect("nonsingular KKT system");
    sol.rows(0, nv).into_owned()
}

#[test]
fn sqp_solves_linear_quadratic_problem_in_few_iterations() {
    // Obstacle-free, unbounded, start at the origin at rest, goal along x:
    // the problem is an equality-constrained convex quadratic and SQP must
    // hit the analytic minimizer essentially immediately.
    let n = 10;
    let mut goal = StateVector::zeros();
    goal[0] = 3.0;
    let mut config = simple_config(n, vec![goal; n]);
    config.state_weights = nalgebra::SMatrix::from_fn(|i, j| {
        if i == j {
            if i < 3 {
                4.0
            } else {
                0.5
            }
        } else {
            0.0
        }
    });
    let params = default_params();
    let robot = GaussianBelief::deterministic(DVector::zeros(STATE_DIM));
    let noise = DisturbanceSpec::new(DMatrix::zeros(STATE_DIM, STATE_DIM), vec![]).unwrap();
    let risk = ccmpc_core::RiskAllocation::new(0.01, DMatrix::zeros(n, 0)).unwrap();
    let warm = zero_inputs(n);
    let inputs = ccmpc_core::PlanningInputs {
        config: &config,
        params: &params,
        noise: &noise,
        robot: &robot,
        obstacles: &[],
        boxes: &[],
        risk: &risk,
        warm_inputs: &warm,
    };
    let problem = assemble_nlp(&inputs, ConstraintKind::EllipsoidCc).unwrap();
    let init = problem.initial_decision_vector(&warm).unwrap();
    let sol = solve_sqp(&problem, &init, 1e-8, 50).unwrap();
    assert!(sol.converged, "kkt {} viol {}", sol.kkt_residual, sol.max_violation);
    assert!(
        sol.iterations <= 3,
        "expected Newton-like convergence, took {} iterations",
        sol.iterations
    );

    let oracle = linear_kkt_oracle(&problem, &config, &params);
    for t in 0..n {
        let u_star = InputVector::from_column_slice(
            &oracle.as_slice()[problem.input_index(t)..problem.input_index(t) + 4],
        );
        assert!(
            (sol.inputs[t] - u_star).amax() < 1e-6,
            "step {t}: {:?} vs {:?}",
            sol.inputs[t],
            u_star
        );
    }
}

#[test]
fn sqp_tracking_beats_zero_input_rollout() {
    let n = 25;
    let mut goal = StateVector::zeros();
    goal[0] = 4.0;
    goal[1] = -2.0;
    goal[2] = 1.0;
    let mut config = simple_config(n, vec![goal; n]);
    // Tracking-dominant weights so the optimum actually reaches the goal.
    config.state_weights = nalgebra::SMatrix::from_fn(|i, j| {
        if i == j {
            if i < 3 {
                20.0
            } else {
                0.5
            }
        } else {
            0.0
        }
    });
    config.input_weights = nalgebra::SMatrix::identity() * 0.1;
    let params = default_params();
    let robot = GaussianBelief::deterministic(DVector::zeros(STATE_DIM));
    let noise = DisturbanceSpec::new(DMatrix::zeros(STATE_DIM, STATE_DIM), vec![]).unwrap();
    let risk = ccmpc_core::RiskAllocation::new(0.01, DMatrix::zeros(n, 0)).unwrap();
    let warm = zero_inputs(n);
    let inputs = ccmpc_core::PlanningInputs {
        config: &config,
        params: &params,
        noise: &noise,
        robot: &robot,
        obstacles: &[],
        boxes: &[],
        risk: &risk,
        warm_inputs: &warm,
    };
    let problem = assemble_nlp(&inputs, ConstraintKind::EllipsoidCc).unwrap();
    let init = problem.initial_decision_vector(&warm).unwrap();
    let zero_cost = problem.cost(&init);
    let sol = solve_sqp(&problem, &init, 1e-6, 100).unwrap();
    assert!(sol.converged);
    assert!(sol.objective < zero_cost, "{} !< {zero_cost}", sol.objective);
    // Terminal state approaches the goal position.
    let terminal = sol.states[n];
    for j in 0..3 {
        assert!(
            (terminal[j] - goal[j]).abs() < 0.1,
            "component {j}: {} vs {}",
            terminal[j],
            goal[j]
        );
    }
}

#[test]
fn sqp_benchmark_converges_with_nonnegative_margins() {
    let scenario = benchmark_scenario();
    let (problem, init) = benchmark_problem(ConstraintKind::EllipsoidCc);
    let sol = solve_sqp(&problem, &init, scenario.solver.tol, scenario.solver.max_iter).unwrap();
    assert!(
        sol.converged,
        "kkt {} viol {} iters {}",
        sol.kkt_residual, sol.max_violation, sol.iterations
    );
    assert!(!sol.relaxed);
    assert!(sol.max_violation <= scenario.solver.tol);
    let w = problem.initial_decision_vector(&sol.inputs).unwrap();
    // Margins re-evaluated at the rolled-out solution stay above −tol.
    let margins = problem.obstacle_margins(&w);
    assert!(
        margins.min() >= -scenario.solver.tol,
        "min margin {}",
        margins.min()
    );
}

#[test]
fn sqp_is_bitwise_deterministic() {
    let scenario = benchmark_scenario();
    let (problem, init) = benchmark_problem(ConstraintKind::EllipsoidCc);
    let a = solve_sqp(&problem, &init, scenario.solver.tol, scenario.solver.max_iter).unwrap();
    let b = solve_sqp(&problem, &init, scenario.solver.tol, scenario.solver.max_iter).unwrap();
    assert_eq!(a.objective.to_bits(), b.objective.to_bits());
    assert_eq!(a.kkt_residual.to_bits(), b.kkt_residual.to_bits());
    assert_eq!(a.iterations, b.iterations);
    for t in 0..a.inputs.len() {
        for j in 0..4 {
            assert_eq!(a.inputs[t][j].to_bits(), b.inputs[t][j].to_bits());
        }
    }
    for t in 0..a.states.len() {
        for j in 0..8 {
            assert_eq!(a.states[t][j].to_bits(), b.states[t][j].to_bits());
        }
    }
}

#[test]
fn robust_margins_below_ellipsoid_margins_when_alpha_large_enough() {
    // Conservatism ordering: with α_t^i ≥ 0.00135 the quantile stays below
    // the robust σ-factor, so the robust box is larger and its margin lower.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 5;
    for _ in 0..40 {
        let alpha_it: f64 = rng.random_range(0.00135..0.4);
        let alpha = (alpha_it * n as f64).min(0.9);
        let mut config = simple_config(n, vec![StateVector::zeros(); n]);
        config.alpha = alpha;
        let robot = GaussianBelief::from_diagonal(
            DVector::zeros(STATE_DIM),
            &[0.02, 0.01, 0.005, 0.0, 0.0, 0.0, 0.0, 0.0],
        )
        .unwrap();
        let obstacle = obstacle_belief(
            [rng.random_range(2.0..8.0), rng.random_range(-2.0..2.0), 0.0],
            [
                rng.random_range(0.0..0.3),
                rng.random_range(0.0..0.3),
                rng.random_range(0.0..0.3),
            ],
        );
        let noise = DisturbanceSpec::new(
            DMatrix::zeros(STATE_DIM, STATE_DIM),
            vec![DMatrix::zeros(STATE_DIM, STATE_DIM)],
        )
        .unwrap();
        let pred = predict_open_loop(
            &robot,
            &zero_inputs(n),
            &[obstacle],
            &default_params(),
            &noise,
            &config,
        )
        .unwrap();
        let boxes = [BoundingBox::new(Vector3::new(
            rng.random_range(0.3..2.0),
            rng.random_range(0.3..2.0),
            rng.random_range(0.3..2.0),
        ))
        .unwrap()];
        let risk = uniform_risk_allocation(alpha, n, 1).unwrap();
        let ours =
            obstacle_constraint_margins(ConstraintKind::EllipsoidCc, &pred, &boxes, &risk, 4.0)
                .unwrap();
        let robust =
            obstacle_constraint_margins(ConstraintKind::RobustSetBound, &pred, &boxes, &risk, 4.0)
                .unwrap();
        for t in 0..n {
            assert!(
                robust[(t, 0)] <= ours[(t, 0)] + 1e-12,
                "robust {} vs ellipsoid {}",
                robust[(t, 0)],
                ours[(t, 0)]
            );
        }
    }
}

#[test]
fn benchmark_solution_passes_monte_carlo_safety_check() {
    let scenario = benchmark_scenario();
    let ctx = scenario.planning_context(0.0).unwrap();
    let (problem, init) = benchmark_problem(ConstraintKind::EllipsoidCc);
    let sol = solve_sqp(&problem, &init, scenario.solver.tol, scenario.solver.max_iter).unwrap();
    assert!(sol.converged);

    // Covariances recomputed along the solution's own inputs.
    let pred = predict_open_loop(
        &ctx.robot,
        &sol.inputs,
        &ctx.obstacles,
        &ctx.params,
        &ctx.noise,
        &ctx.config,
    )
    .unwrap();
    let n_samples = 100_000;
    for t in 1..=ctx.config.n_steps {
        let alpha_it = ctx.risk.alpha(t - 1, 0);
        let rel_mean = Vector3::from_iterator(
            (0..3).map(|j| sol.states[t][j] - pred.obstacle_position_mean(t, 0)[j]),
        );
        let rel_cov = pred.relative_position_cov(t, 0);
        let belief = GaussianBelief::new(
            DVector::from_column_slice(rel_mean.as_slice()),
            DMatrix::from_fn(3, 3, |i, j| rel_cov[(i, j)]),
        )
        .unwrap();
        let p_hat =
            mc_collision_probability(&belief, &ctx.boxes[0], n_samples, 1234 + t as u64).unwrap();
        let bound = alpha_it + 3.0 * (alpha_it * (1.0 - alpha_it) / n_samples as f64).sqrt();
        assert!(
            p_hat <= bound,
            "step {t}: estimated {p_hat} exceeds bound {bound}"
        );
    }
}
