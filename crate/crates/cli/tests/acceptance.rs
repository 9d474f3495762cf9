//! Acceptance suite: one test per criterion, each printing a pass/fail line
//! (visible with `cargo test -- --nocapture`). Wall-time-sensitive criteria
//! serialize on a shared lock so they are not measured under contention from
//! sibling tests.

use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use nalgebra::{DVector, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ccmpc_cli::{cmd_benchmark, cmd_simulate, cmd_validate};
use ccmpc_core::chance::{ellipsoid_margin, InflatedBox};
use ccmpc_core::dynamics::{
    obstacle_jacobian, obstacle_step, rk4_step, robot_input_jacobian, robot_jacobian,
    InputVector, ObstacleState, RobotParams, RobotState, STATE_DIM,
};
use ccmpc_core::ocp::{assemble_nlp, ConstraintKind, MarginModel};
use ccmpc_core::scenario::parse_scenario;

static TIMING: Mutex<()> = Mutex::new(());

fn timing_lock() -> std::sync::MutexGuard<'static, ()> {
    TIMING.lock().unwrap_or_else(|poison| poison.into_inner())
}

fn scenario_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
}

fn report(criterion: &str, pass: bool, details: &str) {
    println!(
        "criterion {criterion}: {} — {details}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} failed: {details}");
}

/// Criterion 1: 100 randomized safety-chain cases at 1e5 samples; every
/// estimated collision probability stays below α_it + 3·√(α_it(1−α_it)/1e5).
#[test]
fn criterion_1_safety_bound_certification() {
    let _guard = timing_lock();
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let outcome = cmd_validate(100, 100_000, 2024, dir.path(), 0.0).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let worst = outcome
        .cases
        .iter()
        .map(|c| c.probability - c.bound)
        .fold(f64::NEG_INFINITY, f64::max);
    let pass = outcome.all_pass && elapsed < 30.0;
    report(
        "1 (safety-bound certification)",
        pass,
        &format!(
            "100 cases, worst probability-minus-bound {worst:.2e}, runtime {elapsed:.1} s (< 30 s)"
        ),
    );
}

/// Criterion 2: 1e4 random (box, point) pairs; a nonnegative ellipsoid
/// margin implies the point lies outside the box. Zero counterexamples.
#[test]
fn criterion_2_geometric_enclosure() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4096);
    let mut outside_count = 0usize;
    let mut counterexamples = 0usize;
    for _ in 0..10_000 {
        let semi = Vector3::from_fn(|_, _| rng.random_range(0.05..5.0));
        let inflated = InflatedBox::new(semi).unwrap();
        let point = Vector3::from_fn(|_, _| rng.random_range(-10.0..10.0));
        if ellipsoid_margin(&point, &inflated) >= 0.0 {
            outside_count += 1;
            if (0..3).all(|j| point[j].abs() < semi[j]) {
                counterexamples += 1;
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = counterexamples == 0 && elapsed < 1.0;
    report(
        "2 (geometric enclosure)",
        pass,
        &format!(
            "10000 pairs, {outside_count} outside the ellipsoid, {counterexamples} counterexamples, runtime {elapsed:.2} s (< 1 s)"
        ),
    );
}

/// Criterion 3: all dynamics and constraint derivatives match central finite
/// differences to relative error ≤ 1e-5 over 100 random evaluations.
#[test]
fn criterion_3_gradient_suite() {
    let _guard = timing_lock();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let params = RobotParams::new(
        Vector3::new(1.0, 1.0, 1.0),
        1.0,
        Vector3::new(0.3, 0.3, 0.3),
        0.3,
    )
    .unwrap();
    let h = 1e-6;
    let dt = 0.2;
    let mut max_rel = 0.0_f64;
    let mut check = |analytic: f64, fd: f64| {
        let rel = (analytic - fd).abs() / analytic.abs().max(1.0);
        max_rel = max_rel.max(rel);
    };

    for _ in 0..100 {
        // Robot state and input Jacobians.
        let state = RobotState {
            position: Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0)),
            velocity: Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0)),
            yaw: rng.random_range(-3.0..3.0),
            yaw_rate: rng.random_range(-1.0..1.0),
        };
        let input = InputVector::from_fn(|_, _| rng.random_range(-2.0..2.0));
        let jac = robot_jacobian(&state, &input, &params, dt);
        let x = state.to_vector();
        for j in 0..STATE_DIM {
            let mut hi = x;
            let mut lo = x;
            hi[j] += h;
            lo[j] -= h;
            let fhi = rk4_step(&RobotState::from_vector(&hi), &input, &params, dt).to_vector();
            let flo = rk4_step(&RobotState::from_vector(&lo), &input, &params, dt).to_vector();
            for i in 0..STATE_DIM {
                check(jac[(i, j)], (fhi[i] - flo[i]) / (2.0 * h));
            }
        }
        let bjac = robot_input_jacobian(&state, &input, &params, dt);
        for j in 0..4 {
            let mut hi = input;
            let mut lo = input;
            hi[j] += h;
            lo[j] -= h;
            let fhi = rk4_step(&state, &hi, &params, dt).to_vector();
            let flo = rk4_step(&state, &lo, &params, dt).to_vector();
            for i in 0..STATE_DIM {
                check(bjac[(i, j)], (fhi[i] - flo[i]) / (2.0 * h));
            }
        }

        // Obstacle Jacobian.
        let obstacle = ObstacleState {
            position: Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0)),
            velocity: Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0)),
            yaw: rng.random_range(-3.0..3.0),
            yaw_rate: rng.random_range(-1.0..1.0),
        };
        let ojac = obstacle_jacobian(&obstacle, dt);
        let ox = obstacle.to_vector();
        for j in 0..STATE_DIM {
            let mut hi = ox;
            let mut lo = ox;
            hi[j] += h;
            lo[j] -= h;
            let fhi = obstacle_step(&ObstacleState::from_vector(&hi), dt).to_vector();
            let flo = obstacle_step(&ObstacleState::from_vector(&lo), dt).to_vector();
            for i in 0..STATE_DIM {
                check(ojac[(i, j)], (fhi[i] - flo[i]) / (2.0 * h));
            }
        }

        // Constraint margin gradients, both formulations.
        let semi = Vector3::from_fn(|_, _| rng.random_range(0.3..3.0));
        let rel = Vector3::from_fn(|_, _| rng.random_range(-4.0..4.0));
        let cov = {
            let a = Matrix3::from_fn(|_, _| rng.random_range(-0.3..0.3));
            a * a.transpose() + Matrix3::identity() * 1e-4
        };
        let models = [
            MarginModel::Ellipsoid(InflatedBox::new(semi).unwrap()),
            MarginModel::Linearized {
                nominal: InflatedBox::new(semi).unwrap(),
                rel_cov: cov,
                backoff: rng.random_range(1.0..4.0),
            },
        ];
        for model in &models {
            let grad = model.gradient(&rel);
            for j in 0..3 {
                let mut hi = rel;
                let mut lo = rel;
                hi[j] += h;
                lo[j] -= h;
                check(grad[j], (model.margin(&hi) - model.margin(&lo)) / (2.0 * h));
            }
        }
    }

    // NLP callback derivatives on the bundled benchmark problem.
    let scenario = parse_scenario(&scenario_path("benchmark.json")).unwrap();
    let ctx = scenario.planning_context(0.0).unwrap();
    let warm = vec![InputVector::zeros(); ctx.config.n_steps];
    for kind in ConstraintKind::ALL {
        let problem = assemble_nlp(&ctx.inputs(&warm), kind).unwrap();
        let base = problem.initial_decision_vector(&warm).unwrap();
        let w = &base + DVector::from_fn(base.len(), |_, _| rng.random_range(-0.2..0.2));
        let g = problem.cost_gradient(&w);
        let jac_eq = problem.equality_jacobian(&w);
        let jac_in = problem.inequality_jacobian(&w);
        for j in (0..w.len()).step_by(23) {
            let mut hi = w.clone();
            let mut lo = w.clone();
            hi[j] += h;
            lo[j] -= h;
            check(g[j], (problem.cost(&hi) - problem.cost(&lo)) / (2.0 * h));
            let fd_eq =
                (problem.equality_constraints(&hi) - problem.equality_constraints(&lo)) / (2.0 * h);
            for i in 0..problem.num_eq() {
                check(jac_eq[(i, j)], fd_eq[i]);
            }
            let fd_in = (problem.inequality_constraints(&hi)
                - problem.inequality_constraints(&lo))
                / (2.0 * h);
            for i in 0..problem.num_ineq() {
                check(jac_in[(i, j)], fd_in[i]);
            }
        }
    }

    let elapsed = start.elapsed().as_secs_f64();
    let pass = max_rel <= 1e-5 && elapsed < 5.0;
    report(
        "3 (gradient/Jacobian suite)",
        pass,
        &format!("max relative error {max_rel:.2e} (≤ 1e-5), runtime {elapsed:.2} s (< 5 s)"),
    );
}

/// Criterion 4: bundled one-horizon benchmark. (a) the ellipsoid chance
/// constraint converges with violation ≤ 1e-6, (b) the robust baseline costs
/// more, (c) the solution passes the per-step Monte Carlo safety check,
/// (d) the ellipsoid solve takes under a second. The linearized baseline is
/// recorded for qualitative comparison.
#[test]
fn criterion_4_benchmark() {
    let _guard = timing_lock();
    let scenario = parse_scenario(&scenario_path("benchmark.json")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let outcome = cmd_benchmark(&scenario, &ConstraintKind::ALL, dir.path()).unwrap();

    let row = |kind: ConstraintKind| {
        outcome
            .rows
            .iter()
            .find(|r| r.kind == kind)
            .expect("kind present")
    };
    let ours = row(ConstraintKind::EllipsoidCc);
    let robust = row(ConstraintKind::RobustSetBound);
    let linearized = row(ConstraintKind::LinearizedCc);

    let ours_sol = ours.solution.as_ref().expect("ellipsoid solve");
    let a = ours_sol.converged && ours_sol.max_violation <= 1e-6;
    let robust_obj = robust
        .solution
        .as_ref()
        .map(|s| s.objective)
        .unwrap_or(f64::NAN);
    let b = robust_obj > ours_sol.objective;
    let c = ours.mc_safety == Some(true);
    let d = ours_sol.wall_time < 1.0;
    let linearized_rel = linearized.relative;

    let pass = a && b && c && d;
    report(
        "4 (one-horizon benchmark)",
        pass,
        &format!(
            "(a) converged={} violation={:.1e}; (b) robust relative {:.4} > 1 (paper reference 1.0925); \
             (c) Monte Carlo safety {}; (d) solve {:.0} ms (< 1 s); linearized relative {:.4} recorded \
             (paper reports 2.6166 with local-minimum behavior)",
            ours_sol.converged,
            ours_sol.max_violation,
            robust_obj / ours_sol.objective,
            match ours.mc_safety {
                Some(true) => "pass",
                _ => "fail",
            },
            ours_sol.wall_time * 1e3,
            linearized_rel,
        ),
    );
}

/// Criterion 5: scaled-down crowd scenario (8 pedestrians, 120 s, α = 0.01):
/// zero collisions across 10 seeds and median planning time < 50 ms at
/// N = 20 with 8 obstacles.
#[test]
fn criterion_5_closed_loop_safety() {
    let _guard = timing_lock();
    let scenario = parse_scenario(&scenario_path("crowd.json")).unwrap();
    let mut solve_times_ms: Vec<f64> = Vec::new();
    let mut collisions = Vec::new();
    let mut min_clearance = f64::INFINITY;
    for seed in 0..10u64 {
        let dir = tempfile::tempdir().unwrap();
        let outcome = cmd_simulate(&scenario, 120.0, seed, dir.path()).unwrap();
        let metrics = outcome.metrics.as_ref().expect("metrics with obstacles");
        let clearance = metrics
            .clearance
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        min_clearance = min_clearance.min(clearance);
        if outcome.collided || clearance <= 0.0 {
            collisions.push(seed);
        }
        solve_times_ms.extend(metrics.solve_time.iter().map(|s| s * 1e3));
    }
    solve_times_ms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = solve_times_ms[solve_times_ms.len() / 2];
    let pass = collisions.is_empty() && median < 50.0;
    report(
        "5 (closed-loop safety)",
        pass,
        &format!(
            "10 seeds x 120 s: collisions {collisions:?}, min box clearance {min_clearance:.3} m, \
             median solve {median:.1} ms (< 50 ms; paper reports 4.2 ms on a different solver stack)"
        ),
    );
}

/// Criterion 6: observed convergence orders — RK4 at least 3.8 on the
/// velocity-lag subsystem, Euler near 1 on the obstacle position.
#[test]
fn criterion_6_convergence_orders() {
    let start = Instant::now();
    let params = RobotParams::new(
        Vector3::new(1.0, 1.0, 1.0),
        1.0,
        Vector3::new(1.0, 1.0, 1.0),
        1.0,
    )
    .unwrap();
    let u = InputVector::new(1.0, 0.0, 0.0, 0.0);
    let horizon = 1.0;
    let rk4_err = |n: usize| {
        let mut s = RobotState {
            position: Vector3::zeros(),
            velocity: Vector3::zeros(),
            yaw: 0.0,
            yaw_rate: 0.0,
        };
        let dt = horizon / n as f64;
        for _ in 0..n {
            s = rk4_step(&s, &u, &params, dt);
        }
        (s.velocity[0] - (1.0 - (-horizon_f()).exp())).abs()
    };
    fn horizon_f() -> f64 {
        1.0
    }
    let rk4_order = (rk4_err(8) / rk4_err(16)).log2();

    // Obstacle with a turning yaw: closed-form position from integrating the
    // rotating velocity; Euler should lose one order of dt per halving.
    let obstacle = ObstacleState {
        position: Vector3::zeros(),
        velocity: Vector3::new(1.0, 0.3, 0.2),
        yaw: 0.4,
        yaw_rate: 0.7,
    };
    let exact = |t: f64| -> Vector3<f64> {
        let (a, b) = (obstacle.yaw, obstacle.yaw_rate);
        let cos_int = ((a + b * t).sin() - a.sin()) / b;
        let sin_int = (a.cos() - (a + b * t).cos()) / b;
        Vector3::new(
            obstacle.velocity[0] * cos_int - obstacle.velocity[1] * sin_int,
            obstacle.velocity[0] * sin_int + obstacle.velocity[1] * cos_int,
            obstacle.velocity[2] * t,
        )
    };
    let euler_err = |n: usize| {
        let mut s = obstacle;
        let dt = horizon / n as f64;
        for _ in 0..n {
            s = obstacle_step(&s, dt);
        }
        (s.position - exact(horizon)).norm()
    };
    let euler_order = (euler_err(64) / euler_err(128)).log2();

    let elapsed = start.elapsed().as_secs_f64();
    let pass = rk4_order >= 3.8 && (0.8..=1.2).contains(&euler_order) && elapsed < 1.0;
    report(
        "6 (convergence orders)",
        pass,
        &format!(
            "RK4 observed order {rk4_order:.2} (≥ 3.8), Euler observed order {euler_order:.2} (≈ 1), runtime {elapsed:.2} s (< 1 s)"
        ),
    );
}

/// Criterion 7: identical seeds give byte-identical CSV outputs (wall-clock
/// telemetry fields redacted — measured time is not a function of the seed;
/// everything else must match to the byte).
#[test]
fn criterion_7_determinism() {
    let scenario = parse_scenario(&scenario_path("pedestrian.json")).unwrap();
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    cmd_simulate(&scenario, 8.0, 42, dir_a.path()).unwrap();
    cmd_simulate(&scenario, 8.0, 42, dir_b.path()).unwrap();
    let mut identical = true;
    for name in ["simlog.csv", "metrics.csv"] {
        let a = std::fs::read_to_string(dir_a.path().join(name)).unwrap();
        let b = std::fs::read_to_string(dir_b.path().join(name)).unwrap();
        identical &= redact_timing(name, &a) == redact_timing(name, &b);
    }
    // Distance and TTC plots are summaries of deterministic series.
    for name in ["distance_box.svg", "ttc_inverse_box.svg"] {
        let a = std::fs::read(dir_a.path().join(name)).unwrap();
        let b = std::fs::read(dir_b.path().join(name)).unwrap();
        identical &= a == b;
    }

    let dir_c = tempfile::tempdir().unwrap();
    let dir_d = tempfile::tempdir().unwrap();
    cmd_validate(25, 20_000, 9, dir_c.path(), 0.0).unwrap();
    cmd_validate(25, 20_000, 9, dir_d.path(), 0.0).unwrap();
    let report_identical = std::fs::read(dir_c.path().join("report.csv")).unwrap()
        == std::fs::read(dir_d.path().join("report.csv")).unwrap();

    let pass = identical && report_identical;
    report(
        "7 (determinism)",
        pass,
        &format!(
            "simulate CSVs byte-identical with wall-clock fields redacted: {identical}; \
             validate report.csv byte-identical: {report_identical}"
        ),
    );
}

/// Redacts the wall-clock fields: solve_ms column in simlog.csv, solve_time
/// row in metrics.csv.
fn redact_timing(name: &str, text: &str) -> String {
    let mut lines: Vec<String> = Vec::new();
    let mut iter = text.lines();
    let header = iter.next().expect("nonempty csv").to_string();
    let cols: Vec<&str> = header.split(',').collect();
    lines.push(header.clone());
    for line in iter {
        if name == "metrics.csv" && line.starts_with("solve_time,") {
            continue;
        }
        let mut fields: Vec<&str> = line.split(',').collect();
        if let Some(idx) = cols.iter().position(|c| *c == "solve_ms") {
            fields[idx] = "-";
        }
        lines.push(fields.join(","));
    }
    lines.join("\n")
}
