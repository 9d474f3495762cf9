//! Executable workflows: the one-horizon constraint benchmark, closed-loop
//! crowd simulation and the Monte Carlo certification of the safety bound.
//!
//! All outputs are deterministic functions of (scenario, flags, seed).
//! Exit codes: 0 success, 2 scenario error, 3 solver failure, 4 collision,
//! 5 validation failure.

pub mod csvio;
pub mod svg;

use std::path::{Path, PathBuf};

use nalgebra::{DVector, Vector3};
use rayon::prelude::*;

use ccmpc_core::chance::{mc_collision_probability, safety_chain_case, SafetyCase};
use ccmpc_core::gaussian::GaussianBelief;
use ccmpc_core::ocp::{assemble_nlp, predict_open_loop, solve_sqp, ConstraintKind, Solution};
use ccmpc_core::scenario::Scenario;
use ccmpc_core::sim::{compute_metrics, run_closed_loop, Metrics, SeriesSummary, SimLog};
use ccmpc_core::InputVector;

use csvio::{fmt_f64, CsvWriter};

/// Error kinds mapped onto the documented exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Exit code 2.
    #[error("scenario error: {0}")]
    Scenario(String),
    /// Exit code 3.
    #[error("solver failure: {0}")]
    Solver(String),
    /// Exit code 2 (configuration/environment).
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Scenario(_) | CliError::Io(_) => 2,
            CliError::Solver(_) => 3,
        }
    }
}

impl From<ccmpc_core::Error> for CliError {
    fn from(e: ccmpc_core::Error) -> Self {
        match e {
            ccmpc_core::Error::Scenario(msg) => CliError::Scenario(msg),
            ccmpc_core::Error::Io(e) => CliError::Io(e),
            other => CliError::Solver(other.to_string()),
        }
    }
}

/// Prints the over-budget warning once per command when the uniform per-step
/// risk exceeds 0.5 (the box "inflation" would deflate).
pub fn warn_alpha_budget(scenario: &Scenario) {
    let alpha_it = scenario.max_alpha_it();
    if alpha_it >= 0.5 {
        eprintln!(
            "warning: uniform per-step risk alpha_t = {alpha_it} is at least 0.5; \
             the uncertainty back-off becomes a deflation"
        );
    }
}

/// One row of results.csv.
#[derive(Debug, Clone)]
pub struct BenchmarkRow {
    pub kind: ConstraintKind,
    pub solution: Option<Solution>,
    pub relative: f64,
    /// Monte Carlo per-step safety check; only evaluated for a converged
    /// ellipsoid_cc solve.
    pub mc_safety: Option<bool>,
    /// Per-step margins (min over obstacles) at the returned solution.
    pub margins: Vec<f64>,
}

#[derive(Debug)]
pub struct BenchmarkOutcome {
    pub rows: Vec<BenchmarkRow>,
    pub files: Vec<PathBuf>,
}

impl BenchmarkOutcome {
    /// Nonzero only if the ellipsoid chance-constraint solve failed.
    pub fn exit_code(&self) -> i32 {
        let ours = self
            .rows
            .iter()
            .find(|r| r.kind == ConstraintKind::EllipsoidCc);
        match ours {
            Some(row) => match &row.solution {
                Some(sol) if sol.converged => 0,
                _ => 3,
            },
            None => 0,
        }
    }
}

/// Runs one open-loop solve per requested constraint kind from an identical
/// zero-input initialization, validates the ellipsoid solution against the
/// Monte Carlo oracle, and writes results.csv and trajectories.csv.
pub fn cmd_benchmark(
    scenario: &Scenario,
    kinds: &[ConstraintKind],
    out_dir: &Path,
) -> Result<BenchmarkOutcome, CliError> {
    let specs = scenario.planner_obstacles();
    if specs.len() != 1 {
        return Err(CliError::Scenario(format!(
            "the benchmark needs exactly one obstacle, scenario has {}",
            specs.len()
        )));
    }
    if kinds.is_empty() {
        return Err(CliError::Scenario("no constraint kinds requested".into()));
    }
    warn_alpha_budget(scenario);
    std::fs::create_dir_all(out_dir)?;

    let ctx = scenario.planning_context(0.0)?;
    let n = ctx.config.n_steps;
    let warm = vec![InputVector::zeros(); n];

    let mut rows = Vec::new();
    for &kind in kinds {
        let solved: Result<(Solution, Vec<f64>), CliError> = (|| {
            let problem = assemble_nlp(&ctx.inputs(&warm), kind)?;
            let init = problem.initial_decision_vector(&warm)?;
            let sol = solve_sqp(&problem, &init, scenario.solver.tol, scenario.solver.max_iter)?;
            let w = problem.decision_vector(&sol.inputs, &sol.states)?;
            let margins_matrix = problem.obstacle_margins(&w);
            let margins = (0..n)
                .map(|t| {
                    (0..margins_matrix.ncols())
                        .map(|i| margins_matrix[(t, i)])
                        .fold(f64::INFINITY, f64::min)
                })
                .collect();
            Ok((sol, margins))
        })();

        let row = match solved {
            Ok((sol, margins)) => {
                let mc_safety = if kind == ConstraintKind::EllipsoidCc && sol.converged {
                    Some(mc_safety_check(scenario, &sol)?)
                } else {
                    None
                };
                BenchmarkRow {
                    kind,
                    solution: Some(sol),
                    relative: f64::NAN,
                    mc_safety,
                    margins,
                }
            }
            Err(e) => {
                eprintln!("warning: {kind} solve failed: {e}");
                BenchmarkRow {
                    kind,
                    solution: None,
                    relative: f64::NAN,
                    mc_safety: None,
                    margins: vec![f64::NAN; n],
                }
            }
        };
        rows.push(row);
    }

    // Relative objectives normalized so ellipsoid_cc reads exactly 1.0.
    let normalizer = rows
        .iter()
        .find(|r| r.kind == ConstraintKind::EllipsoidCc && r.solution.is_some())
        .or_else(|| rows.iter().find(|r| r.solution.is_some()))
        .and_then(|r| r.solution.as_ref().map(|s| s.objective));
    if let Some(norm) = normalizer {
        for row in &mut rows {
            if let Some(sol) = &row.solution {
                row.relative = sol.objective / norm;
            }
        }
    }

    let results_path = out_dir.join("results.csv");
    let mut header: Vec<String> = [
        "kind",
        "objective",
        "relative_objective",
        "solve_time_s",
        "max_violation",
        "status",
        "relaxed",
        "mc_safety",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for t in 1..=n {
        header.push(format!("margin_{t}"));
    }
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut results = CsvWriter::create(&results_path, &header_refs)?;
    for row in &rows {
        let mut fields = match &row.solution {
            Some(sol) => vec![
                row.kind.to_string(),
                fmt_f64(sol.objective),
                fmt_f64(row.relative),
                fmt_f64(sol.wall_time),
                fmt_f64(sol.max_violation),
                if sol.converged { "converged" } else { "not_converged" }.to_string(),
                (sol.relaxed as u8).to_string(),
                match row.mc_safety {
                    Some(true) => "pass".to_string(),
                    Some(false) => "fail".to_string(),
                    None => String::new(),
                },
            ],
            None => vec![
                row.kind.to_string(),
                fmt_f64(f64::NAN),
                fmt_f64(f64::NAN),
                fmt_f64(f64::NAN),
                fmt_f64(f64::NAN),
                "error".to_string(),
                "0".to_string(),
                String::new(),
            ],
        };
        fields.extend(row.margins.iter().map(|m| fmt_f64(*m)));
        results.write_row(&fields)?;
    }
    results.finish()?;

    // Predicted obstacle means along the horizon (identical for all kinds:
    // obstacles are uncontrolled).
    let prediction = predict_open_loop(
        &ctx.robot,
        &warm,
        &ctx.obstacles,
        &ctx.params,
        &ctx.noise,
        &ctx.config,
    )?;
    let traj_path = out_dir.join("trajectories.csv");
    let mut traj = CsvWriter::create(
        &traj_path,
        &[
            "kind", "step", "t", "px", "py", "pz", "vx", "vy", "vz", "yaw", "yaw_rate", "ux",
            "uy", "uz", "uyaw", "qx", "qy", "qz",
        ],
    )?;
    for row in &rows {
        let Some(sol) = &row.solution else { continue };
        for step in 0..=n {
            let x = sol.states[step];
            let u = if step < n {
                sol.inputs[step].iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>()
            } else {
                vec![fmt_f64(f64::NAN); 4]
            };
            let q = prediction.obstacle_position_mean(step, 0);
            let mut fields = vec![
                row.kind.to_string(),
                step.to_string(),
                fmt_f64(step as f64 * ctx.config.dt),
            ];
            fields.extend(x.iter().map(|v| fmt_f64(*v)));
            fields.extend(u);
            fields.extend(q.iter().map(|v| fmt_f64(*v)));
            traj.write_row(&fields)?;
        }
    }
    traj.finish()?;

    Ok(BenchmarkOutcome {
        rows,
        files: vec![results_path, traj_path],
    })
}

const MC_SAMPLES: usize = 100_000;

/// Per-step Monte Carlo safety check of a converged solution against the
/// uniform risk budget, with covariances recomputed along the solution's
/// own inputs.
fn mc_safety_check(scenario: &Scenario, sol: &Solution) -> Result<bool, CliError> {
    let ctx = scenario.planning_context(0.0)?;
    let prediction = predict_open_loop(
        &ctx.robot,
        &sol.inputs,
        &ctx.obstacles,
        &ctx.params,
        &ctx.noise,
        &ctx.config,
    )?;
    let n = ctx.config.n_steps;
    for t in 1..=n {
        for i in 0..ctx.boxes.len() {
            let alpha_it = ctx.risk.alpha(t - 1, i);
            let rel = Vector3::from_fn(|j, _| {
                sol.states[t][j] - prediction.obstacle_position_mean(t, i)[j]
            });
            let cov = prediction.relative_position_cov(t, i);
            let belief = GaussianBelief::new(
                DVector::from_column_slice(rel.as_slice()),
                nalgebra::DMatrix::from_fn(3, 3, |r, c| cov[(r, c)]),
            )?;
            let seed = scenario
                .seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add((t * ctx.boxes.len() + i) as u64);
            let p = mc_collision_probability(&belief, &ctx.boxes[i], MC_SAMPLES, seed)?;
            let bound = alpha_it + 3.0 * (alpha_it * (1.0 - alpha_it) / MC_SAMPLES as f64).sqrt();
            if p > bound {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

#[derive(Debug)]
pub struct SimulateOutcome {
    pub metrics: Option<Metrics>,
    pub collided: bool,
    pub any_solver_failure: bool,
    pub files: Vec<PathBuf>,
}

impl SimulateOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.collided {
            4
        } else if self.any_solver_failure {
            3
        } else {
            0
        }
    }
}

/// Runs the closed loop and writes simlog.csv, metrics.csv and the box-plot
/// SVGs. Collision maps to exit code 4, solver failures to 3; both are also
/// recorded per tick in the log.
pub fn cmd_simulate(
    scenario: &Scenario,
    duration: f64,
    seed: u64,
    out_dir: &Path,
) -> Result<SimulateOutcome, CliError> {
    warn_alpha_budget(scenario);
    std::fs::create_dir_all(out_dir)?;
    let log = run_closed_loop(scenario, duration, seed)?;
    let mut files = vec![out_dir.join("simlog.csv")];
    write_simlog(&log, &files[0])?;

    let collided = log.records.iter().any(|r| r.in_collision);
    let any_solver_failure = log.records.iter().any(|r| r.solver_failed);

    let metrics = if log.boxes.is_empty() {
        None
    } else {
        Some(compute_metrics(&log).map_err(|e| CliError::Solver(e.to_string()))?)
    };

    let metrics_path = out_dir.join("metrics.csv");
    let mut w = CsvWriter::create(
        &metrics_path,
        &[
            "metric",
            "count",
            "min",
            "p25",
            "median",
            "p75",
            "max",
            "whisker_low",
            "whisker_high",
            "outliers",
        ],
    )?;
    let mut plots: Vec<(&str, &str, SeriesSummary)> = Vec::new();
    if let Some(m) = &metrics {
        write_summary(&mut w, "distance", &m.distance_summary)?;
        write_summary(&mut w, "ttc_inverse", &m.ttc_summary)?;
        write_summary(&mut w, "solve_time", &m.solve_summary)?;
        plots.push(("distance_box.svg", "m", m.distance_summary));
        plots.push(("ttc_inverse_box.svg", "1/s", m.ttc_summary));
        plots.push(("solve_time_box.svg", "s", m.solve_summary));
    } else {
        let solve_times: Vec<f64> = log.records.iter().map(|r| r.solve_time).collect();
        let summary =
            ccmpc_core::sim::summarize(&solve_times).map_err(|e| CliError::Solver(e.to_string()))?;
        write_summary(&mut w, "solve_time", &summary)?;
        plots.push(("solve_time_box.svg", "s", summary));
    }
    w.finish()?;
    files.push(metrics_path);

    for (name, unit, summary) in plots {
        let path = out_dir.join(name);
        let title = name.trim_end_matches("_box.svg").replace('_', " ");
        std::fs::write(&path, svg::box_plot_svg(&title, unit, &summary))?;
        files.push(path);
    }

    Ok(SimulateOutcome {
        metrics,
        collided,
        any_solver_failure,
        files,
    })
}

fn write_summary(w: &mut CsvWriter, name: &str, s: &SeriesSummary) -> Result<(), CliError> {
    w.write_row(&[
        name.to_string(),
        s.count.to_string(),
        fmt_f64(s.min),
        fmt_f64(s.p25),
        fmt_f64(s.median),
        fmt_f64(s.p75),
        fmt_f64(s.max),
        fmt_f64(s.whisker_low),
        fmt_f64(s.whisker_high),
        s.outliers.to_string(),
    ])
}

/// Fixed simlog.csv column order: t, true robot state (8), per-obstacle
/// estimated mean position and position variance diagonal (6 each), input
/// (4), solve_ms, flags (bit 0 solver failure, bit 1 relaxed QP, bit 2
/// collision).
fn write_simlog(log: &SimLog, path: &Path) -> Result<(), CliError> {
    let n_obs = log.boxes.len();
    let mut header = vec![
        "t".to_string(),
        "px".into(),
        "py".into(),
        "pz".into(),
        "vx".into(),
        "vy".into(),
        "vz".into(),
        "yaw".into(),
        "yaw_rate".into(),
    ];
    for i in 0..n_obs {
        for suffix in ["est_qx", "est_qy", "est_qz", "var_qx", "var_qy", "var_qz"] {
            header.push(format!("{suffix}_{i}"));
        }
    }
    header.extend(["ux", "uy", "uz", "uyaw", "solve_ms", "flags"].map(String::from));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut w = CsvWriter::create(path, &header_refs)?;
    for r in &log.records {
        let mut fields = vec![fmt_f64(r.time)];
        fields.extend(r.robot.to_vector().iter().map(|v| fmt_f64(*v)));
        for est in &r.estimates {
            for j in 0..3 {
                fields.push(fmt_f64(est.mean()[j]));
            }
            for j in 0..3 {
                fields.push(fmt_f64(est.cov()[(j, j)]));
            }
        }
        fields.extend(r.input.iter().map(|v| fmt_f64(*v)));
        fields.push(fmt_f64(r.solve_time * 1e3));
        let flags =
            (r.solver_failed as u8) | ((r.relaxed as u8) << 1) | ((r.in_collision as u8) << 2);
        fields.push(flags.to_string());
        w.write_row(&fields)?;
    }
    w.finish()
}

#[derive(Debug)]
pub struct ValidateOutcome {
    pub cases: Vec<SafetyCase>,
    pub all_pass: bool,
    pub files: Vec<PathBuf>,
}

impl ValidateOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.all_pass {
            0
        } else {
            5
        }
    }
}

/// Runs the randomized safety-chain certification and writes report.csv.
/// `deflation_sigmas > 0` removes that many standard deviations of inflation
/// (negative-control test mode). Cases run in parallel on fixed substreams,
/// so the report is independent of worker count.
pub fn cmd_validate(
    n_cases: usize,
    n_samples: usize,
    seed: u64,
    out_dir: &Path,
    deflation_sigmas: f64,
) -> Result<ValidateOutcome, CliError> {
    if n_samples < 10_000 {
        return Err(CliError::Scenario(format!(
            "validation needs at least 10000 samples per case, got {n_samples}"
        )));
    }
    if n_cases == 0 {
        return Err(CliError::Scenario("validation needs at least one case".into()));
    }
    std::fs::create_dir_all(out_dir)?;

    let cases: Vec<SafetyCase> = (0..n_cases as u64)
        .into_par_iter()
        .map(|case| safety_chain_case(seed, case, n_samples, deflation_sigmas))
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Solver(e.to_string()))?;

    let path = out_dir.join("report.csv");
    let mut w = CsvWriter::create(
        &path,
        &["case", "alpha_it", "estimated_probability", "bound", "margin", "pass"],
    )?;
    for (i, c) in cases.iter().enumerate() {
        w.write_row(&[
            i.to_string(),
            fmt_f64(c.alpha_it),
            fmt_f64(c.probability),
            fmt_f64(c.bound),
            fmt_f64(c.bound - c.probability),
            (c.passes() as u8).to_string(),
        ])?;
    }
    w.finish()?;

    let all_pass = cases.iter().all(SafetyCase::passes);
    Ok(ValidateOutcome {
        cases,
        all_pass,
        files: vec![path],
    })
}
