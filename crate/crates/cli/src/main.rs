use std::path::PathBuf;

use clap::{Parser, Subcommand};

use ccmpc_cli::{cmd_benchmark, cmd_simulate, cmd_validate, CliError};
use ccmpc_core::ocp::ConstraintKind;
use ccmpc_core::scenario::parse_scenario;

const SCENARIO_HELP: &str = "\
Scenario files are JSON documents (schema_version 1). Keys:
  name                       scenario label
  robot.initial_state        position [m], velocity [m/s], yaw [rad], yaw_rate [rad/s]
  robot.initial_cov_diag     8 variances of the initial robot belief
  robot.params               gain [3], yaw_gain, time_constant [3] (s), yaw_time_constant (s)
  robot.process_noise_diag   8 per-step process-noise variances W
  obstacles[]                scripted constant-velocity obstacles:
    initial_state, initial_cov_diag, box_semi_sizes [m], process_noise_diag,
    measurement_variance [m^2]
  pedestrians                optional social-force crowd:
    spawns[] {position [m], waypoint_index}, waypoints[] [m], desired_speed,
    radius, box_semi_sizes, box_center_height, initial_cov_diag,
    process_noise_diag, measurement_variance, relaxation_time,
    repulsion_strength, repulsion_range, max_accel, max_speed_factor
  ocp                        n_steps, dt (s), alpha in (0,1), state_weights_diag [8],
    input_weights_diag [4], state_lower/state_upper [8, null = unbounded],
    input_lower/input_upper [4], robust_sigma_factor, use_fd_jacobians
  reference                  {type: goal, state} or {type: path, waypoints [m],
    speed, reverse, start_arc_length, yaw}
  solver                     tol, max_iter (benchmark), mpc_tol, mpc_max_iter (loop)
  sim.world_substep          world integration substep (s)
  seed                       default RNG seed

Exit codes: 0 success, 2 scenario error, 3 solver failure, 4 collision,
5 validation failure.";

/// Chance-constrained motion planning with moving box obstacles.
#[derive(Parser)]
#[command(name = "ccmpc", version, after_long_help = SCENARIO_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// One-horizon solve per constraint formulation; writes results.csv and
    /// trajectories.csv with objectives normalized to ellipsoid_cc = 1.0.
    Benchmark {
        /// Scenario file (exactly one obstacle).
        #[arg(long)]
        scenario: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated subset of
        /// ellipsoid_cc,robust_set_bound,linearized_cc.
        #[arg(long, value_delimiter = ',', default_values_t = [
            "ellipsoid_cc".to_string(),
            "robust_set_bound".to_string(),
            "linearized_cc".to_string(),
        ])]
        kinds: Vec<String>,
    },
    /// Closed-loop MPC run with Kalman-filtered obstacles; writes
    /// simlog.csv, metrics.csv and box-plot SVGs.
    Simulate {
        /// Scenario file.
        #[arg(long)]
        scenario: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Simulated duration in seconds.
        #[arg(long, default_value_t = 30.0)]
        duration: f64,
        /// RNG seed (defaults to the scenario's seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Randomized Monte Carlo certification of the safety bound; writes
    /// report.csv and exits nonzero if any case exceeds its risk budget.
    Validate {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of randomized cases.
        #[arg(long, default_value_t = 100)]
        cases: usize,
        /// Monte Carlo samples per case (at least 10000).
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        /// RNG seed.
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        /// Test mode: remove this many standard deviations of inflation
        /// (a negative control that must fail).
        #[arg(long, default_value_t = 0.0, hide = true)]
        inject_deflation: f64,
    },
}

fn run() -> Result<i32, CliError> {
    let cli = Cli::parse();
    match cli.command {
        Command::Benchmark {
            scenario,
            out,
            kinds,
        } => {
            let scenario = parse_scenario(&scenario)?;
            let kinds: Vec<ConstraintKind> = kinds
                .iter()
                .map(|k| k.parse())
                .collect::<Result<_, _>>()
                .map_err(|e: ccmpc_core::Error| CliError::Scenario(e.to_string()))?;
            let outcome = cmd_benchmark(&scenario, &kinds, &out)?;
            for row in &outcome.rows {
                match &row.solution {
                    Some(sol) => println!(
                        "{}: objective {:.6} (relative {:.4}), {} in {} iterations, {:.1} ms",
                        row.kind,
                        sol.objective,
                        row.relative,
                        if sol.converged { "converged" } else { "not converged" },
                        sol.iterations,
                        sol.wall_time * 1e3,
                    ),
                    None => println!("{}: solve failed", row.kind),
                }
            }
            Ok(outcome.exit_code())
        }
        Command::Simulate {
            scenario,
            out,
            duration,
            seed,
        } => {
            let scenario = parse_scenario(&scenario)?;
            let seed = seed.unwrap_or(scenario.seed);
            let outcome = cmd_simulate(&scenario, duration, seed, &out)?;
            if let Some(m) = &outcome.metrics {
                println!(
                    "median distance {:.3} m, median TTC^-1 {:.4} 1/s, median solve {:.2} ms",
                    m.distance_summary.median,
                    m.ttc_summary.median,
                    m.solve_summary.median * 1e3
                );
            }
            if outcome.collided {
                eprintln!("collision detected");
            }
            if outcome.any_solver_failure {
                eprintln!("solver failures occurred during the run");
            }
            Ok(outcome.exit_code())
        }
        Command::Validate {
            out,
            cases,
            samples,
            seed,
            inject_deflation,
        } => {
            let outcome = cmd_validate(cases, samples, seed, &out, inject_deflation)?;
            let failures = outcome.cases.iter().filter(|c| !c.passes()).count();
            println!(
                "{} cases, {} failures{}",
                outcome.cases.len(),
                failures,
                if outcome.all_pass { " — bound certified" } else { "" }
            );
            Ok(outcome.exit_code())
        }
    }
}

fn main() {
    match run() {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
