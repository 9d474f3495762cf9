//! Closed-loop MPC simulation: true-world integration with process noise,
//! social-force pedestrians, Kalman estimation of the obstacles, planning at
//! the control tick and safety metrics.
//!
//! The control tick equals the planner timestep with zero-order hold of the
//! first planned input; the world integrates at a finer fixed substep. Per
//! tick: measure and Kalman-filter all obstacles, assemble and solve the OCP
//! warm-started from the shifted previous solution, apply the first input,
//! then advance the world. A solver failure keeps the previous input and
//! flags the tick. The whole run is a pure function of (scenario, duration,
//! seed).

mod kalman;
mod metrics;
mod social;

pub use kalman::kalman_update;
pub use metrics::{compute_metrics, summarize, Metrics, SeriesSummary};
pub use social::{social_force_accel, step_pedestrian, Pedestrian, SocialForceParams};

use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::chance::BoundingBox;
use crate::dynamics::{
    obstacle_jacobian, obstacle_step, propagate_covariance, rk4_step, to_dmatrix, InputVector,
    ObstacleState, RobotParams, RobotState, StateVector, STATE_DIM,
};
use crate::error::{Error, Result};
use crate::gaussian::{psd_factor, GaussianBelief};
use crate::ocp::{assemble_nlp, solve_sqp, ConstraintKind};
use crate::scenario::Scenario;

/// One control tick of a closed-loop run.
#[derive(Debug, Clone)]
pub struct SimLogRecord {
    pub time: f64,
    /// True robot state at the tick.
    pub robot: RobotState,
    /// True obstacle states (scripted obstacles first, then pedestrians).
    pub obstacles: Vec<ObstacleState>,
    /// Post-update obstacle beliefs in the same order.
    pub estimates: Vec<GaussianBelief>,
    /// Input applied over [time, time + tick).
    pub input: InputVector,
    /// Planned mean trajectory x_0..x_N (empty if the solver failed).
    pub planned: Vec<StateVector>,
    /// Planning latency (assembly + solve) in seconds.
    pub solve_time: f64,
    pub solver_failed: bool,
    pub relaxed: bool,
    /// True iff the robot center lies inside some obstacle's true box.
    pub in_collision: bool,
}

/// Timestamped closed-loop log; one record per control tick.
#[derive(Debug, Clone)]
pub struct SimLog {
    pub records: Vec<SimLogRecord>,
    /// Obstacle boxes in record order, for clearance computations.
    pub boxes: Vec<BoundingBox>,
    /// Control tick (s).
    pub tick: f64,
}

/// True world state.
#[derive(Debug, Clone)]
pub struct World {
    pub robot: RobotState,
    pub scripted: Vec<ObstacleState>,
    pub pedestrians: Vec<Pedestrian>,
}

/// World-integration model: dynamics parameters plus per-control-tick noise
/// factors (scaled per substep inside [`step_world`]).
#[derive(Debug, Clone)]
pub struct WorldModel {
    pub robot_params: RobotParams,
    /// PSD factor of the robot process noise per control tick.
    robot_noise_factor: DMatrix<f64>,
    /// PSD factors of each scripted obstacle's process noise per tick.
    scripted_noise_factors: Vec<DMatrix<f64>>,
    pub waypoints: Vec<Vector2<f64>>,
    pub social: SocialForceParams,
    /// Control tick the noise covariances refer to (s).
    pub tick: f64,
}

impl WorldModel {
    pub fn new(
        robot_params: RobotParams,
        robot_noise: &DMatrix<f64>,
        scripted_noise: &[DMatrix<f64>],
        waypoints: Vec<Vector2<f64>>,
        social: SocialForceParams,
        tick: f64,
    ) -> Self {
        Self {
            robot_params,
            robot_noise_factor: psd_factor(robot_noise),
            scripted_noise_factors: scripted_noise.iter().map(psd_factor).collect(),
            waypoints,
            social,
            tick,
        }
    }
}

fn sample_noise(factor: &DMatrix<f64>, scale: f64, rng: &mut ChaCha8Rng) -> StateVector {
    let z = DVector::from_fn(STATE_DIM, |_, _| rng.sample::<f64, _>(StandardNormal));
    let w = factor * z;
    StateVector::from_column_slice(w.as_slice()) * scale
}

/// Advances the world by `dt`: the robot by RK4 plus sampled process noise,
/// scripted obstacles by their constant-velocity model plus noise, and
/// pedestrians by semi-implicit Euler on the social forces. Noise
/// covariances are stated per control tick and scaled by `dt/tick`, so the
/// accumulated variance over one tick matches the stated covariance.
pub fn step_world(world: &mut World, input: &InputVector, dt: f64, model: &WorldModel, rng: &mut ChaCha8Rng) {
    debug_assert!(dt > 0.0);
    let scale = (dt / model.tick).sqrt();

    let noise = sample_noise(&model.robot_noise_factor, scale, rng);
    let next = rk4_step(&world.robot, input, &model.robot_params, dt).to_vector() + noise;
    world.robot = RobotState::from_vector(&next);

    for (obstacle, factor) in world.scripted.iter_mut().zip(&model.scripted_noise_factors) {
        let noise = sample_noise(factor, scale, rng);
        let next = obstacle_step(obstacle, dt).to_vector() + noise;
        *obstacle = ObstacleState::from_vector(&next);
    }

    if !world.pedestrians.is_empty() {
        let snapshot = world.pedestrians.clone();
        let robot_pos = world.robot.position;
        for (i, ped) in world.pedestrians.iter_mut().enumerate() {
            let others: Vec<Pedestrian> = snapshot
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, p)| p.clone())
                .collect();
            let accel = social_force_accel(ped, &model.waypoints, &others, &robot_pos, &model.social);
            step_pedestrian(ped, &model.waypoints, accel, dt, &model.social);
        }
    }
}

fn pedestrian_obstacle_state(ped: &Pedestrian, center_height: f64) -> ObstacleState {
    ObstacleState {
        position: Vector3::new(ped.position.x, ped.position.y, center_height),
        velocity: Vector3::new(ped.velocity.x, ped.velocity.y, 0.0),
        yaw: 0.0,
        yaw_rate: 0.0,
    }
}

/// Runs the closed loop for `duration` seconds; deterministic in
/// `(scenario, duration, seed)`.
pub fn run_closed_loop(scenario: &Scenario, duration: f64, seed: u64) -> Result<SimLog> {
    if !(duration > 0.0) {
        return Err(Error::Scenario(format!("duration must be positive, got {duration}")));
    }
    let dt = scenario.ocp.dt;
    let n_ticks = (duration / dt).round().max(1.0) as usize;
    let substeps = (dt / scenario.sim.world_substep).round().max(1.0) as usize;
    let substep = dt / substeps as f64;

    let specs = scenario.planner_obstacles();
    let mut ctx = scenario.planning_context(0.0)?;
    let boxes: Vec<BoundingBox> = specs.iter().map(|s| s.bounding_box).collect();
    let meas_vars: Vec<f64> = specs.iter().map(|s| s.measurement_variance).collect();

    let (ped_cfg, pedestrians, waypoints, social) = match &scenario.pedestrians {
        Some(cfg) => {
            let peds: Vec<Pedestrian> = cfg
                .spawns
                .iter()
                .map(|(pos, wp)| Pedestrian {
                    position: *pos,
                    velocity: Vector2::zeros(),
                    current_waypoint: *wp,
                    desired_speed: cfg.desired_speed,
                    radius: cfg.radius,
                })
                .collect();
            let social = SocialForceParams {
                relaxation_time: cfg.relaxation_time,
                repulsion_strength: cfg.repulsion_strength,
                repulsion_range: cfg.repulsion_range,
                max_accel: cfg.max_accel,
                max_speed_factor: cfg.max_speed_factor,
                robot_radius: cfg.radius,
            };
            (Some(cfg), peds, cfg.waypoints.clone(), social)
        }
        None => (None, Vec::new(), Vec::new(), SocialForceParams::default()),
    };

    let model = WorldModel::new(
        scenario.robot_params,
        &scenario.robot_noise,
        &scenario
            .obstacles
            .iter()
            .map(|o| o.process_noise.clone())
            .collect::<Vec<_>>(),
        waypoints,
        social,
        dt,
    );

    let mut world = World {
        robot: RobotState::from_vector(&StateVector::from_column_slice(
            scenario.robot_initial.mean().as_slice(),
        )),
        scripted: scenario
            .obstacles
            .iter()
            .map(|o| {
                ObstacleState::from_vector(&StateVector::from_column_slice(
                    o.initial.mean().as_slice(),
                ))
            })
            .collect(),
        pedestrians,
    };

    let mut beliefs: Vec<GaussianBelief> = specs.iter().map(|s| s.initial.clone()).collect();
    let mut warm: Vec<InputVector> = vec![InputVector::zeros(); scenario.ocp.n_steps];
    let mut prev_input = InputVector::zeros();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n_ticks);

    for k in 0..n_ticks {
        let t = k as f64 * dt;

        // True obstacle states at this tick (scripted first, pedestrians after).
        let mut true_obstacles: Vec<ObstacleState> = world.scripted.clone();
        if let Some(cfg) = ped_cfg {
            true_obstacles.extend(
                world
                    .pedestrians
                    .iter()
                    .map(|p| pedestrian_obstacle_state(p, cfg.box_center_height)),
            );
        }

        // Kalman predict + position update per obstacle.
        for (i, belief) in beliefs.iter_mut().enumerate() {
            let predicted = if k == 0 {
                belief.clone()
            } else {
                let state = ObstacleState::from_vector(&StateVector::from_column_slice(
                    belief.mean().as_slice(),
                ));
                let jac = obstacle_jacobian(&state, dt);
                let mean = obstacle_step(&state, dt).to_vector();
                let cov =
                    propagate_covariance(belief.cov(), &to_dmatrix(&jac), &specs[i].process_noise)?;
                GaussianBelief::new(DVector::from_column_slice(mean.as_slice()), cov)?
            };
            let sigma = meas_vars[i].sqrt();
            let z = Vector3::from_fn(|j, _| {
                true_obstacles[i].position[j] + sigma * rng.sample::<f64, _>(StandardNormal)
            });
            *belief = kalman_update(&predicted, &z, meas_vars[i])?;
        }

        // Plan from the current true robot state and filtered obstacles.
        let planning_start = std::time::Instant::now();
        ctx.robot = GaussianBelief::new(
            DVector::from_column_slice(world.robot.to_vector().as_slice()),
            scenario.robot_initial.cov().clone(),
        )?;
        ctx.obstacles = beliefs.clone();
        ctx.config = scenario.ocp_config_at(t);
        let solve = assemble_nlp(&ctx.inputs(&warm), ConstraintKind::EllipsoidCc)
            .and_then(|problem| {
                let init = problem.initial_decision_vector(&warm)?;
                solve_sqp(
                    &problem,
                    &init,
                    scenario.solver.mpc_tol,
                    scenario.solver.mpc_max_iter,
                )
            });
        let solve_time = planning_start.elapsed().as_secs_f64();

        let (input, planned, solver_failed, relaxed) = match solve {
            Ok(sol) => {
                // Warm start for the next tick: shift, repeat the last input.
                for i in 0..warm.len() {
                    warm[i] = *sol.inputs.get(i + 1).unwrap_or(sol.inputs.last().expect("n ≥ 1"));
                }
                (sol.inputs[0], sol.states.clone(), false, sol.relaxed)
            }
            Err(_) => (prev_input, Vec::new(), true, false),
        };

        let in_collision = true_obstacles.iter().zip(&boxes).any(|(o, b)| {
            let rel = world.robot.position - o.position;
            b.contains(&rel)
        });

        records.push(SimLogRecord {
            time: t,
            robot: world.robot,
            obstacles: true_obstacles,
            estimates: beliefs.clone(),
            input,
            planned,
            solve_time,
            solver_failed,
            relaxed,
            in_collision,
        });

        for _ in 0..substeps {
            step_world(&mut world, &input, substep, &model, &mut rng);
        }
        prev_input = input;
    }

    Ok(SimLog {
        records,
        boxes,
        tick: dt,
    })
}
