//! Versioned JSON scenario files.
//!
//! A scenario bundles the robot model and initial belief, scripted
//! constant-velocity obstacles, optional social-force pedestrians, the OCP
//! configuration, the tracking reference and solver/simulation options.
//! Parsing rejects unknown keys and validates every invariant before any
//! computation; error messages carry the offending key and, for syntax and
//! unknown-key errors, the line/column reported by the JSON parser.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::chance::{uniform_risk_allocation, BoundingBox, RiskAllocation};
use crate::dynamics::{yaw_rotation, DisturbanceSpec, InputVector, RobotParams, StateVector, STATE_DIM};
use crate::error::{Error, Result};
use crate::gaussian::GaussianBelief;
use crate::ocp::{OcpConfig, PlanningInputs};

/// Current scenario schema version.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    schema_version: u32,
    name: String,
    robot: RobotSection,
    #[serde(default)]
    obstacles: Vec<ObstacleSection>,
    #[serde(default)]
    pedestrians: Option<PedestrianSection>,
    ocp: OcpSection,
    reference: ReferenceSection,
    #[serde(default)]
    solver: SolverOptions,
    #[serde(default)]
    sim: SimOptions,
    #[serde(default)]
    seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateSection {
    position: [f64; 3],
    velocity: [f64; 3],
    yaw: f64,
    yaw_rate: f64,
}

impl StateSection {
    fn to_vector(&self) -> StateVector {
        let mut x = StateVector::zeros();
        for j in 0..3 {
            x[j] = self.position[j];
            x[3 + j] = self.velocity[j];
        }
        x[6] = self.yaw;
        x[7] = self.yaw_rate;
        x
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RobotSection {
    initial_state: StateSection,
    initial_cov_diag: [f64; 8],
    params: ParamsSection,
    process_noise_diag: [f64; 8],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsSection {
    gain: [f64; 3],
    yaw_gain: f64,
    time_constant: [f64; 3],
    yaw_time_constant: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObstacleSection {
    initial_state: StateSection,
    initial_cov_diag: [f64; 8],
    box_semi_sizes: [f64; 3],
    process_noise_diag: [f64; 8],
    measurement_variance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PedestrianSection {
    spawns: Vec<SpawnSection>,
    waypoints: Vec<[f64; 2]>,
    desired_speed: f64,
    radius: f64,
    box_semi_sizes: [f64; 3],
    box_center_height: f64,
    initial_cov_diag: [f64; 8],
    process_noise_diag: [f64; 8],
    measurement_variance: f64,
    #[serde(default = "default_relaxation_time")]
    relaxation_time: f64,
    #[serde(default = "default_repulsion_strength")]
    repulsion_strength: f64,
    #[serde(default = "default_repulsion_range")]
    repulsion_range: f64,
    #[serde(default = "default_max_accel")]
    max_accel: f64,
    #[serde(default = "default_max_speed_factor")]
    max_speed_factor: f64,
}

fn default_relaxation_time() -> f64 {
    0.5
}
fn default_repulsion_strength() -> f64 {
    2.0
}
fn default_repulsion_range() -> f64 {
    0.8
}
fn default_max_accel() -> f64 {
    5.0
}
fn default_max_speed_factor() -> f64 {
    1.3
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpawnSection {
    position: [f64; 2],
    waypoint_index: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OcpSection {
    n_steps: usize,
    dt: f64,
    alpha: f64,
    state_weights_diag: [f64; 8],
    input_weights_diag: [f64; 4],
    #[serde(default)]
    state_lower: [Option<f64>; 8],
    #[serde(default)]
    state_upper: [Option<f64>; 8],
    input_lower: [f64; 4],
    input_upper: [f64; 4],
    #[serde(default = "default_robust_sigma_factor")]
    robust_sigma_factor: f64,
    #[serde(default)]
    use_fd_jacobians: bool,
}

fn default_robust_sigma_factor() -> f64 {
    4.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "type", rename_all = "snake_case")]
enum ReferenceSection {
    Goal {
        state: StateSection,
    },
    Path {
        waypoints: Vec<[f64; 3]>,
        speed: f64,
        #[serde(default)]
        reverse: bool,
        #[serde(default)]
        start_arc_length: f64,
        #[serde(default)]
        yaw: f64,
    },
}

/// SQP tolerances; the benchmark solve uses `tol`/`max_iter`, the real-time
/// MPC loop uses the looser `mpc_tol`/`mpc_max_iter`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverOptions {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_mpc_tol")]
    pub mpc_tol: f64,
    #[serde(default = "default_mpc_max_iter")]
    pub mpc_max_iter: usize,
}

fn default_tol() -> f64 {
    1e-6
}
fn default_max_iter() -> usize {
    100
}
fn default_mpc_tol() -> f64 {
    1e-4
}
fn default_mpc_max_iter() -> usize {
    15
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: default_tol(),
            max_iter: default_max_iter(),
            mpc_tol: default_mpc_tol(),
            mpc_max_iter: default_mpc_max_iter(),
        }
    }
}

/// World-integration options: the control tick is the OCP `dt`, the world
/// integrates at this finer fixed substep.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimOptions {
    #[serde(default = "default_world_substep")]
    pub world_substep: f64,
}

fn default_world_substep() -> f64 {
    0.01
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            world_substep: default_world_substep(),
        }
    }
}

/// A scripted constant-velocity obstacle as seen by the planner.
#[derive(Debug, Clone)]
pub struct ObstacleSpec {
    pub initial: GaussianBelief,
    pub bounding_box: BoundingBox,
    pub process_noise: DMatrix<f64>,
    pub measurement_variance: f64,
}

/// Social-force pedestrian population sharing one waypoint loop.
#[derive(Debug, Clone)]
pub struct PedestrianConfig {
    pub spawns: Vec<(Vector2<f64>, usize)>,
    pub waypoints: Vec<Vector2<f64>>,
    pub desired_speed: f64,
    pub radius: f64,
    pub bounding_box: BoundingBox,
    pub box_center_height: f64,
    pub initial_cov_diag: [f64; 8],
    pub process_noise: DMatrix<f64>,
    pub measurement_variance: f64,
    pub relaxation_time: f64,
    pub repulsion_strength: f64,
    pub repulsion_range: f64,
    pub max_accel: f64,
    pub max_speed_factor: f64,
}

/// The tracking reference: a fixed goal state or a (possibly reversed)
/// closed polyline followed at constant speed.
#[derive(Debug, Clone)]
pub enum ReferenceSpec {
    Goal(StateVector),
    Path {
        waypoints: Vec<Vector3<f64>>,
        speed: f64,
        reverse: bool,
        start_arc_length: f64,
        yaw: f64,
    },
}

impl ReferenceSpec {
    /// Reference state at absolute time `t`.
    pub fn state_at(&self, t: f64) -> StateVector {
        match self {
            ReferenceSpec::Goal(state) => *state,
            ReferenceSpec::Path {
                waypoints,
                speed,
                reverse,
                start_arc_length,
                yaw,
            } => {
                let dir = if *reverse { -1.0 } else { 1.0 };
                let s = start_arc_length + dir * speed * t;
                let (pos, tangent) = closed_polyline_point(waypoints, s);
                let world_v = tangent * (dir * speed);
                // Reference velocity expressed in the local frame of the
                // reference yaw.
                let body_v = yaw_rotation(*yaw).transpose() * world_v;
                let mut x = StateVector::zeros();
                x.fixed_rows_mut::<3>(0).copy_from(&pos);
                x.fixed_rows_mut::<3>(3).copy_from(&body_v);
                x[6] = *yaw;
                x
            }
        }
    }

    /// Reference states for steps 1..=n of a horizon starting at `t0`.
    pub fn horizon(&self, t0: f64, dt: f64, n: usize) -> Vec<StateVector> {
        (1..=n).map(|k| self.state_at(t0 + k as f64 * dt)).collect()
    }
}

/// Point and unit tangent at arc length `s` (wrapped) along the closed
/// polyline through `waypoints`.
fn closed_polyline_point(waypoints: &[Vector3<f64>], s: f64) -> (Vector3<f64>, Vector3<f64>) {
    let n = waypoints.len();
    let mut lengths = Vec::with_capacity(n);
    let mut total = 0.0;
    for i in 0..n {
        let seg = waypoints[(i + 1) % n] - waypoints[i];
        let len = seg.norm();
        lengths.push(len);
        total += len;
    }
    let mut s = s % total;
    if s < 0.0 {
        s += total;
    }
    for i in 0..n {
        if s <= lengths[i] || i == n - 1 {
            let seg = waypoints[(i + 1) % n] - waypoints[i];
            let tangent = seg / lengths[i];
            return (waypoints[i] + tangent * s, tangent);
        }
        s -= lengths[i];
    }
    unreachable!("arc length wrapped into the loop");
}

/// A fully validated scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub robot_initial: GaussianBelief,
    pub robot_params: RobotParams,
    pub robot_noise: DMatrix<f64>,
    pub obstacles: Vec<ObstacleSpec>,
    pub pedestrians: Option<PedestrianConfig>,
    pub ocp: OcpConfig,
    pub reference: ReferenceSpec,
    pub solver: SolverOptions,
    pub sim: SimOptions,
    pub seed: u64,
}

impl Scenario {
    /// Scripted obstacles followed by one planner obstacle per pedestrian.
    pub fn planner_obstacles(&self) -> Vec<ObstacleSpec> {
        let mut specs = self.obstacles.clone();
        if let Some(peds) = &self.pedestrians {
            for (pos, _) in &peds.spawns {
                let mut mean = DVector::zeros(STATE_DIM);
                mean[0] = pos.x;
                mean[1] = pos.y;
                mean[2] = peds.box_center_height;
                let initial =
                    GaussianBelief::from_diagonal(mean, &peds.initial_cov_diag)
                        .expect("validated pedestrian covariance");
                specs.push(ObstacleSpec {
                    initial,
                    bounding_box: peds.bounding_box,
                    process_noise: peds.process_noise.clone(),
                    measurement_variance: peds.measurement_variance,
                });
            }
        }
        specs
    }

    /// OCP configuration with the reference window starting at time `t0`.
    pub fn ocp_config_at(&self, t0: f64) -> OcpConfig {
        let mut config = self.ocp.clone();
        config.reference = self.reference.horizon(t0, config.dt, config.n_steps);
        config
    }

    /// Largest per-step, per-obstacle risk budget under uniform allocation;
    /// above 0.5 the box "inflation" deflates and the CLI warns.
    pub fn max_alpha_it(&self) -> f64 {
        let n_obs = self.planner_obstacles().len().max(1);
        self.ocp.alpha / (self.ocp.n_steps * n_obs) as f64
    }

    /// Owned solve context at the scenario's initial condition, with the
    /// reference window starting at time `t0`.
    pub fn planning_context(&self, t0: f64) -> Result<PlanningContext> {
        let specs = self.planner_obstacles();
        let config = self.ocp_config_at(t0);
        let boxes: Vec<BoundingBox> = specs.iter().map(|s| s.bounding_box).collect();
        let obstacles: Vec<GaussianBelief> = specs.iter().map(|s| s.initial.clone()).collect();
        let noise = DisturbanceSpec::new(
            self.robot_noise.clone(),
            specs.iter().map(|s| s.process_noise.clone()).collect(),
        )?;
        let risk = if specs.is_empty() {
            RiskAllocation::new(config.alpha, DMatrix::zeros(config.n_steps, 0))?
        } else {
            uniform_risk_allocation(config.alpha, config.n_steps, specs.len())?
        };
        Ok(PlanningContext {
            config,
            params: self.robot_params,
            noise,
            robot: self.robot_initial.clone(),
            obstacles,
            boxes,
            risk,
        })
    }
}

/// Owned bundle of everything one solve needs; the MPC loop updates the
/// beliefs and reference in place between ticks.
#[derive(Debug, Clone)]
pub struct PlanningContext {
    pub config: OcpConfig,
    pub params: RobotParams,
    pub noise: DisturbanceSpec,
    pub robot: GaussianBelief,
    pub obstacles: Vec<GaussianBelief>,
    pub boxes: Vec<BoundingBox>,
    pub risk: RiskAllocation,
}

impl PlanningContext {
    /// Borrowed view consumed by `assemble_nlp`.
    pub fn inputs<'a>(&'a self, warm_inputs: &'a [InputVector]) -> PlanningInputs<'a> {
        PlanningInputs {
            config: &self.config,
            params: &self.params,
            noise: &self.noise,
            robot: &self.robot,
            obstacles: &self.obstacles,
            boxes: &self.boxes,
            risk: &self.risk,
            warm_inputs,
        }
    }
}

fn err(msg: impl Into<String>) -> Error {
    Error::Scenario(msg.into())
}

fn finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(err(format!("{name} must be finite, got {v}")))
    }
}

fn positive(name: &str, v: f64) -> Result<f64> {
    finite(name, v)?;
    if v > 0.0 {
        Ok(v)
    } else {
        Err(err(format!("{name} must be positive, got {v}")))
    }
}

fn nonnegative_diag(name: &str, d: &[f64]) -> Result<DMatrix<f64>> {
    for (i, v) in d.iter().enumerate() {
        if !v.is_finite() || *v < 0.0 {
            return Err(err(format!("{name}[{i}] must be a nonnegative variance, got {v}")));
        }
    }
    Ok(DMatrix::from_diagonal(&DVector::from_row_slice(d)))
}

fn belief_from(name: &str, state: &StateSection, cov_diag: &[f64; 8]) -> Result<GaussianBelief> {
    let x = state.to_vector();
    if x.iter().any(|v| !v.is_finite()) {
        return Err(err(format!("{name}.initial_state must be finite")));
    }
    nonnegative_diag(&format!("{name}.initial_cov_diag"), cov_diag)?;
    GaussianBelief::from_diagonal(DVector::from_row_slice(x.as_slice()), cov_diag)
        .map_err(|e| err(format!("{name}: {e}")))
}

impl ScenarioFile {
    fn validate(self) -> Result<Scenario> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(err(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let robot_initial = belief_from("robot", &self.robot.initial_state, &self.robot.initial_cov_diag)?;
        let p = &self.robot.params;
        let robot_params = RobotParams::new(
            Vector3::from_row_slice(&p.gain),
            p.yaw_gain,
            Vector3::from_row_slice(&p.time_constant),
            p.yaw_time_constant,
        )
        .map_err(|e| err(format!("robot.params: {e}")))?;
        let robot_noise = nonnegative_diag("robot.process_noise_diag", &self.robot.process_noise_diag)?;

        let mut obstacles = Vec::with_capacity(self.obstacles.len());
        for (i, o) in self.obstacles.iter().enumerate() {
            let name = format!("obstacles[{i}]");
            let initial = belief_from(&name, &o.initial_state, &o.initial_cov_diag)?;
            let bounding_box = BoundingBox::new(Vector3::from_row_slice(&o.box_semi_sizes))
                .map_err(|e| err(format!("{name}.box_semi_sizes: {e}")))?;
            let process_noise =
                nonnegative_diag(&format!("{name}.process_noise_diag"), &o.process_noise_diag)?;
            if o.measurement_variance < 0.0 || !o.measurement_variance.is_finite() {
                return Err(err(format!("{name}.measurement_variance must be nonnegative")));
            }
            obstacles.push(ObstacleSpec {
                initial,
                bounding_box,
                process_noise,
                measurement_variance: o.measurement_variance,
            });
        }

        let pedestrians = match &self.pedestrians {
            None => None,
            Some(s) => {
                if s.spawns.is_empty() {
                    return Err(err("pedestrians.spawns must not be empty"));
                }
                if s.waypoints.len() < 2 {
                    return Err(err("pedestrians.waypoints needs at least two points"));
                }
                positive("pedestrians.desired_speed", s.desired_speed)?;
                positive("pedestrians.radius", s.radius)?;
                positive("pedestrians.relaxation_time", s.relaxation_time)?;
                positive("pedestrians.max_accel", s.max_accel)?;
                positive("pedestrians.repulsion_range", s.repulsion_range)?;
                finite("pedestrians.repulsion_strength", s.repulsion_strength)?;
                if s.max_speed_factor < 1.0 {
                    return Err(err("pedestrians.max_speed_factor must be at least 1"));
                }
                for (i, spawn) in s.spawns.iter().enumerate() {
                    if spawn.waypoint_index >= s.waypoints.len() {
                        return Err(err(format!(
                            "pedestrians.spawns[{i}].waypoint_index {} out of range",
                            spawn.waypoint_index
                        )));
                    }
                }
                let bounding_box = BoundingBox::new(Vector3::from_row_slice(&s.box_semi_sizes))
                    .map_err(|e| err(format!("pedestrians.box_semi_sizes: {e}")))?;
                nonnegative_diag("pedestrians.initial_cov_diag", &s.initial_cov_diag)?;
                let process_noise =
                    nonnegative_diag("pedestrians.process_noise_diag", &s.process_noise_diag)?;
                if s.measurement_variance < 0.0 {
                    return Err(err("pedestrians.measurement_variance must be nonnegative"));
                }
                Some(PedestrianConfig {
                    spawns: s
                        .spawns
                        .iter()
                        .map(|sp| (Vector2::from_row_slice(&sp.position), sp.waypoint_index))
                        .collect(),
                    waypoints: s.waypoints.iter().map(|w| Vector2::from_row_slice(w)).collect(),
                    desired_speed: s.desired_speed,
                    radius: s.radius,
                    bounding_box,
                    box_center_height: s.box_center_height,
                    initial_cov_diag: s.initial_cov_diag,
                    process_noise,
                    measurement_variance: s.measurement_variance,
                    relaxation_time: s.relaxation_time,
                    repulsion_strength: s.repulsion_strength,
                    repulsion_range: s.repulsion_range,
                    max_accel: s.max_accel,
                    max_speed_factor: s.max_speed_factor,
                })
            }
        };

        let o = &self.ocp;
        if o.n_steps == 0 {
            return Err(err("ocp.n_steps must be at least 1"));
        }
        positive("ocp.dt", o.dt)?;
        if !(o.alpha > 0.0 && o.alpha < 1.0) {
            return Err(err(format!("ocp.alpha must lie in (0,1), got {}", o.alpha)));
        }
        nonnegative_diag("ocp.state_weights_diag", &o.state_weights_diag)?;
        nonnegative_diag("ocp.input_weights_diag", &o.input_weights_diag)?;
        positive("ocp.robust_sigma_factor", o.robust_sigma_factor)?;
        let mut state_lower = StateVector::from_element(f64::NEG_INFINITY);
        let mut state_upper = StateVector::from_element(f64::INFINITY);
        for j in 0..8 {
            if let Some(v) = o.state_lower[j] {
                state_lower[j] = finite(&format!("ocp.state_lower[{j}]"), v)?;
            }
            if let Some(v) = o.state_upper[j] {
                state_upper[j] = finite(&format!("ocp.state_upper[{j}]"), v)?;
            }
            if state_lower[j] > state_upper[j] {
                return Err(err(format!("ocp state bounds empty at component {j}")));
            }
        }
        let mut input_lower = crate::dynamics::InputVector::zeros();
        let mut input_upper = crate::dynamics::InputVector::zeros();
        for j in 0..4 {
            input_lower[j] = finite(&format!("ocp.input_lower[{j}]"), o.input_lower[j])?;
            input_upper[j] = finite(&format!("ocp.input_upper[{j}]"), o.input_upper[j])?;
            if input_lower[j] > input_upper[j] {
                return Err(err(format!("ocp input bounds empty at component {j}")));
            }
        }

        let reference = match &self.reference {
            ReferenceSection::Goal { state } => {
                let x = state.to_vector();
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(err("reference.state must be finite"));
                }
                ReferenceSpec::Goal(x)
            }
            ReferenceSection::Path {
                waypoints,
                speed,
                reverse,
                start_arc_length,
                yaw,
            } => {
                if waypoints.len() < 2 {
                    return Err(err("reference.waypoints needs at least two points"));
                }
                positive("reference.speed", *speed)?;
                let pts: Vec<Vector3<f64>> =
                    waypoints.iter().map(|w| Vector3::from_row_slice(w)).collect();
                for i in 0..pts.len() {
                    let next = pts[(i + 1) % pts.len()];
                    if (next - pts[i]).norm() < 1e-9 {
                        return Err(err(format!(
                            "reference.waypoints[{i}] coincides with its successor"
                        )));
                    }
                }
                ReferenceSpec::Path {
                    waypoints: pts,
                    speed: *speed,
                    reverse: *reverse,
                    start_arc_length: *start_arc_length,
                    yaw: *yaw,
                }
            }
        };

        positive("solver.tol", self.solver.tol)?;
        positive("solver.mpc_tol", self.solver.mpc_tol)?;
        if self.solver.max_iter == 0 || self.solver.mpc_max_iter == 0 {
            return Err(err("solver iteration limits must be at least 1"));
        }
        positive("sim.world_substep", self.sim.world_substep)?;
        if self.sim.world_substep > o.dt + 1e-12 {
            return Err(err("sim.world_substep must not exceed ocp.dt"));
        }

        let config = OcpConfig {
            n_steps: o.n_steps,
            dt: o.dt,
            alpha: o.alpha,
            state_weights: nalgebra::SMatrix::<f64, 8, 8>::from_fn(|i, j| {
                if i == j {
                    o.state_weights_diag[i]
                } else {
                    0.0
                }
            }),
            input_weights: nalgebra::SMatrix::<f64, 4, 4>::from_fn(|i, j| {
                if i == j {
                    o.input_weights_diag[i]
                } else {
                    0.0
                }
            }),
            state_lower,
            state_upper,
            input_lower,
            input_upper,
            reference: Vec::new(),
            robust_sigma_factor: o.robust_sigma_factor,
            use_fd_jacobians: o.use_fd_jacobians,
        };

        Ok(Scenario {
            name: self.name,
            robot_initial,
            robot_params,
            robot_noise,
            obstacles,
            pedestrians,
            ocp: config,
            reference,
            solver: self.solver,
            sim: self.sim,
            seed: self.seed,
        })
    }
}

/// Parses and validates a scenario from a JSON string.
pub fn parse_scenario_str(text: &str) -> Result<Scenario> {
    let file: ScenarioFile = serde_json::from_str(text)
        .map_err(|e| Error::Scenario(format!("failed to parse scenario: {e}")))?;
    file.validate()
}

/// Parses and validates a scenario file.
pub fn parse_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Scenario(format!("cannot read {}: {e}", path.display())))?;
    parse_scenario_str(&text)
}
