//! Chance-constrained motion planning with moving box-shaped obstacles.
//!
//! The library converts disjunctive Gaussian collision chance constraints
//! over axis-aligned obstacle boxes into one smooth ellipsoidal constraint
//! per obstacle per timestep, assembles the resulting optimal-control problem
//! as a multiple-shooting NLP, solves it with an in-house SQP inside an MPC
//! loop, and validates the safety bound by Monte Carlo.
//!
//! Modules:
//! - [`gaussian`]: standard-normal machinery and the scalar linear Gaussian
//!   deterministic equivalent.
//! - [`chance`]: box inflation, the ellipsoidal surrogate, risk allocation
//!   and the Monte Carlo collision oracle.
//! - [`dynamics`]: robot / obstacle models, discretizations, Jacobians and
//!   covariance propagation.
//! - [`ocp`]: NLP assembly (multiple shooting) and the SQP solver, with the
//!   robust and linearized baseline constraint formulations.
//! - [`sim`]: closed-loop MPC simulation with social-force pedestrians,
//!   Kalman obstacle estimation and safety metrics.
//! - [`scenario`]: versioned JSON scenario files.

pub mod chance;
pub mod dynamics;
pub mod error;
pub mod gaussian;
pub mod ocp;
pub mod scenario;
pub mod sim;

pub use chance::{
    analytic_box_probability, ellipsoid_gradient, ellipsoid_margin, inflate_box,
    mc_collision_probability, uniform_risk_allocation, BoundingBox, InflatedBox, RiskAllocation,
};
pub use dynamics::{
    obstacle_jacobian, obstacle_step, propagate_covariance, rk4_step, robot_derivative,
    robot_jacobian, DisturbanceSpec, InputVector, ObstacleState, RobotParams, RobotState,
    StateVector, INPUT_DIM, STATE_DIM,
};
pub use error::{Error, Result};
pub use gaussian::{linear_cc_margin, std_normal_cdf, std_normal_quantile, GaussianBelief};
pub use ocp::{
    assemble_nlp, obstacle_constraint_margins, predict_open_loop, solve_sqp, total_cost,
    ConstraintKind, NlpProblem, OcpConfig, OpenLoopPrediction, PlanningInputs, Solution,
};
pub use scenario::{parse_scenario, parse_scenario_str, PlanningContext, ReferenceSpec, Scenario};
pub use sim::{
    compute_metrics, kalman_update, run_closed_loop, social_force_accel, step_world, Metrics,
    Pedestrian, SimLog, SimLogRecord, World,
};
