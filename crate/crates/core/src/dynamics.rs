//! Nominal robot and obstacle dynamics, their discretizations, Jacobians and
//! first-order covariance propagation.
//!
//! The robot follows first-order velocity-reference dynamics in a local frame
//! rotated by the yaw angle:
//!
//! ```text
//! ṗ = R(ψ)v        v̇_i = (−v_i + k_i u_i)/τ_i        ψ̈ = (−ψ̇ + k_ψ u_ψ)/τ_ψ
//! ```
//!
//! discretized with classical RK4. Obstacles use constant-velocity dynamics
//! under Euler integration. Discrete Jacobians are obtained by chain-ruling
//! the integrator stages, so they are exact derivatives of the discrete maps;
//! a finite-difference fallback is available behind a configuration flag.

use nalgebra::{DMatrix, Matrix3, SMatrix, SVector, Vector3};

use crate::error::{Error, Result};
use crate::gaussian::{check_psd, check_symmetric, symmetrize};

/// Robot and obstacle states have 8 components: position (3), local-frame
/// velocity (3), yaw and yaw rate.
pub const STATE_DIM: usize = 8;
/// Robot inputs: forward, sideward, upward and heading velocity references.
pub const INPUT_DIM: usize = 4;

pub type StateVector = SVector<f64, STATE_DIM>;
pub type InputVector = SVector<f64, INPUT_DIM>;
pub type StateMatrix = SMatrix<f64, STATE_DIM, STATE_DIM>;
pub type InputJacobian = SMatrix<f64, STATE_DIM, INPUT_DIM>;

/// Robot state `[p, v, ψ, ψ̇]`. Yaw is stored unwrapped; no normalization
/// happens inside integration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobotState {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub yaw: f64,
    pub yaw_rate: f64,
}

impl RobotState {
    pub fn to_vector(&self) -> StateVector {
        let mut x = StateVector::zeros();
        x.fixed_rows_mut::<3>(0).copy_from(&self.position);
        x.fixed_rows_mut::<3>(3).copy_from(&self.velocity);
        x[6] = self.yaw;
        x[7] = self.yaw_rate;
        x
    }

    pub fn from_vector(x: &StateVector) -> Self {
        Self {
            position: x.fixed_rows::<3>(0).into_owned(),
            velocity: x.fixed_rows::<3>(3).into_owned(),
            yaw: x[6],
            yaw_rate: x[7],
        }
    }
}

/// Obstacle state `[q, v, ψ, ψ̇]` with body-frame velocity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObstacleState {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub yaw: f64,
    pub yaw_rate: f64,
}

impl ObstacleState {
    pub fn to_vector(&self) -> StateVector {
        let mut x = StateVector::zeros();
        x.fixed_rows_mut::<3>(0).copy_from(&self.position);
        x.fixed_rows_mut::<3>(3).copy_from(&self.velocity);
        x[6] = self.yaw;
        x[7] = self.yaw_rate;
        x
    }

    pub fn from_vector(x: &StateVector) -> Self {
        Self {
            position: x.fixed_rows::<3>(0).into_owned(),
            velocity: x.fixed_rows::<3>(3).into_owned(),
            yaw: x[6],
            yaw_rate: x[7],
        }
    }
}

/// Gains and time constants of the velocity-reference model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobotParams {
    pub gain: Vector3<f64>,
    pub yaw_gain: f64,
    pub time_constant: Vector3<f64>,
    pub yaw_time_constant: f64,
}

impl RobotParams {
    pub fn new(
        gain: Vector3<f64>,
        yaw_gain: f64,
        time_constant: Vector3<f64>,
        yaw_time_constant: f64,
    ) -> Result<Self> {
        let all = gain
            .iter()
            .chain(time_constant.iter())
            .chain([&yaw_gain, &yaw_time_constant]);
        for v in all {
            if !v.is_finite() || *v <= 0.0 {
                return Err(Error::Invariant(format!(
                    "gains and time constants must be strictly positive, got {v}"
                )));
            }
        }
        Ok(Self {
            gain,
            yaw_gain,
            time_constant,
            yaw_time_constant,
        })
    }
}

/// Per-step process-noise covariances: `W` for the robot and one `V` per
/// obstacle.
#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceSpec {
    robot: DMatrix<f64>,
    obstacles: Vec<DMatrix<f64>>,
}

impl DisturbanceSpec {
    pub fn new(robot: DMatrix<f64>, obstacles: Vec<DMatrix<f64>>) -> Result<Self> {
        for m in std::iter::once(&robot).chain(obstacles.iter()) {
            if m.nrows() != STATE_DIM || m.ncols() != STATE_DIM {
                return Err(Error::Dimension(format!(
                    "process noise must be {STATE_DIM}x{STATE_DIM}, got {}x{}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            check_symmetric(m)?;
            check_psd(m)?;
        }
        Ok(Self { robot, obstacles })
    }

    pub fn robot(&self) -> &DMatrix<f64> {
        &self.robot
    }

    pub fn obstacle(&self, i: usize) -> &DMatrix<f64> {
        &self.obstacles[i]
    }

    pub fn n_obstacles(&self) -> usize {
        self.obstacles.len()
    }
}

/// Planar yaw rotation acting on (x, y), identity on z.
pub fn yaw_rotation(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn yaw_rotation_derivative(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

fn derivative_vector(x: &StateVector, input: &InputVector, params: &RobotParams) -> StateVector {
    let v = x.fixed_rows::<3>(3).into_owned();
    let mut dx = StateVector::zeros();
    dx.fixed_rows_mut::<3>(0).copy_from(&(yaw_rotation(x[6]) * v));
    for i in 0..3 {
        dx[3 + i] = (-v[i] + params.gain[i] * input[i]) / params.time_constant[i];
    }
    dx[6] = x[7];
    dx[7] = (-x[7] + params.yaw_gain * input[3]) / params.yaw_time_constant;
    dx
}

// Continuous-time Jacobians of the robot model at a state.
fn continuous_jacobians(x: &StateVector, params: &RobotParams) -> (StateMatrix, InputJacobian) {
    let v = x.fixed_rows::<3>(3).into_owned();
    let mut a = StateMatrix::zeros();
    a.fixed_view_mut::<3, 3>(0, 3).copy_from(&yaw_rotation(x[6]));
    a.fixed_view_mut::<3, 1>(0, 6)
        .copy_from(&(yaw_rotation_derivative(x[6]) * v));
    for i in 0..3 {
        a[(3 + i, 3 + i)] = -1.0 / params.time_constant[i];
    }
    a[(6, 7)] = 1.0;
    a[(7, 7)] = -1.0 / params.yaw_time_constant;

    let mut b = InputJacobian::zeros();
    for i in 0..3 {
        b[(3 + i, i)] = params.gain[i] / params.time_constant[i];
    }
    b[(7, 3)] = params.yaw_gain / params.yaw_time_constant;
    (a, b)
}

/// Time derivative of the robot state under the velocity-reference model.
pub fn robot_derivative(
    state: &RobotState,
    input: &InputVector,
    params: &RobotParams,
) -> StateVector {
    derivative_vector(&state.to_vector(), input, params)
}

/// One classical RK4 step of the robot dynamics with zero-order-hold input.
pub fn rk4_step(state: &RobotState, input: &InputVector, params: &RobotParams, dt: f64) -> RobotState {
    rk4_step_with_sensitivities(state, input, params, dt, false).0
}

/// RK4 step together with the exact Jacobians of the discrete map with
/// respect to state and input, obtained by chain-ruling the four stages.
pub fn rk4_sensitivities(
    state: &RobotState,
    input: &InputVector,
    params: &RobotParams,
    dt: f64,
) -> (RobotState, StateMatrix, InputJacobian) {
    let (next, sens) = rk4_step_with_sensitivities(state, input, params, dt, true);
    let (a, b) = sens.expect("sensitivities requested");
    (next, a, b)
}

fn rk4_step_with_sensitivities(
    state: &RobotState,
    input: &InputVector,
    params: &RobotParams,
    dt: f64,
    with_sens: bool,
) -> (RobotState, Option<(StateMatrix, InputJacobian)>) {
    debug_assert!(dt > 0.0);
    let x1 = state.to_vector();
    let k1 = derivative_vector(&x1, input, params);
    let x2 = x1 + k1 * (0.5 * dt);
    let k2 = derivative_vector(&x2, input, params);
    let x3 = x1 + k2 * (0.5 * dt);
    let k3 = derivative_vector(&x3, input, params);
    let x4 = x1 + k3 * dt;
    let k4 = derivative_vector(&x4, input, params);
    let next = x1 + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    let next_state = RobotState::from_vector(&next);

    if !with_sens {
        return (next_state, None);
    }
    let eye = StateMatrix::identity();
    let (a1, b1) = continuous_jacobians(&x1, params);
    let (a2, b2) = continuous_jacobians(&x2, params);
    let (a3, b3) = continuous_jacobians(&x3, params);
    let (a4, b4) = continuous_jacobians(&x4, params);

    let k1x = a1;
    let k2x = a2 * (eye + k1x * (0.5 * dt));
    let k3x = a3 * (eye + k2x * (0.5 * dt));
    let k4x = a4 * (eye + k3x * dt);
    let a_d = eye + (k1x + k2x * 2.0 + k3x * 2.0 + k4x) * (dt / 6.0);

    let k1u = b1;
    let k2u = b2 + a2 * k1u * (0.5 * dt);
    let k3u = b3 + a3 * k2u * (0.5 * dt);
    let k4u = b4 + a4 * k3u * dt;
    let b_d = (k1u + k2u * 2.0 + k3u * 2.0 + k4u) * (dt / 6.0);

    (next_state, Some((a_d, b_d)))
}

/// Jacobian of [`rk4_step`] with respect to the state.
pub fn robot_jacobian(
    state: &RobotState,
    input: &InputVector,
    params: &RobotParams,
    dt: f64,
) -> StateMatrix {
    rk4_sensitivities(state, input, params, dt).1
}

/// Jacobian of [`rk4_step`] with respect to the input.
pub fn robot_input_jacobian(
    state: &RobotState,
    input: &InputVector,
    params: &RobotParams,
    dt: f64,
) -> InputJacobian {
    rk4_sensitivities(state, input, params, dt).2
}

/// Central finite-difference Jacobian of [`rk4_step`]; fallback used when a
/// scenario sets `use_fd_jacobians`.
pub fn robot_jacobian_fd(
    state: &RobotState,
    input: &InputVector,
    params: &RobotParams,
    dt: f64,
) -> StateMatrix {
    let h = 1e-6;
    let x = state.to_vector();
    let mut jac = StateMatrix::zeros();
    for j in 0..STATE_DIM {
        let mut hi = x;
        let mut lo = x;
        hi[j] += h;
        lo[j] -= h;
        let fhi = rk4_step(&RobotState::from_vector(&hi), input, params, dt).to_vector();
        let flo = rk4_step(&RobotState::from_vector(&lo), input, params, dt).to_vector();
        jac.set_column(j, &((fhi - flo) / (2.0 * h)));
    }
    jac
}

/// One Euler step of the constant-velocity obstacle model:
/// `q ← q + R(ψ)v·dt`, `ψ ← ψ + ψ̇·dt`, velocity and yaw rate unchanged.
pub fn obstacle_step(state: &ObstacleState, dt: f64) -> ObstacleState {
    debug_assert!(dt > 0.0);
    ObstacleState {
        position: state.position + yaw_rotation(state.yaw) * state.velocity * dt,
        velocity: state.velocity,
        yaw: state.yaw + state.yaw_rate * dt,
        yaw_rate: state.yaw_rate,
    }
}

/// Exact Jacobian of [`obstacle_step`] with respect to the state.
pub fn obstacle_jacobian(state: &ObstacleState, dt: f64) -> StateMatrix {
    let mut jac = StateMatrix::identity();
    jac.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(yaw_rotation(state.yaw) * dt));
    jac.fixed_view_mut::<3, 1>(0, 6)
        .copy_from(&(yaw_rotation_derivative(state.yaw) * state.velocity * dt));
    jac[(6, 7)] = dt;
    jac
}

/// First-order covariance propagation `J·Σ·Jᵀ + W`, symmetrized.
pub fn propagate_covariance(
    cov: &DMatrix<f64>,
    jac: &DMatrix<f64>,
    noise: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n = cov.nrows();
    if cov.ncols() != n || jac.nrows() != n || jac.ncols() != n || noise.nrows() != n || noise.ncols() != n {
        return Err(Error::Dimension(format!(
            "covariance propagation with cov {}x{}, jac {}x{}, noise {}x{}",
            cov.nrows(),
            cov.ncols(),
            jac.nrows(),
            jac.ncols(),
            noise.nrows(),
            noise.ncols()
        )));
    }
    Ok(symmetrize(&(jac * cov * jac.transpose() + noise)))
}

/// Copies a static 8x8 matrix into a dynamically sized one.
pub fn to_dmatrix(m: &StateMatrix) -> DMatrix<f64> {
    DMatrix::from_iterator(STATE_DIM, STATE_DIM, m.iter().copied())
}
