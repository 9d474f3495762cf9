//! The stochastic optimal-control problem: open-loop uncertainty prediction,
//! quadratic tracking cost, the three obstacle-constraint formulations and
//! the multiple-shooting NLP with its SQP solver.

mod nlp;
mod qp;
mod sqp;

pub use nlp::{assemble_nlp, NlpProblem, PlanningInputs};
pub use sqp::solve_sqp;

use nalgebra::{DMatrix, Matrix3, SMatrix, Vector3};

use crate::chance::{
    ellipsoid_gradient, ellipsoid_margin, inflate_box, BoundingBox, InflatedBox, RiskAllocation,
};
use crate::dynamics::{
    obstacle_jacobian, obstacle_step, propagate_covariance, rk4_step, robot_jacobian,
    robot_jacobian_fd, to_dmatrix, DisturbanceSpec, InputVector, ObstacleState, RobotParams,
    RobotState, StateVector, STATE_DIM,
};
use crate::error::{Error, Result};
use crate::gaussian::{std_normal_quantile, GaussianBelief};

/// Horizon length, timestep, weights, bounds, confidence level and the
/// reference trajectory of one OCP instance.
#[derive(Debug, Clone)]
pub struct OcpConfig {
    pub n_steps: usize,
    pub dt: f64,
    pub alpha: f64,
    pub state_weights: SMatrix<f64, 8, 8>,
    pub input_weights: SMatrix<f64, 4, 4>,
    /// Per-component state bounds; use ±infinity for unbounded components.
    pub state_lower: StateVector,
    pub state_upper: StateVector,
    pub input_lower: InputVector,
    pub input_upper: InputVector,
    /// Reference states for steps 1..=N.
    pub reference: Vec<StateVector>,
    /// Back-off factor of the robust baseline (box inflated by this many
    /// combined standard deviations per axis).
    pub robust_sigma_factor: f64,
    /// Use finite-difference dynamics Jacobians instead of the RK4-stage
    /// chain rule.
    pub use_fd_jacobians: bool,
}

impl OcpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::Domain("n_steps must be at least 1".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Domain(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Domain(format!(
                "alpha must lie in (0,1), got {}",
                self.alpha
            )));
        }
        if self.reference.len() != self.n_steps {
            return Err(Error::Dimension(format!(
                "reference has {} states for {} steps",
                self.reference.len(),
                self.n_steps
            )));
        }
        for j in 0..STATE_DIM {
            if self.state_lower[j] > self.state_upper[j] {
                return Err(Error::Domain(format!("empty state bound at component {j}")));
            }
        }
        for j in 0..4 {
            if self.input_lower[j] > self.input_upper[j] {
                return Err(Error::Domain(format!("empty input bound at component {j}")));
            }
        }
        Ok(())
    }
}

/// Which obstacle-constraint formulation a solve uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConstraintKind {
    /// The ellipsoidal chance-constraint surrogate with risk allocation.
    EllipsoidCc,
    /// Baseline: box inflated by a fixed number of combined standard
    /// deviations per axis (no quantile, no risk allocation), then the same
    /// enclosing ellipsoid.
    RobustSetBound,
    /// Baseline: the nominal ellipsoid constraint linearized at the mean
    /// relative position, handled as a scalar linear Gaussian chance
    /// constraint.
    LinearizedCc,
}

impl ConstraintKind {
    pub const ALL: [ConstraintKind; 3] = [
        ConstraintKind::EllipsoidCc,
        ConstraintKind::RobustSetBound,
        ConstraintKind::LinearizedCc,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ConstraintKind::EllipsoidCc => "ellipsoid_cc",
            ConstraintKind::RobustSetBound => "robust_set_bound",
            ConstraintKind::LinearizedCc => "linearized_cc",
        }
    }
}

impl std::fmt::Display for ConstraintKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ConstraintKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ellipsoid_cc" => Ok(ConstraintKind::EllipsoidCc),
            "robust_set_bound" => Ok(ConstraintKind::RobustSetBound),
            "linearized_cc" => Ok(ConstraintKind::LinearizedCc),
            other => Err(Error::Domain(format!("unknown constraint kind '{other}'"))),
        }
    }
}

/// Result of one SQP solve.
#[derive(Debug, Clone)]
pub struct Solution {
    /// Optimal inputs u_0..u_{N−1}.
    pub inputs: Vec<InputVector>,
    /// States x_0..x_N (x_0 is the fixed initial mean).
    pub states: Vec<StateVector>,
    pub objective: f64,
    pub kkt_residual: f64,
    /// Max-norm constraint violation, re-evaluated at the returned point.
    pub max_violation: f64,
    pub iterations: usize,
    pub wall_time: f64,
    pub converged: bool,
    /// True if any QP subproblem needed the obstacle-slack relaxation.
    pub relaxed: bool,
}

/// Per-step robot and obstacle beliefs along an input sequence.
#[derive(Debug, Clone)]
pub struct OpenLoopPrediction {
    /// Robot beliefs for steps 0..=N.
    pub robot: Vec<GaussianBelief>,
    /// Obstacle beliefs, indexed `[obstacle][step]`, steps 0..=N.
    pub obstacles: Vec<Vec<GaussianBelief>>,
}

impl OpenLoopPrediction {
    pub fn n_steps(&self) -> usize {
        self.robot.len() - 1
    }

    pub fn n_obstacles(&self) -> usize {
        self.obstacles.len()
    }

    fn position_variances(belief: &GaussianBelief) -> Vector3<f64> {
        Vector3::from_fn(|j, _| belief.cov()[(j, j)].max(0.0))
    }

    pub fn robot_position_variances(&self, step: usize) -> Vector3<f64> {
        Self::position_variances(&self.robot[step])
    }

    pub fn obstacle_position_variances(&self, step: usize, obstacle: usize) -> Vector3<f64> {
        Self::position_variances(&self.obstacles[obstacle][step])
    }

    pub fn obstacle_position_mean(&self, step: usize, obstacle: usize) -> Vector3<f64> {
        let mean = self.obstacles[obstacle][step].mean();
        Vector3::new(mean[0], mean[1], mean[2])
    }

    pub fn robot_position_mean(&self, step: usize) -> Vector3<f64> {
        let mean = self.robot[step].mean();
        Vector3::new(mean[0], mean[1], mean[2])
    }

    /// Covariance of the relative position p − q at a step (robot and
    /// obstacle position blocks summed; the two are independent).
    pub fn relative_position_cov(&self, step: usize, obstacle: usize) -> Matrix3<f64> {
        let r = self.robot[step].cov().fixed_view::<3, 3>(0, 0).into_owned();
        let o = self.obstacles[obstacle][step]
            .cov()
            .fixed_view::<3, 3>(0, 0)
            .into_owned();
        r + o
    }
}

/// Rolls the means out with RK4 / Euler and the covariances with first-order
/// propagation, `Σ⁺ = JΣJᵀ + W`, along a fixed input sequence.
pub fn predict_open_loop(
    initial_robot: &GaussianBelief,
    inputs: &[InputVector],
    initial_obstacles: &[GaussianBelief],
    params: &RobotParams,
    noise: &DisturbanceSpec,
    config: &OcpConfig,
) -> Result<OpenLoopPrediction> {
    if initial_robot.dim() != STATE_DIM {
        return Err(Error::Dimension(format!(
            "robot belief must be {STATE_DIM}-dimensional, got {}",
            initial_robot.dim()
        )));
    }
    if inputs.len() != config.n_steps {
        return Err(Error::Dimension(format!(
            "{} inputs for {} steps",
            inputs.len(),
            config.n_steps
        )));
    }
    if noise.n_obstacles() != initial_obstacles.len() {
        return Err(Error::Dimension(format!(
            "{} obstacle noise matrices for {} obstacles",
            noise.n_obstacles(),
            initial_obstacles.len()
        )));
    }

    let mut robot = Vec::with_capacity(config.n_steps + 1);
    robot.push(initial_robot.clone());
    let mut state = RobotState::from_vector(&StateVector::from_column_slice(
        initial_robot.mean().as_slice(),
    ));
    let mut cov = initial_robot.cov().clone();
    for u in inputs {
        let jac = if config.use_fd_jacobians {
            robot_jacobian_fd(&state, u, params, config.dt)
        } else {
            robot_jacobian(&state, u, params, config.dt)
        };
        state = rk4_step(&state, u, params, config.dt);
        cov = propagate_covariance(&cov, &to_dmatrix(&jac), noise.robot())?;
        robot.push(GaussianBelief::new(
            nalgebra::DVector::from_column_slice(state.to_vector().as_slice()),
            cov.clone(),
        )?);
    }

    let mut obstacles = Vec::with_capacity(initial_obstacles.len());
    for (i, initial) in initial_obstacles.iter().enumerate() {
        if initial.dim() != STATE_DIM {
            return Err(Error::Dimension(format!(
                "obstacle {i} belief must be {STATE_DIM}-dimensional, got {}",
                initial.dim()
            )));
        }
        let mut beliefs = Vec::with_capacity(config.n_steps + 1);
        beliefs.push(initial.clone());
        let mut state = ObstacleState::from_vector(&StateVector::from_column_slice(
            initial.mean().as_slice(),
        ));
        let mut cov = initial.cov().clone();
        for _ in 0..config.n_steps {
            let jac = obstacle_jacobian(&state, config.dt);
            state = obstacle_step(&state, config.dt);
            cov = propagate_covariance(&cov, &to_dmatrix(&jac), noise.obstacle(i))?;
            beliefs.push(GaussianBelief::new(
                nalgebra::DVector::from_column_slice(state.to_vector().as_slice()),
                cov.clone(),
            )?);
        }
        obstacles.push(beliefs);
    }

    Ok(OpenLoopPrediction { robot, obstacles })
}

/// Quadratic tracking cost `Σ_t ‖x_t − x^r_t‖²_P + ‖u_{t−1}‖²_Q` over states
/// x_1..x_N and inputs u_0..u_{N−1}.
pub fn total_cost(states: &[StateVector], inputs: &[InputVector], config: &OcpConfig) -> Result<f64> {
    if states.len() != config.n_steps || inputs.len() != config.n_steps {
        return Err(Error::Dimension(format!(
            "total_cost over {} states / {} inputs for {} steps",
            states.len(),
            inputs.len(),
            config.n_steps
        )));
    }
    let mut cost = 0.0;
    for t in 0..config.n_steps {
        let e = states[t] - config.reference[t];
        cost += (config.state_weights * e).dot(&e);
        cost += (config.input_weights * inputs[t]).dot(&inputs[t]);
    }
    Ok(cost)
}

/// One obstacle constraint at one step, with the uncertainty already baked
/// in. `margin(rel) ≥ 0` means the constraint is satisfied at the relative
/// position `rel = p̂ − q̂`.
#[derive(Debug, Clone)]
pub enum MarginModel {
    /// `Σ_j (rel_j/d̃_j)² − 3` on an inflated box (used by the ellipsoidal
    /// chance constraint and the robust baseline).
    Ellipsoid(InflatedBox),
    /// Nominal ellipsoid margin minus `Ψ⁻¹(1−α)·√(aᵀΣa)` with `a` the
    /// nominal gradient at `rel` (linearized chance constraint).
    Linearized {
        nominal: InflatedBox,
        rel_cov: Matrix3<f64>,
        backoff: f64,
    },
}

impl MarginModel {
    pub fn margin(&self, rel: &Vector3<f64>) -> f64 {
        match self {
            MarginModel::Ellipsoid(inflated) => ellipsoid_margin(rel, inflated),
            MarginModel::Linearized {
                nominal,
                rel_cov,
                backoff,
            } => {
                let a = ellipsoid_gradient(rel, nominal);
                let var = (rel_cov * a).dot(&a);
                ellipsoid_margin(rel, nominal) - backoff * var.max(0.0).sqrt()
            }
        }
    }

    pub fn gradient(&self, rel: &Vector3<f64>) -> Vector3<f64> {
        match self {
            MarginModel::Ellipsoid(inflated) => ellipsoid_gradient(rel, inflated),
            MarginModel::Linearized {
                nominal,
                rel_cov,
                backoff,
            } => {
                let a = ellipsoid_gradient(rel, nominal);
                let sd = (rel_cov * a).dot(&a).max(0.0).sqrt();
                if sd < 1e-12 {
                    return a;
                }
                let d = nominal.semi_sizes();
                // ∂a/∂rel is the constant diagonal 2/d̃_j².
                let hess = Vector3::from_fn(|j, _| 2.0 / (d[j] * d[j]));
                let sigma_a = rel_cov * a;
                let grad_sd = Vector3::from_fn(|j, _| hess[j] * sigma_a[j]) / sd;
                a - grad_sd * *backoff
            }
        }
    }
}

/// Builds the margin model for every (step, obstacle) pair from predicted
/// beliefs. Steps are 1..=N (step 0 is the current state).
pub fn build_margin_models(
    kind: ConstraintKind,
    prediction: &OpenLoopPrediction,
    boxes: &[BoundingBox],
    risk: &RiskAllocation,
    robust_sigma_factor: f64,
) -> Result<Vec<Vec<MarginModel>>> {
    let n = prediction.n_steps();
    let n_obs = prediction.n_obstacles();
    if boxes.len() != n_obs {
        return Err(Error::Dimension(format!(
            "{} boxes for {} obstacles",
            boxes.len(),
            n_obs
        )));
    }
    if risk.n_steps() != n || risk.n_obstacles() != n_obs {
        return Err(Error::Dimension(format!(
            "risk allocation is {}x{}, expected {}x{}",
            risk.n_steps(),
            risk.n_obstacles(),
            n,
            n_obs
        )));
    }
    let mut models = Vec::with_capacity(n);
    for t in 1..=n {
        let mut row = Vec::with_capacity(n_obs);
        let sigma2_robot = prediction.robot_position_variances(t);
        for (i, bounding_box) in boxes.iter().enumerate() {
            let alpha_it = risk.alpha(t - 1, i);
            let model = match kind {
                ConstraintKind::EllipsoidCc => {
                    let sigma2_obs = prediction.obstacle_position_variances(t, i);
                    MarginModel::Ellipsoid(inflate_box(
                        bounding_box,
                        alpha_it,
                        &sigma2_robot,
                        &sigma2_obs,
                    )?)
                }
                ConstraintKind::RobustSetBound => {
                    let sigma2_obs = prediction.obstacle_position_variances(t, i);
                    let d = bounding_box.semi_sizes();
                    let semi = Vector3::from_fn(|j, _| {
                        d[j] + robust_sigma_factor * (sigma2_robot[j] + sigma2_obs[j]).sqrt()
                    });
                    MarginModel::Ellipsoid(InflatedBox::new(semi)?)
                }
                ConstraintKind::LinearizedCc => MarginModel::Linearized {
                    nominal: InflatedBox::new(bounding_box.semi_sizes())?,
                    rel_cov: prediction.relative_position_cov(t, i),
                    backoff: std_normal_quantile(1.0 - alpha_it)?,
                },
            };
            row.push(model);
        }
        models.push(row);
    }
    Ok(models)
}

/// N×N_o matrix of constraint margins along the predicted means; all entries
/// ≥ 0 iff the constraint set is satisfied.
pub fn obstacle_constraint_margins(
    kind: ConstraintKind,
    prediction: &OpenLoopPrediction,
    boxes: &[BoundingBox],
    risk: &RiskAllocation,
    robust_sigma_factor: f64,
) -> Result<DMatrix<f64>> {
    let models = build_margin_models(kind, prediction, boxes, risk, robust_sigma_factor)?;
    let n = prediction.n_steps();
    let n_obs = prediction.n_obstacles();
    let mut margins = DMatrix::zeros(n, n_obs);
    for t in 1..=n {
        let p = prediction.robot_position_mean(t);
        for i in 0..n_obs {
            let rel = p - prediction.obstacle_position_mean(t, i);
            margins[(t - 1, i)] = models[t - 1][i].margin(&rel);
        }
    }
    Ok(margins)
}

