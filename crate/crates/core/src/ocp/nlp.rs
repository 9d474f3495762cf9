//! Multiple-shooting transcription of the OCP.
//!
//! Decision vector layout: `w = [u_0, …, u_{N−1}, x_1, …, x_N]` (4N + 8N
//! variables). Equality constraints are the shooting defects
//! `x_{t+1} − f_d(x_t, u_t)` on the nominal means; inequalities are the
//! obstacle margins (one per step and obstacle) followed by the finite state
//! and input bounds. Covariances are precomputed from the warm-start input
//! sequence and held fixed within one solve, so every obstacle constraint is
//! a smooth function of that step's position variables only.

use nalgebra::{DMatrix, DVector, Vector3};

use crate::chance::{BoundingBox, RiskAllocation};
use crate::dynamics::{
    rk4_sensitivities, rk4_step, robot_jacobian_fd, DisturbanceSpec, InputJacobian, InputVector,
    RobotParams, RobotState, StateMatrix, StateVector, INPUT_DIM, STATE_DIM,
};
use crate::error::{Error, Result};
use crate::gaussian::GaussianBelief;

use super::{
    build_margin_models, predict_open_loop, total_cost, ConstraintKind, MarginModel, OcpConfig,
};

/// Everything a solve needs: configuration, models, current beliefs and the
/// warm-start inputs that fix the covariance prediction.
#[derive(Debug, Clone, Copy)]
pub struct PlanningInputs<'a> {
    pub config: &'a OcpConfig,
    pub params: &'a RobotParams,
    pub noise: &'a DisturbanceSpec,
    pub robot: &'a GaussianBelief,
    pub obstacles: &'a [GaussianBelief],
    pub boxes: &'a [BoundingBox],
    pub risk: &'a RiskAllocation,
    pub warm_inputs: &'a [InputVector],
}

/// One inequality row of the NLP, in the fixed global ordering.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum IneqRow {
    /// Obstacle margin at step 1..=N for one obstacle.
    Obstacle { step: usize, obstacle: usize },
    /// `x_j − lo ≥ 0` at step 1..=N.
    StateLower { step: usize, comp: usize },
    /// `up − x_j ≥ 0` at step 1..=N.
    StateUpper { step: usize, comp: usize },
    /// `u_j − lo ≥ 0` at step 0..N−1.
    InputLower { step: usize, comp: usize },
    /// `up − u_j ≥ 0` at step 0..N−1.
    InputUpper { step: usize, comp: usize },
}

/// An immutable multiple-shooting NLP instance.
#[derive(Debug, Clone)]
pub struct NlpProblem {
    pub(crate) n_steps: usize,
    pub(crate) dt: f64,
    pub(crate) params: RobotParams,
    pub(crate) initial_state: StateVector,
    pub(crate) reference: Vec<StateVector>,
    pub(crate) state_weights: nalgebra::SMatrix<f64, 8, 8>,
    pub(crate) input_weights: nalgebra::SMatrix<f64, 4, 4>,
    pub(crate) state_lower: StateVector,
    pub(crate) state_upper: StateVector,
    pub(crate) input_lower: InputVector,
    pub(crate) input_upper: InputVector,
    /// Predicted obstacle mean positions, indexed `[step−1][obstacle]`.
    pub(crate) obstacle_positions: Vec<Vec<Vector3<f64>>>,
    /// Fixed margin models, indexed `[step−1][obstacle]`.
    pub(crate) margin_models: Vec<Vec<MarginModel>>,
    pub(crate) kind: ConstraintKind,
    pub(crate) use_fd_jacobians: bool,
    pub(crate) rows: Vec<IneqRow>,
}

/// Assembles the NLP for one constraint formulation. Covariances (and with
/// them the inflated boxes) come from an open-loop prediction along
/// `warm_inputs` and stay fixed for the lifetime of the problem.
pub fn assemble_nlp(inputs: &PlanningInputs<'_>, kind: ConstraintKind) -> Result<NlpProblem> {
    let config = inputs.config;
    config.validate()?;
    if inputs.warm_inputs.len() != config.n_steps {
        return Err(Error::Dimension(format!(
            "{} warm-start inputs for {} steps",
            inputs.warm_inputs.len(),
            config.n_steps
        )));
    }
    if inputs.boxes.len() != inputs.obstacles.len() {
        return Err(Error::Dimension(format!(
            "{} boxes for {} obstacles",
            inputs.boxes.len(),
            inputs.obstacles.len()
        )));
    }
    let prediction = predict_open_loop(
        inputs.robot,
        inputs.warm_inputs,
        inputs.obstacles,
        inputs.params,
        inputs.noise,
        config,
    )?;
    let margin_models = build_margin_models(
        kind,
        &prediction,
        inputs.boxes,
        inputs.risk,
        config.robust_sigma_factor,
    )?;
    let obstacle_positions = (1..=config.n_steps)
        .map(|t| {
            (0..inputs.obstacles.len())
                .map(|i| prediction.obstacle_position_mean(t, i))
                .collect()
        })
        .collect();

    let n = config.n_steps;
    let n_obs = inputs.obstacles.len();
    let mut rows = Vec::new();
    for step in 1..=n {
        for obstacle in 0..n_obs {
            rows.push(IneqRow::Obstacle { step, obstacle });
        }
    }
    for step in 1..=n {
        for comp in 0..STATE_DIM {
            if config.state_lower[comp].is_finite() {
                rows.push(IneqRow::StateLower { step, comp });
            }
            if config.state_upper[comp].is_finite() {
                rows.push(IneqRow::StateUpper { step, comp });
            }
        }
    }
    for step in 0..n {
        for comp in 0..INPUT_DIM {
            if config.input_lower[comp].is_finite() {
                rows.push(IneqRow::InputLower { step, comp });
            }
            if config.input_upper[comp].is_finite() {
                rows.push(IneqRow::InputUpper { step, comp });
            }
        }
    }

    Ok(NlpProblem {
        n_steps: n,
        dt: config.dt,
        params: *inputs.params,
        initial_state: StateVector::from_column_slice(inputs.robot.mean().as_slice()),
        reference: config.reference.clone(),
        state_weights: config.state_weights,
        input_weights: config.input_weights,
        state_lower: config.state_lower,
        state_upper: config.state_upper,
        input_lower: config.input_lower,
        input_upper: config.input_upper,
        obstacle_positions,
        margin_models,
        kind,
        use_fd_jacobians: config.use_fd_jacobians,
        rows,
    })
}

impl NlpProblem {
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn kind(&self) -> ConstraintKind {
        self.kind
    }

    pub fn num_vars(&self) -> usize {
        (INPUT_DIM + STATE_DIM) * self.n_steps
    }

    pub fn num_eq(&self) -> usize {
        STATE_DIM * self.n_steps
    }

    pub fn num_ineq(&self) -> usize {
        self.rows.len()
    }

    /// Offset of input u_t in the decision vector, t in 0..N.
    pub fn input_index(&self, t: usize) -> usize {
        INPUT_DIM * t
    }

    /// Offset of state x_t in the decision vector, t in 1..=N.
    pub fn state_index(&self, t: usize) -> usize {
        INPUT_DIM * self.n_steps + STATE_DIM * (t - 1)
    }

    pub(crate) fn input_at(&self, w: &DVector<f64>, t: usize) -> InputVector {
        InputVector::from_column_slice(&w.as_slice()[self.input_index(t)..self.input_index(t) + 4])
    }

    /// State x_t at the decision vector; t = 0 returns the fixed initial
    /// state.
    pub(crate) fn state_at(&self, w: &DVector<f64>, t: usize) -> StateVector {
        if t == 0 {
            self.initial_state
        } else {
            let i = self.state_index(t);
            StateVector::from_column_slice(&w.as_slice()[i..i + STATE_DIM])
        }
    }

    fn position_at(&self, w: &DVector<f64>, t: usize) -> Vector3<f64> {
        let x = self.state_at(w, t);
        Vector3::new(x[0], x[1], x[2])
    }

    /// Decision vector packed from explicit inputs and states x_0..x_N (the
    /// initial state is fixed and not stored).
    pub fn decision_vector(
        &self,
        inputs: &[InputVector],
        states: &[StateVector],
    ) -> Result<DVector<f64>> {
        if inputs.len() != self.n_steps || states.len() != self.n_steps + 1 {
            return Err(Error::Dimension(format!(
                "{} inputs / {} states for {} steps",
                inputs.len(),
                states.len(),
                self.n_steps
            )));
        }
        let mut w = DVector::zeros(self.num_vars());
        for (t, u) in inputs.iter().enumerate() {
            w.rows_mut(self.input_index(t), INPUT_DIM)
                .copy_from_slice(u.as_slice());
        }
        for t in 1..=self.n_steps {
            w.rows_mut(self.state_index(t), STATE_DIM)
                .copy_from_slice(states[t].as_slice());
        }
        Ok(w)
    }

    /// Decision vector from an input sequence with states filled by the
    /// nominal rollout; such a point satisfies all shooting defects.
    pub fn initial_decision_vector(&self, inputs: &[InputVector]) -> Result<DVector<f64>> {
        if inputs.len() != self.n_steps {
            return Err(Error::Dimension(format!(
                "{} inputs for {} steps",
                inputs.len(),
                self.n_steps
            )));
        }
        let mut w = DVector::zeros(self.num_vars());
        let mut state = RobotState::from_vector(&self.initial_state);
        for (t, u) in inputs.iter().enumerate() {
            w.rows_mut(self.input_index(t), INPUT_DIM)
                .copy_from_slice(u.as_slice());
            state = rk4_step(&state, u, &self.params, self.dt);
            w.rows_mut(self.state_index(t + 1), STATE_DIM)
                .copy_from_slice(state.to_vector().as_slice());
        }
        Ok(w)
    }

    /// Quadratic tracking cost at a decision vector.
    pub fn cost(&self, w: &DVector<f64>) -> f64 {
        let states: Vec<StateVector> = (1..=self.n_steps).map(|t| self.state_at(w, t)).collect();
        let inputs: Vec<InputVector> = (0..self.n_steps).map(|t| self.input_at(w, t)).collect();
        let config = self.as_config();
        total_cost(&states, &inputs, &config).expect("dimensions fixed by layout")
    }

    // Lightweight config view used by total_cost.
    fn as_config(&self) -> OcpConfig {
        OcpConfig {
            n_steps: self.n_steps,
            dt: self.dt,
            alpha: 0.5,
            state_weights: self.state_weights,
            input_weights: self.input_weights,
            state_lower: self.state_lower,
            state_upper: self.state_upper,
            input_lower: self.input_lower,
            input_upper: self.input_upper,
            reference: self.reference.clone(),
            robust_sigma_factor: 1.0,
            use_fd_jacobians: self.use_fd_jacobians,
        }
    }

    /// Analytic cost gradient.
    pub fn cost_gradient(&self, w: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(self.num_vars());
        for t in 0..self.n_steps {
            let gu = self.input_weights * self.input_at(w, t) * 2.0;
            g.rows_mut(self.input_index(t), INPUT_DIM)
                .copy_from_slice(gu.as_slice());
            let e = self.state_at(w, t + 1) - self.reference[t];
            let gx = self.state_weights * e * 2.0;
            g.rows_mut(self.state_index(t + 1), STATE_DIM)
                .copy_from_slice(gx.as_slice());
        }
        g
    }

    /// Shooting defects `x_{t+1} − f_d(x_t, u_t)`, stacked for t = 0..N−1.
    pub fn equality_constraints(&self, w: &DVector<f64>) -> DVector<f64> {
        let mut c = DVector::zeros(self.num_eq());
        for t in 0..self.n_steps {
            let state = RobotState::from_vector(&self.state_at(w, t));
            let next = rk4_step(&state, &self.input_at(w, t), &self.params, self.dt).to_vector();
            let defect = self.state_at(w, t + 1) - next;
            c.rows_mut(STATE_DIM * t, STATE_DIM)
                .copy_from_slice(defect.as_slice());
        }
        c
    }

    /// Per-step dynamics Jacobians `(A_t, B_t)` at the current iterate.
    pub(crate) fn dynamics_blocks(
        &self,
        w: &DVector<f64>,
    ) -> (Vec<StateMatrix>, Vec<InputJacobian>) {
        let mut a_blocks = Vec::with_capacity(self.n_steps);
        let mut b_blocks = Vec::with_capacity(self.n_steps);
        for t in 0..self.n_steps {
            let state = RobotState::from_vector(&self.state_at(w, t));
            let input = self.input_at(w, t);
            if self.use_fd_jacobians {
                a_blocks.push(robot_jacobian_fd(&state, &input, &self.params, self.dt));
                b_blocks.push(input_jacobian_fd(&state, &input, &self.params, self.dt));
            } else {
                let (_, a, b) = rk4_sensitivities(&state, &input, &self.params, self.dt);
                a_blocks.push(a);
                b_blocks.push(b);
            }
        }
        (a_blocks, b_blocks)
    }

    /// Dense equality Jacobian (rows: defects, cols: decision variables).
    pub fn equality_jacobian(&self, w: &DVector<f64>) -> DMatrix<f64> {
        let (a_blocks, b_blocks) = self.dynamics_blocks(w);
        let mut jac = DMatrix::zeros(self.num_eq(), self.num_vars());
        for t in 0..self.n_steps {
            let row = STATE_DIM * t;
            for i in 0..STATE_DIM {
                jac[(row + i, self.state_index(t + 1) + i)] = 1.0;
            }
            for i in 0..STATE_DIM {
                for j in 0..INPUT_DIM {
                    jac[(row + i, self.input_index(t) + j)] = -b_blocks[t][(i, j)];
                }
            }
            if t >= 1 {
                for i in 0..STATE_DIM {
                    for j in 0..STATE_DIM {
                        jac[(row + i, self.state_index(t) + j)] = -a_blocks[t][(i, j)];
                    }
                }
            }
        }
        jac
    }

    pub(crate) fn rows(&self) -> &[IneqRow] {
        &self.rows
    }

    pub(crate) fn row_value(&self, w: &DVector<f64>, row: IneqRow) -> f64 {
        match row {
            IneqRow::Obstacle { step, obstacle } => {
                let rel = self.position_at(w, step) - self.obstacle_positions[step - 1][obstacle];
                self.margin_models[step - 1][obstacle].margin(&rel)
            }
            IneqRow::StateLower { step, comp } => {
                self.state_at(w, step)[comp] - self.state_lower[comp]
            }
            IneqRow::StateUpper { step, comp } => {
                self.state_upper[comp] - self.state_at(w, step)[comp]
            }
            IneqRow::InputLower { step, comp } => {
                self.input_at(w, step)[comp] - self.input_lower[comp]
            }
            IneqRow::InputUpper { step, comp } => {
                self.input_upper[comp] - self.input_at(w, step)[comp]
            }
        }
    }

    /// All inequality values in row order; every entry ≥ 0 means feasible.
    pub fn inequality_constraints(&self, w: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.rows.len(),
            self.rows.iter().map(|r| self.row_value(w, *r)),
        )
    }

    /// Dense inequality Jacobian; obstacle rows touch only that step's
    /// position variables, bound rows are ±1 singletons.
    pub fn inequality_jacobian(&self, w: &DVector<f64>) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(self.rows.len(), self.num_vars());
        for (r, row) in self.rows.iter().enumerate() {
            match *row {
                IneqRow::Obstacle { step, obstacle } => {
                    let rel =
                        self.position_at(w, step) - self.obstacle_positions[step - 1][obstacle];
                    let g = self.margin_models[step - 1][obstacle].gradient(&rel);
                    for j in 0..3 {
                        jac[(r, self.state_index(step) + j)] = g[j];
                    }
                }
                IneqRow::StateLower { step, comp } => {
                    jac[(r, self.state_index(step) + comp)] = 1.0;
                }
                IneqRow::StateUpper { step, comp } => {
                    jac[(r, self.state_index(step) + comp)] = -1.0;
                }
                IneqRow::InputLower { step, comp } => {
                    jac[(r, self.input_index(step) + comp)] = 1.0;
                }
                IneqRow::InputUpper { step, comp } => {
                    jac[(r, self.input_index(step) + comp)] = -1.0;
                }
            }
        }
        jac
    }

    /// Max-norm violation over all constraints at a decision vector.
    pub fn max_violation(&self, w: &DVector<f64>) -> f64 {
        let eq = self.equality_constraints(w).amax();
        let ineq = self
            .inequality_constraints(w)
            .iter()
            .fold(0.0_f64, |acc, v| acc.max(-v));
        eq.max(ineq.max(0.0))
    }

    /// 1-norm violation (used by the merit function).
    pub(crate) fn violation_l1(&self, w: &DVector<f64>) -> f64 {
        let eq: f64 = self.equality_constraints(w).iter().map(|v| v.abs()).sum();
        let ineq: f64 = self
            .inequality_constraints(w)
            .iter()
            .map(|v| (-v).max(0.0))
            .sum();
        eq + ineq
    }

    /// Obstacle margins at a decision vector as an N×N_o matrix.
    pub fn obstacle_margins(&self, w: &DVector<f64>) -> DMatrix<f64> {
        let n_obs = self.obstacle_positions.first().map_or(0, |r| r.len());
        let mut m = DMatrix::zeros(self.n_steps, n_obs);
        for t in 1..=self.n_steps {
            for i in 0..n_obs {
                m[(t - 1, i)] = self.row_value(w, IneqRow::Obstacle { step: t, obstacle: i });
            }
        }
        m
    }
}

fn input_jacobian_fd(
    state: &RobotState,
    input: &InputVector,
    params: &RobotParams,
    dt: f64,
) -> InputJacobian {
    let h = 1e-6;
    let mut jac = InputJacobian::zeros();
    for j in 0..INPUT_DIM {
        let mut hi = *input;
        let mut lo = *input;
        hi[j] += h;
        lo[j] -= h;
        let fhi = rk4_step(state, &hi, params, dt).to_vector();
        let flo = rk4_step(state, &lo, params, dt).to_vector();
        jac.set_column(j, &((fhi - flo) / (2.0 * h)));
    }
    jac
}
