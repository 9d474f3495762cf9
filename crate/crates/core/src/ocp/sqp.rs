//! SQP solver for the multiple-shooting NLP.
//!
//! Each iteration linearizes the shooting defects, eliminates the state
//! directions through them (condensing: `dx = Z·du + p` with `Z` built by one
//! forward sweep of the dynamics Jacobians), and solves a dense convex QP in
//! the 4N input directions with the interior-point method from [`super::qp`].
//! Steps are globalized by a backtracking line search on an ℓ1 merit
//! function. Equality multipliers are recovered by a backward recursion so
//! the KKT residual is evaluated in the full space.
//!
//! An infeasible QP is retried with ℓ1 slacks on the obstacle rows only;
//! state and input bounds stay hard and the solution is flagged as relaxed.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, SVector, Vector3};

use crate::dynamics::{InputJacobian, StateMatrix, INPUT_DIM, STATE_DIM};
use crate::error::{Error, Result};

use super::nlp::{IneqRow, NlpProblem};
use super::qp::{solve_qp, RowShape};
use super::Solution;

struct Condensed {
    /// dx = z·du + p over the stacked states x_1..x_N.
    z: DMatrix<f64>,
    p: DVector<f64>,
    /// Reduced QP data: min ½ duᵀh du + gᵀdu s.t. c·du ≥ b.
    h: DMatrix<f64>,
    g: DVector<f64>,
    c: DMatrix<f64>,
    b: DVector<f64>,
    shapes: Vec<RowShape>,
}

fn condense(
    problem: &NlpProblem,
    w: &DVector<f64>,
    a_blocks: &[StateMatrix],
    b_blocks: &[InputJacobian],
    defects: &DVector<f64>,
    ineq: &DVector<f64>,
) -> Condensed {
    let n = problem.n_steps();
    let nu = INPUT_DIM * n;
    let nx = STATE_DIM * n;

    // Forward sweep: dx_{t+1} = A_t dx_t + B_t du_t − defect_t, dx_0 = 0.
    let mut z = DMatrix::zeros(nx, nu);
    let mut p = DVector::zeros(nx);
    let mut prev = DMatrix::zeros(STATE_DIM, nu);
    let mut prev_p = SVector::<f64, STATE_DIM>::zeros();
    for t in 0..n {
        let mut cur = DMatrix::zeros(STATE_DIM, nu);
        if t >= 1 {
            let support = INPUT_DIM * t;
            cur.view_mut((0, 0), (STATE_DIM, support)).gemm(
                1.0,
                &a_blocks[t],
                &prev.view((0, 0), (STATE_DIM, support)),
                0.0,
            );
        }
        cur.view_mut((0, INPUT_DIM * t), (STATE_DIM, INPUT_DIM))
            .copy_from(&b_blocks[t]);
        let defect = SVector::<f64, STATE_DIM>::from_column_slice(
            &defects.as_slice()[STATE_DIM * t..STATE_DIM * (t + 1)],
        );
        let cur_p = if t >= 1 {
            a_blocks[t] * prev_p - defect
        } else {
            -defect
        };
        z.view_mut((STATE_DIM * t, 0), (STATE_DIM, nu)).copy_from(&cur);
        p.rows_mut(STATE_DIM * t, STATE_DIM)
            .copy_from_slice(cur_p.as_slice());
        prev = cur;
        prev_p = cur_p;
    }

    // Reduced Hessian 2·blkdiag(Q) + Σ_t Z_tᵀ(2P)Z_t, using the triangular
    // support of Z (states at step t depend only on du_0..du_{t−1}).
    let mut h = DMatrix::zeros(nu, nu);
    for t in 0..n {
        for i in 0..INPUT_DIM {
            for j in 0..INPUT_DIM {
                h[(INPUT_DIM * t + i, INPUT_DIM * t + j)] = 2.0 * problem.input_weights[(i, j)];
            }
        }
    }
    let mut g = DVector::zeros(nu);
    for t in 0..n {
        let gu = problem.input_weights * problem.input_at(w, t) * 2.0;
        g.rows_mut(INPUT_DIM * t, INPUT_DIM)
            .copy_from_slice(gu.as_slice());
    }
    for t in 1..=n {
        let support = INPUT_DIM * t;
        let zt = z.view((STATE_DIM * (t - 1), 0), (STATE_DIM, support));
        let mut pz = DMatrix::zeros(STATE_DIM, support);
        pz.gemm(2.0, &problem.state_weights, &zt, 0.0);
        h.view_mut((0, 0), (support, support)).gemm_tr(1.0, &zt, &pz, 1.0);
        // Gradient of the QP objective along the particular solution:
        // 2P(x_t − r_t + p_t).
        let pt = SVector::<f64, STATE_DIM>::from_column_slice(
            &p.as_slice()[STATE_DIM * (t - 1)..STATE_DIM * t],
        );
        let e = problem.state_at(w, t) - problem.reference[t - 1] + pt;
        let v = problem.state_weights * e * 2.0;
        g.rows_mut(0, support).gemv_tr(1.0, &zt, &v, 1.0);
    }

    // Reduced inequality rows. The QP Hessian stays Gauss-Newton: the
    // obstacle constraints' own curvature is negative on the feasible side
    // (exterior of an ellipsoid) and would destroy positive definiteness.
    let m = problem.rows().len();
    let mut c = DMatrix::zeros(m, nu);
    let mut b = DVector::zeros(m);
    let mut shapes = Vec::with_capacity(m);
    for (r, row) in problem.rows().iter().enumerate() {
        match *row {
            IneqRow::Obstacle { step, obstacle } => {
                let support = INPUT_DIM * step;
                let base = STATE_DIM * (step - 1);
                let x = problem.state_at(w, step);
                let rel = Vector3::new(x[0], x[1], x[2])
                    - problem.obstacle_positions[step - 1][obstacle];
                let a3 = problem.margin_models[step - 1][obstacle].gradient(&rel);
                for col in 0..support {
                    c[(r, col)] = a3[0] * z[(base, col)]
                        + a3[1] * z[(base + 1, col)]
                        + a3[2] * z[(base + 2, col)];
                }
                let pdot = a3[0] * p[base] + a3[1] * p[base + 1] + a3[2] * p[base + 2];
                b[r] = -(ineq[r] + pdot);
                shapes.push(RowShape::Dense { support });
            }
            IneqRow::StateLower { step, comp } => {
                let support = INPUT_DIM * step;
                let zi = STATE_DIM * (step - 1) + comp;
                for col in 0..support {
                    c[(r, col)] = z[(zi, col)];
                }
                b[r] = -(ineq[r] + p[zi]);
                shapes.push(RowShape::Dense { support });
            }
            IneqRow::StateUpper { step, comp } => {
                let support = INPUT_DIM * step;
                let zi = STATE_DIM * (step - 1) + comp;
                for col in 0..support {
                    c[(r, col)] = -z[(zi, col)];
                }
                b[r] = -(ineq[r] - p[zi]);
                shapes.push(RowShape::Dense { support });
            }
            IneqRow::InputLower { step, comp } => {
                let col = INPUT_DIM * step + comp;
                c[(r, col)] = 1.0;
                b[r] = -ineq[r];
                shapes.push(RowShape::Singleton { col });
            }
            IneqRow::InputUpper { step, comp } => {
                let col = INPUT_DIM * step + comp;
                c[(r, col)] = -1.0;
                b[r] = -ineq[r];
                shapes.push(RowShape::Singleton { col });
            }
        }
    }

    Condensed {
        z,
        p,
        h,
        g,
        c,
        b,
        shapes,
    }
}

/// Retry with ℓ1 slacks on the obstacle rows: variables become [du; s],
/// constraints `C_obs du + s ≥ b`, `s ≥ 0`, objective + ρ·Σs.
fn solve_relaxed(
    cond: &Condensed,
    rows: &[IneqRow],
    qp_tol: f64,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let nu = cond.h.nrows();
    let m = rows.len();
    let obstacle_rows: Vec<usize> = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| matches!(r, IneqRow::Obstacle { .. }))
        .map(|(i, _)| i)
        .collect();
    let m_obs = obstacle_rows.len();
    let n_ext = nu + m_obs;

    let mut h = DMatrix::zeros(n_ext, n_ext);
    h.view_mut((0, 0), (nu, nu)).copy_from(&cond.h);
    // Slack curvature commensurate with the reduced Hessian keeps the
    // relaxed QP well conditioned; the linear term dominates realistic
    // multiplier scales so feasible rows keep zero slack.
    let h_scale = cond.h.diagonal().amax().max(1.0);
    for k in 0..m_obs {
        h[(nu + k, nu + k)] = h_scale;
    }
    let rho = 30.0 * (1.0 + cond.g.amax());
    let mut g = DVector::from_element(n_ext, rho);
    g.rows_mut(0, nu).copy_from(&cond.g);

    let mut c = DMatrix::zeros(m + m_obs, n_ext);
    c.view_mut((0, 0), (m, nu)).copy_from(&cond.c);
    let mut b = DVector::zeros(m + m_obs);
    b.rows_mut(0, m).copy_from(&cond.b);
    let mut shapes = Vec::with_capacity(m + m_obs);
    for (i, shape) in cond.shapes.iter().enumerate() {
        if matches!(rows[i], IneqRow::Obstacle { .. }) {
            shapes.push(RowShape::Dense { support: n_ext });
        } else {
            shapes.push(*shape);
        }
    }
    for (k, &r) in obstacle_rows.iter().enumerate() {
        c[(r, nu + k)] = 1.0;
        c[(m + k, nu + k)] = 1.0;
        shapes.push(RowShape::Singleton { col: nu + k });
    }

    let sol = solve_qp(&h, &g, &c, &b, &shapes, qp_tol, None);
    if !sol.converged {
        return None;
    }
    let du = sol.x.rows(0, nu).into_owned();
    let mu = sol.z.rows(0, m).into_owned();
    Some((du, mu))
}

fn expand_step(problem: &NlpProblem, cond: &Condensed, du: &DVector<f64>) -> DVector<f64> {
    let n = problem.n_steps();
    let nu = INPUT_DIM * n;
    let mut d = DVector::zeros(problem.num_vars());
    d.rows_mut(0, nu).copy_from(du);
    let dx = &cond.z * du + &cond.p;
    d.rows_mut(nu, STATE_DIM * n).copy_from(&dx);
    d
}

/// Equality multipliers by backward recursion from the QP stationarity,
/// then the full-space KKT residual ‖∇f − J_eqᵀλ − J_inᵀμ‖_∞ plus
/// complementarity. Returns `(residual, ‖λ‖_∞)`.
fn kkt_residual(
    problem: &NlpProblem,
    w: &DVector<f64>,
    g_full: &DVector<f64>,
    ineq: &DVector<f64>,
    a_blocks: &[StateMatrix],
    b_blocks: &[InputJacobian],
    d: &DVector<f64>,
    mu: &DVector<f64>,
) -> (f64, f64) {
    let n = problem.n_steps();
    let nv = problem.num_vars();
    let _ = ineq;

    // J_inᵀ μ.
    let mut jmu = DVector::zeros(nv);
    for (r, row) in problem.rows().iter().enumerate() {
        match *row {
            IneqRow::Obstacle { step, obstacle } => {
                let x = problem.state_at(w, step);
                let rel = Vector3::new(x[0], x[1], x[2])
                    - problem.obstacle_positions[step - 1][obstacle];
                let a3 = problem.margin_models[step - 1][obstacle].gradient(&rel);
                let base = problem.state_index(step);
                for j in 0..3 {
                    jmu[base + j] += mu[r] * a3[j];
                }
            }
            IneqRow::StateLower { step, comp } => jmu[problem.state_index(step) + comp] += mu[r],
            IneqRow::StateUpper { step, comp } => jmu[problem.state_index(step) + comp] -= mu[r],
            IneqRow::InputLower { step, comp } => jmu[problem.input_index(step) + comp] += mu[r],
            IneqRow::InputUpper { step, comp } => jmu[problem.input_index(step) + comp] -= mu[r],
        }
    }

    let state_block = |v: &DVector<f64>, t: usize| -> SVector<f64, STATE_DIM> {
        let i = problem.state_index(t);
        SVector::from_column_slice(&v.as_slice()[i..i + STATE_DIM])
    };

    // λ_{s−1} = g_{x_s} + (Hd)_{x_s} − (J_inᵀμ)_{x_s} + A_sᵀλ_s.
    let mut lambda = vec![SVector::<f64, STATE_DIM>::zeros(); n];
    for s in (1..=n).rev() {
        let dx = state_block(d, s);
        let hd = problem.state_weights * dx * 2.0;
        let mut lam = state_block(g_full, s) + hd - state_block(&jmu, s);
        if s < n {
            lam += a_blocks[s].transpose() * lambda[s];
        }
        lambda[s - 1] = lam;
    }

    // Stationarity residual.
    let mut stat: f64 = 0.0;
    for t in 0..n {
        let i = problem.input_index(t);
        let gu = SVector::<f64, INPUT_DIM>::from_column_slice(&g_full.as_slice()[i..i + INPUT_DIM]);
        let ju = SVector::<f64, INPUT_DIM>::from_column_slice(&jmu.as_slice()[i..i + INPUT_DIM]);
        let r = gu + b_blocks[t].transpose() * lambda[t] - ju;
        stat = stat.max(r.amax());
    }
    for s in 1..=n {
        let mut r = state_block(g_full, s) - lambda[s - 1] - state_block(&jmu, s);
        if s < n {
            r += a_blocks[s].transpose() * lambda[s];
        }
        stat = stat.max(r.amax());
    }

    let lambda_inf = lambda.iter().fold(0.0_f64, |acc, l| acc.max(l.amax()));
    (stat, lambda_inf)
}

/// Solves the NLP by SQP with an ℓ1-merit line search.
///
/// Terminates when the KKT residual and the constraint violation both drop
/// below `tol`, or after `max_iter` accepted steps. Deterministic: identical
/// problem and initial point give a bitwise-identical solution.
pub fn solve_sqp(
    problem: &NlpProblem,
    init: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<Solution> {
    if init.len() != problem.num_vars() {
        return Err(Error::Dimension(format!(
            "initial point has {} entries, problem has {} variables",
            init.len(),
            problem.num_vars()
        )));
    }
    if init.iter().any(|v| !v.is_finite()) {
        return Err(Error::Solver("initial point contains non-finite entries".into()));
    }
    if !(tol > 0.0) {
        return Err(Error::Domain(format!("tolerance must be positive, got {tol}")));
    }

    let start = Instant::now();
    // The QP dual residual floors the measurable NLP stationarity, so near
    // convergence the subproblems are solved several orders tighter than the
    // outer tolerance; away from it a loose solve is enough for a good step.
    let qp_tol_floor = (tol * 1e-4).clamp(1e-12, 1e-8);
    let mut w = init.clone();
    let mut penalty = 1.0_f64;
    let mut relaxed = false;
    let mut iterations = 0usize;
    let mut converged = false;
    let mut best_kkt = f64::INFINITY;
    let mut since_improvement = 0usize;
    let mut warm_duals: Option<DVector<f64>> = None;
    let (mut kkt, mut viol);

    loop {
        let cost = problem.cost(&w);
        if !cost.is_finite() {
            return Err(Error::Solver(format!("non-finite cost {cost}")));
        }
        let g_full = problem.cost_gradient(&w);
        let defects = problem.equality_constraints(&w);
        let ineq = problem.inequality_constraints(&w);
        if defects.iter().chain(ineq.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Solver("non-finite constraint value".into()));
        }
        let (a_blocks, b_blocks) = problem.dynamics_blocks(&w);
        let cond = condense(problem, &w, &a_blocks, &b_blocks, &defects, &ineq);

        let qp_tol = (best_kkt * 1e-5).clamp(qp_tol_floor, 1e-6);
        let mut qp = solve_qp(
            &cond.h,
            &cond.g,
            &cond.c,
            &cond.b,
            &cond.shapes,
            qp_tol,
            warm_duals.as_ref(),
        );
        if !qp.converged && warm_duals.is_some() {
            // A stale dual warm start can stall the barrier; restart cold
            // before falling back to the slack relaxation.
            qp = solve_qp(&cond.h, &cond.g, &cond.c, &cond.b, &cond.shapes, qp_tol, None);
        }
        let (du, mu) = if qp.converged {
            (qp.x, qp.z)
        } else {
            relaxed = true;
            match solve_relaxed(&cond, problem.rows(), qp_tol) {
                Some(pair) => pair,
                None => return Err(Error::Solver("QP subproblem infeasible even with slacks".into())),
            }
        };
        warm_duals = Some(mu.clone());
        let d = expand_step(problem, &cond, &du);
        let (kkt_now, lambda_inf) =
            kkt_residual(problem, &w, &g_full, &ineq, &a_blocks, &b_blocks, &d, &mu);
        kkt = kkt_now;
        viol = problem.max_violation(&w);

        if (kkt <= tol && viol <= tol) || iterations >= max_iter {
            converged = kkt <= tol && viol <= tol;
            break;
        }
        // A limit cycle at rounding level cannot improve further; stop
        // instead of burning the iteration budget.
        if kkt >= 0.9 * best_kkt && viol <= tol {
            since_improvement += 1;
            if since_improvement >= 10 {
                break;
            }
        } else {
            since_improvement = 0;
        }
        best_kkt = best_kkt.min(kkt);

        // ℓ1 merit line search.
        let viol1 = problem.violation_l1(&w);
        let mult_norm = if mu.is_empty() { 0.0 } else { mu.amax() }.max(lambda_inf);
        penalty = penalty.max(2.0 * mult_norm).max(1.0);
        let phi0 = cost + penalty * viol1;
        let descent = g_full.dot(&d) - penalty * viol1;
        let merit = |wt: &DVector<f64>| problem.cost(wt) + penalty * problem.violation_l1(wt);
        let mut accepted = None;
        let mut tau = 1.0_f64;
        for _ in 0..40 {
            let wt = &w + &d * tau;
            let phit = merit(&wt);
            if phit.is_finite() && phit <= phi0 + 1e-4 * tau * descent.min(0.0) {
                accepted = Some(wt);
                break;
            }
            tau *= 0.5;
        }
        match accepted {
            Some(wt) => {
                w = wt;
                iterations += 1;
            }
            None => break, // stalled; report the current iterate honestly
        }
    }

    let states: Vec<_> = (0..=problem.n_steps()).map(|t| problem.state_at(&w, t)).collect();
    let inputs: Vec<_> = (0..problem.n_steps()).map(|t| problem.input_at(&w, t)).collect();
    Ok(Solution {
        inputs,
        states,
        objective: problem.cost(&w),
        kkt_residual: kkt,
        max_violation: problem.max_violation(&w),
        iterations,
        wall_time: start.elapsed().as_secs_f64(),
        converged,
        relaxed,
    })
}

