//! Dense primal-dual interior-point solver for the convex QP subproblems
//!
//! ```text
//!     minimize    ½ xᵀHx + gᵀx
//!     subject to  Cx ≥ b
//! ```
//!
//! with H positive definite (a small ridge is added on Cholesky failure).
//! Mehrotra predictor-corrector steps; the normal matrix `H + Cᵀ(Z/S)C` is
//! assembled row-wise so that singleton rows (variable bounds) cost O(1) and
//! dense rows touch only their support columns.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

/// Structure of one inequality row, used to assemble the normal matrix
/// cheaply.
#[derive(Debug, Clone, Copy)]
pub(crate) enum RowShape {
    /// The row is ±eᵢ.
    Singleton { col: usize },
    /// The row has nonzeros only in columns 0..support.
    Dense { support: usize },
}

#[derive(Debug)]
pub(crate) struct QpSolution {
    pub x: DVector<f64>,
    /// Inequality multipliers, z ≥ 0.
    pub z: DVector<f64>,
    pub converged: bool,
}

const MAX_ITER: usize = 100;

fn chol_with_ridge(m: &DMatrix<f64>) -> Option<(Cholesky<f64, Dyn>, f64)> {
    let n = m.nrows();
    let scale = m.diagonal().amax().max(1.0);
    let mut ridge = 0.0;
    for attempt in 0..8 {
        let mut trial = m.clone();
        if ridge > 0.0 {
            for i in 0..n {
                trial[(i, i)] += ridge;
            }
        }
        if let Some(c) = Cholesky::new(trial) {
            return Some((c, ridge));
        }
        ridge = scale * 1e-12 * 10f64.powi(attempt as i32 + 1);
    }
    None
}

fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    let mut alpha = 1.0_f64;
    for i in 0..v.len() {
        if dv[i] < 0.0 {
            alpha = alpha.min(-v[i] / dv[i]);
        }
    }
    alpha
}

/// Solves the QP. `shapes` must describe each row of `c`. `warm_z`, when
/// given, seeds the dual iterate (floored away from the boundary) with the
/// primal starting at zero — the natural warm start inside SQP, where the
/// outer iterate absorbs previous steps.
pub(crate) fn solve_qp(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    c: &DMatrix<f64>,
    b: &DVector<f64>,
    shapes: &[RowShape],
    tol: f64,
    warm_z: Option<&DVector<f64>>,
) -> QpSolution {
    let n = h.nrows();
    let m = c.nrows();
    debug_assert_eq!(shapes.len(), m);

    let unconstrained = || -> Option<DVector<f64>> {
        let (chol, _) = chol_with_ridge(h)?;
        Some(chol.solve(&(-g)))
    };

    if m == 0 {
        return match unconstrained() {
            Some(x) => QpSolution {
                x,
                z: DVector::zeros(0),
                converged: true,
            },
            None => QpSolution {
                x: DVector::zeros(n),
                z: DVector::zeros(0),
                converged: false,
            },
        };
    }

    // Transposed dense rows, precomputed once for the rank-1 updates.
    let dense_cols: Vec<Option<DVector<f64>>> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| match s {
            RowShape::Singleton { .. } => None,
            RowShape::Dense { support } => {
                Some(c.row(i).columns(0, *support).transpose().into_owned())
            }
        })
        .collect();

    let (mut x, mut z) = match warm_z {
        Some(prev) if prev.len() == m => (
            DVector::zeros(n),
            DVector::from_fn(m, |i, _| prev[i].clamp(1e-4, 1e12)),
        ),
        _ => (
            unconstrained().unwrap_or_else(|| DVector::zeros(n)),
            DVector::from_element(m, 1.0),
        ),
    };
    // Mehrotra-style starting slacks: shift everything away from the
    // boundary by an amount matched to the worst violation, instead of
    // clipping rows individually (which destroys the centering).
    let mut s = c * &x - b;
    let shift = (-1.5 * s.min()).max(0.0) + 0.1;
    for v in s.iter_mut() {
        *v += shift;
    }

    let g_scale = 1.0 + g.amax();
    let b_scale = 1.0 + b.amax();

    // Track the best iterate by a scaled optimality score; the endgame of an
    // interior-point iteration can oscillate once μ is at rounding level, so
    // bail out after a stretch without improvement.
    let mut best: Option<(f64, DVector<f64>, DVector<f64>)> = None;
    let mut since_improvement = 0usize;

    for _ in 0..MAX_ITER {
        let cx = c * &x;
        let r_d = h * &x + g - c.transpose() * &z;
        let r_p = &cx - &s - b;
        let mu = s.dot(&z) / m as f64;

        let score = (r_d.amax() / g_scale).max(r_p.amax() / b_scale).max(mu);
        if std::env::var("CCMPC_QP_TRACE").is_ok() {
            eprintln!("  qp it: score {score:.4e} mu {mu:.3e} rd {:.3e} rp {:.3e}", r_d.amax(), r_p.amax());
        }
        match &best {
            Some((sc, _, _)) if score >= 0.9 * sc => since_improvement += 1,
            _ => since_improvement = 0,
        }
        if best.as_ref().is_none_or(|(sc, _, _)| score < *sc) {
            best = Some((score, x.clone(), z.clone()));
        }
        if score <= tol {
            return QpSolution {
                x,
                z,
                converged: true,
            };
        }
        if since_improvement >= 8 {
            break;
        }

        // Normal matrix M = H + Cᵀ diag(z/s) C.
        let mut normal = h.clone();
        for (i, shape) in shapes.iter().enumerate() {
            let weight = (z[i] / s[i]).min(1e14);
            match shape {
                RowShape::Singleton { col } => normal[(*col, *col)] += weight,
                RowShape::Dense { support } => {
                    let col = dense_cols[i].as_ref().expect("dense row");
                    normal
                        .view_mut((0, 0), (*support, *support))
                        .ger(weight, col, col, 1.0);
                }
            }
        }
        let Some((chol, used_ridge)) = chol_with_ridge(&normal) else {
            break;
        };
        if std::env::var("CCMPC_QP_TRACE").is_ok() && used_ridge > 0.0 {
            eprintln!("    ridge {used_ridge:.3e}");
        }

        let solve_direction = |corr: &DVector<f64>| -> (DVector<f64>, DVector<f64>, DVector<f64>) {
            // q_i = z_i + (corr_i + z_i·r_p_i)/s_i, rhs = −r_d − Cᵀq.
            let q = DVector::from_fn(m, |i, _| z[i] + (corr[i] + z[i] * r_p[i]) / s[i]);
            let rhs = -&r_d - c.transpose() * q;
            let mut dx = chol.solve(&rhs);
            // Two rounds of iterative refinement: the 1/s factors amplify
            // any residual of this solve into the recovered dual step, so
            // the normal-equation solution must be accurate well beyond the
            // bare factorization.
            for _ in 0..2 {
                let residual = &rhs - &normal * &dx;
                dx += chol.solve(&residual);
            }
            let ds = c * &dx + &r_p;
            let dz = DVector::from_fn(m, |i, _| -(s[i] * z[i] + corr[i] + z[i] * ds[i]) / s[i]);
            (dx, ds, dz)
        };

        // Predictor.
        let zero = DVector::zeros(m);
        let (_dx_a, ds_a, dz_a) = solve_direction(&zero);
        let alpha_p = max_step(&s, &ds_a).min(1.0);
        let alpha_d = max_step(&z, &dz_a).min(1.0);
        let mu_aff = (0..m)
            .map(|i| (s[i] + alpha_p * ds_a[i]) * (z[i] + alpha_d * dz_a[i]))
            .sum::<f64>()
            / m as f64;
        let sigma = (mu_aff / mu).max(0.0).powi(3).min(1.0);

        // Corrector.
        let corr = DVector::from_fn(m, |i, _| ds_a[i] * dz_a[i] - sigma * mu);
        let (dx, ds, dz) = solve_direction(&corr);
        let alpha_p = (0.995 * max_step(&s, &ds)).min(1.0);
        let alpha_d = (0.995 * max_step(&z, &dz)).min(1.0);
        if std::env::var("CCMPC_QP_TRACE").is_ok() {
            eprintln!("    ap {alpha_p:.3e} ad {alpha_d:.3e} |dz| {:.3e} |dx| {:.3e} sigma {sigma:.2e}", dz.amax(), dx.amax());
        }

        x += alpha_p * dx;
        s += alpha_p * ds;
        z += alpha_d * dz;

        if x.iter().any(|v| !v.is_finite())
            || s.iter().any(|v| !v.is_finite())
            || z.iter().any(|v| !v.is_finite())
        {
            break;
        }
    }

    if std::env::var("CCMPC_QP_TRACE").is_ok() {
        eprintln!(
            "qp cap: n={n} m={m} best score {:?}",
            best.as_ref().map(|(sc, _, _)| *sc)
        );
    }
    // Iteration cap or numerical breakdown: hand back the best iterate. A
    // moderately accurate direction is still useful to the SQP line search;
    // anything worse is treated as an infeasible subproblem by the caller.
    match best {
        Some((score, x, z)) => QpSolution {
            x,
            z,
            converged: score <= 1e-6,
        },
        None => QpSolution {
            x: DVector::zeros(n),
            z: DVector::zeros(m),
            converged: false,
        },
    }
}
