//! Linear Kalman measurement update on the constant-velocity obstacle model.
//!
//! The predict half of the filter is `obstacle_step`/`obstacle_jacobian` plus
//! `propagate_covariance`; this module adds the position-only measurement
//! update in Joseph form so the posterior stays PSD.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::dynamics::STATE_DIM;
use crate::error::{Error, Result};
use crate::gaussian::GaussianBelief;

/// Measurement update observing position only, with isotropic measurement
/// variance `meas_var` (m²). The belief must be over the 8-dim obstacle
/// state with the predict step already applied.
pub fn kalman_update(
    belief: &GaussianBelief,
    measurement: &Vector3<f64>,
    meas_var: f64,
) -> Result<GaussianBelief> {
    if belief.dim() != STATE_DIM {
        return Err(Error::Dimension(format!(
            "kalman_update expects an {STATE_DIM}-dim belief, got {}",
            belief.dim()
        )));
    }
    if !(meas_var >= 0.0) {
        return Err(Error::Invariant(format!("negative measurement variance {meas_var}")));
    }
    let p = belief.cov();
    // S = H P Hᵀ + R with H = [I₃ 0].
    let mut innovation_cov = p.fixed_view::<3, 3>(0, 0).into_owned();
    for j in 0..3 {
        innovation_cov[(j, j)] += meas_var;
    }
    let chol = Matrix3::from(innovation_cov)
        .cholesky()
        .ok_or_else(|| Error::Invariant("innovation covariance is not positive definite".into()))?;

    // K = P Hᵀ S⁻¹ (8x3).
    let ph = p.columns(0, 3).into_owned();
    let mut gain = DMatrix::zeros(STATE_DIM, 3);
    for i in 0..STATE_DIM {
        let row = Vector3::new(ph[(i, 0)], ph[(i, 1)], ph[(i, 2)]);
        let solved = chol.solve(&row);
        for j in 0..3 {
            gain[(i, j)] = solved[j];
        }
    }

    let residual = measurement - Vector3::new(belief.mean()[0], belief.mean()[1], belief.mean()[2]);
    let mean = belief.mean() + &gain * DVector::from_column_slice(residual.as_slice());

    // Joseph form: (I − KH) P (I − KH)ᵀ + K R Kᵀ.
    let mut ikh = DMatrix::identity(STATE_DIM, STATE_DIM);
    for i in 0..STATE_DIM {
        for j in 0..3 {
            ikh[(i, j)] -= gain[(i, j)];
        }
    }
    let cov = &ikh * p * ikh.transpose() + &gain * gain.transpose() * meas_var;
    GaussianBelief::new(mean, cov)
}
