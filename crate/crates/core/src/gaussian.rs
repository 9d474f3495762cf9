//! Standard-normal machinery and the deterministic equivalent of a scalar
//! linear Gaussian chance constraint.
//!
//! A constraint `P(aᵀX + b ≤ 0) ≥ 1−α` on a Gaussian `X ~ N(μ, Σ)` is
//! equivalent to the deterministic inequality
//!
//! ```text
//! aᵀμ + b + Ψ⁻¹(1−α)·√(aᵀΣa) ≤ 0
//! ```
//!
//! where `Ψ` is the standard normal CDF. [`linear_cc_margin`] evaluates the
//! left-hand side; [`std_normal_cdf`] and [`std_normal_quantile`] provide the
//! scalar machinery. The quantile enters constraint gradients, so it is
//! implemented with a rational initial guess refined by Halley steps against
//! the high-accuracy CDF.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Mean vector plus positive-semidefinite covariance; carrier of all
/// stochastic state in the planner.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl GaussianBelief {
    /// Builds a belief, validating dimensions, symmetry (1e-12 relative) and
    /// positive semidefiniteness (eigenvalues ≥ −1e-10·‖Σ‖).
    ///
    /// The stored covariance is symmetrized, `Σ ← (Σ+Σᵀ)/2`; first-order
    /// propagation accumulates asymmetry in floating point.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if cov.nrows() != n || cov.ncols() != n {
            return Err(Error::Dimension(format!(
                "mean has {} entries but covariance is {}x{}",
                n,
                cov.nrows(),
                cov.ncols()
            )));
        }
        if mean.iter().any(|x| !x.is_finite()) || cov.iter().any(|x| !x.is_finite()) {
            return Err(Error::Invariant("belief contains non-finite entries".into()));
        }
        check_symmetric(&cov)?;
        let cov = symmetrize(&cov);
        check_psd(&cov)?;
        Ok(Self { mean, cov })
    }

    /// A point-mass belief (zero covariance).
    pub fn deterministic(mean: DVector<f64>) -> Self {
        let n = mean.len();
        Self {
            mean,
            cov: DMatrix::zeros(n, n),
        }
    }

    /// Belief with a diagonal covariance; variances must be nonnegative.
    pub fn from_diagonal(mean: DVector<f64>, variances: &[f64]) -> Result<Self> {
        if let Some(v) = variances.iter().find(|v| **v < 0.0 || !v.is_finite()) {
            return Err(Error::Invariant(format!("negative or non-finite variance {v}")));
        }
        let cov = DMatrix::from_diagonal(&DVector::from_row_slice(variances));
        Self::new(mean, cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }
}

/// `(M + Mᵀ)/2`.
pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Fails unless `M` is symmetric within 1e-12 relative tolerance.
pub(crate) fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    let scale = m.iter().fold(0.0_f64, |acc, x| acc.max(x.abs())).max(1.0);
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * scale {
                return Err(Error::Invariant(format!(
                    "matrix not symmetric at ({i},{j}): {} vs {}",
                    m[(i, j)],
                    m[(j, i)]
                )));
            }
        }
    }
    Ok(())
}

/// Fails unless the symmetric matrix `M` is PSD up to eigenvalues
/// ≥ −1e-10·‖M‖ (spectral norm).
pub(crate) fn check_psd(m: &DMatrix<f64>) -> Result<()> {
    if m.is_empty() {
        return Ok(());
    }
    let eigs = m.clone().symmetric_eigenvalues();
    let scale = eigs.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()));
    let min = eigs.min();
    if min < -(1e-10 * scale + 1e-15) {
        return Err(Error::Invariant(format!(
            "matrix not PSD: minimum eigenvalue {min:e} (scale {scale:e})"
        )));
    }
    Ok(())
}

/// A (possibly rank-deficient) factor `L` with `LLᵀ ≈ M`, via the symmetric
/// eigendecomposition with negative eigenvalues clamped to zero. Used to
/// sample degenerate Gaussians as affine pushforwards of a standard normal.
pub(crate) fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(m).symmetric_eigen();
    let mut l = eig.eigenvectors;
    for (j, lambda) in eig.eigenvalues.iter().enumerate() {
        let s = lambda.max(0.0).sqrt();
        l.column_mut(j).scale_mut(s);
    }
    l
}

/// Standard normal density.
pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

// Complementary error function after W. J. Cody's rational approximations
// (as in SPECFUN's CALERF), accurate to a few ulp over the whole range. The
// tail is evaluated as exp(−t²)·R(t) so relative accuracy survives underflow
// territory, which the deterministic-equivalent back-off relies on.
fn erfc_cody(x: f64) -> f64 {
    const A: [f64; 5] = [
        3.161_123_743_870_565_6e0,
        1.138_641_541_510_501_56e2,
        3.774_852_376_853_020_2e2,
        3.209_377_589_138_469_47e3,
        1.857_777_061_846_031_53e-1,
    ];
    const B: [f64; 4] = [
        2.360_129_095_234_412_09e1,
        2.440_246_379_344_441_73e2,
        1.282_616_526_077_372_28e3,
        2.844_236_833_439_170_62e3,
    ];
    const C: [f64; 9] = [
        5.641_884_969_886_700_9e-1,
        8.883_149_794_388_375_94e0,
        6.611_919_063_714_162_95e1,
        2.986_351_381_974_001_31e2,
        8.819_522_212_417_690_9e2,
        1.712_047_612_634_070_58e3,
        2.051_078_377_826_071_47e3,
        1.230_339_354_797_997_25e3,
        2.153_115_354_744_038_46e-8,
    ];
    const D: [f64; 8] = [
        1.574_492_611_070_983_47e1,
        1.176_939_508_913_124_99e2,
        5.371_811_018_620_098_58e2,
        1.621_389_574_566_690_19e3,
        3.290_799_235_733_459_63e3,
        4.362_619_090_143_247_16e3,
        3.439_367_674_143_721_64e3,
        1.230_339_354_803_749_42e3,
    ];
    const P: [f64; 6] = [
        3.053_266_349_612_323_44e-1,
        3.603_448_999_498_044_39e-1,
        1.257_817_261_112_292_46e-1,
        1.608_378_514_874_227_66e-2,
        6.587_491_615_298_378_03e-4,
        1.631_538_713_730_209_78e-2,
    ];
    const Q: [f64; 5] = [
        2.568_520_192_289_822_42e0,
        1.872_952_849_923_460_47e0,
        5.279_051_029_514_284_12e-1,
        6.051_834_131_244_131_91e-2,
        2.335_204_976_268_691_85e-3,
    ];
    const SQRPI: f64 = 5.641_895_835_477_562_87e-1; // 1/√π

    let y = x.abs();
    let result = if y <= 0.46875 {
        // erfc(x) = 1 − erf(x) with the erf rational approximation.
        let ysq = if y > 5.96e-8 { y * y } else { 0.0 };
        let mut xnum = A[4] * ysq;
        let mut xden = ysq;
        for i in 0..3 {
            xnum = (xnum + A[i]) * ysq;
            xden = (xden + B[i]) * ysq;
        }
        return 1.0 - x * (xnum + A[3]) / (xden + B[3]);
    } else if y <= 4.0 {
        let mut xnum = C[8] * y;
        let mut xden = y;
        for i in 0..7 {
            xnum = (xnum + C[i]) * y;
            xden = (xden + D[i]) * y;
        }
        let r = (xnum + C[7]) / (xden + D[7]);
        let ysq = (y * 16.0).trunc() / 16.0;
        let del = (y - ysq) * (y + ysq);
        (-ysq * ysq).exp() * (-del).exp() * r
    } else if y < 26.543 {
        let ysq = 1.0 / (y * y);
        let mut xnum = P[5] * ysq;
        let mut xden = ysq;
        for i in 0..4 {
            xnum = (xnum + P[i]) * ysq;
            xden = (xden + Q[i]) * ysq;
        }
        let mut r = ysq * (xnum + P[4]) / (xden + Q[4]);
        r = (SQRPI - r) / y;
        let ysq = (y * 16.0).trunc() / 16.0;
        let del = (y - ysq) * (y + ysq);
        (-ysq * ysq).exp() * (-del).exp() * r
    } else {
        0.0
    };
    if x < 0.0 {
        2.0 - result
    } else {
        result
    }
}

/// Standard normal cumulative distribution function `Ψ`.
///
/// Evaluated as `erfc(−x/√2)/2` so that deep tails keep full relative
/// accuracy; absolute error is below 1e-12 everywhere.
pub fn std_normal_cdf(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::Domain(format!("std_normal_cdf of non-finite {x}")));
    }
    Ok(0.5 * erfc_cody(-x / std::f64::consts::SQRT_2))
}

// Rational approximation of the standard normal quantile (Acklam's method,
// relative error < 1.2e-9). Refined below by Halley iterations.
fn quantile_initial_guess(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_690e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.02425;

    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -((((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0))
    }
}

/// Standard normal quantile `Ψ⁻¹`, defined for `0 < p < 1`.
///
/// Satisfies `Ψ(Ψ⁻¹(p)) = p` to well below 1e-10.
pub fn std_normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!(
            "std_normal_quantile requires 0 < p < 1, got {p}"
        )));
    }
    let mut x = quantile_initial_guess(p);
    // Two Halley steps; each roughly cubes the accuracy of the guess.
    for _ in 0..2 {
        let pdf = std_normal_pdf(x);
        if pdf < 1e-300 {
            break;
        }
        let err = std_normal_cdf(x)? - p;
        let u = err / pdf;
        x -= u / (1.0 + 0.5 * x * u).max(0.5);
    }
    Ok(x)
}

/// Margin of the deterministic equivalent of `P(aᵀX + b ≤ 0) ≥ 1−α`:
/// returns `aᵀμ + b + Ψ⁻¹(1−α)·√(aᵀΣa)`. The chance constraint holds iff the
/// returned margin is ≤ 0.
pub fn linear_cc_margin(
    a: &DVector<f64>,
    b: f64,
    belief: &GaussianBelief,
    alpha: f64,
) -> Result<f64> {
    if a.len() != belief.dim() {
        return Err(Error::Dimension(format!(
            "a has {} entries, belief has dimension {}",
            a.len(),
            belief.dim()
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!("alpha must lie in (0,1), got {alpha}")));
    }
    let var = (a.transpose() * belief.cov() * a)[(0, 0)];
    if var < -1e-10 {
        return Err(Error::Invariant(format!(
            "aᵀΣa = {var:e} < -1e-10; covariance is not PSD"
        )));
    }
    let backoff = std_normal_quantile(1.0 - alpha)?;
    Ok(a.dot(belief.mean()) + b + backoff * var.max(0.0).sqrt())
}
