//! Deterministic surrogates for the disjunctive collision chance constraint.
//!
//! An axis-aligned obstacle box with semi-sizes `d` must be avoided with
//! per-step, per-obstacle risk budget `α_t^i`. Each face constraint is a
//! scalar linear Gaussian chance constraint, so the box can be inflated per
//! axis by `Ψ⁻¹(1−α_t^i)·√(σ²_robot + σ²_obstacle)` and the disjunction over
//! the six faces replaced by the smooth exterior of the minimum-volume
//! enclosing ellipsoid `Σ_j (x_j/d̃_j)² ≥ 3` of the inflated box.
//!
//! [`mc_collision_probability`] is the sampling oracle that certifies the
//! bound: for any point on or outside the ellipsoid, the estimated collision
//! probability stays below the allocated risk.

use nalgebra::{DMatrix, DVector, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussian::{psd_factor, std_normal_cdf, std_normal_quantile, GaussianBelief};

/// Axis-aligned obstacle bounding box given by strictly positive semi-sizes
/// (half-extents) in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    semi_sizes: Vector3<f64>,
}

impl BoundingBox {
    pub fn new(semi_sizes: Vector3<f64>) -> Result<Self> {
        if semi_sizes.iter().any(|d| !d.is_finite() || *d <= 0.0) {
            return Err(Error::Invariant(format!(
                "box semi-sizes must be strictly positive, got {:?}",
                semi_sizes.as_slice()
            )));
        }
        Ok(Self { semi_sizes })
    }

    pub fn semi_sizes(&self) -> Vector3<f64> {
        self.semi_sizes
    }

    /// True iff a relative position lies inside (or on) the box, i.e. in
    /// collision.
    pub fn contains(&self, rel_pos: &Vector3<f64>) -> bool {
        (0..3).all(|j| rel_pos[j].abs() <= self.semi_sizes[j])
    }
}

/// Bounding box enlarged by the uncertainty back-off; produced by
/// [`inflate_box`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InflatedBox {
    semi_sizes: Vector3<f64>,
}

impl InflatedBox {
    pub fn new(semi_sizes: Vector3<f64>) -> Result<Self> {
        if semi_sizes.iter().any(|d| !d.is_finite() || *d <= 0.0) {
            return Err(Error::Invariant(format!(
                "inflated semi-sizes must be strictly positive, got {:?}",
                semi_sizes.as_slice()
            )));
        }
        Ok(Self { semi_sizes })
    }

    pub fn semi_sizes(&self) -> Vector3<f64> {
        self.semi_sizes
    }
}

/// Per-step, per-obstacle risk budgets `α_t^i` with `Σ_t Σ_i α_t^i ≤ α`.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskAllocation {
    total_alpha: f64,
    per_step: DMatrix<f64>,
}

impl RiskAllocation {
    /// `per_step` is indexed `(step, obstacle)`.
    pub fn new(total_alpha: f64, per_step: DMatrix<f64>) -> Result<Self> {
        if per_step.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Invariant(
                "risk allocation entries must lie in [0,1]".into(),
            ));
        }
        let sum: f64 = per_step.iter().sum();
        if sum > total_alpha + 1e-12 {
            return Err(Error::Invariant(format!(
                "risk allocation sums to {sum} > total alpha {total_alpha}"
            )));
        }
        Ok(Self {
            total_alpha,
            per_step,
        })
    }

    pub fn total_alpha(&self) -> f64 {
        self.total_alpha
    }

    pub fn n_steps(&self) -> usize {
        self.per_step.nrows()
    }

    pub fn n_obstacles(&self) -> usize {
        self.per_step.ncols()
    }

    /// Risk budget for (0-based) step row `t` and obstacle `i`.
    pub fn alpha(&self, step: usize, obstacle: usize) -> f64 {
        self.per_step[(step, obstacle)]
    }
}

/// The uniform allocation `α_t^i = α/(N·N_o)`.
pub fn uniform_risk_allocation(
    alpha: f64,
    n_steps: usize,
    n_obstacles: usize,
) -> Result<RiskAllocation> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!("alpha must lie in (0,1), got {alpha}")));
    }
    if n_steps == 0 || n_obstacles == 0 {
        return Err(Error::Domain(
            "risk allocation needs at least one step and one obstacle".into(),
        ));
    }
    let share = alpha / (n_steps * n_obstacles) as f64;
    RiskAllocation::new(alpha, DMatrix::from_element(n_steps, n_obstacles, share))
}

/// Inflates each semi-size by `Ψ⁻¹(1−α_t^i)·√(σ²_robot,j + σ²_obstacle,j)`.
///
/// For `α_t^i > 0.5` the "inflation" is negative; callers that never intend
/// that regime should warn or reject upstream.
pub fn inflate_box(
    bounding_box: &BoundingBox,
    alpha_it: f64,
    sigma2_robot: &Vector3<f64>,
    sigma2_obstacle: &Vector3<f64>,
) -> Result<InflatedBox> {
    if !(alpha_it > 0.0 && alpha_it < 1.0) {
        return Err(Error::Domain(format!(
            "alpha must lie in (0,1), got {alpha_it}"
        )));
    }
    for v in sigma2_robot.iter().chain(sigma2_obstacle.iter()) {
        if !v.is_finite() || *v < 0.0 {
            return Err(Error::Invariant(format!("negative variance {v}")));
        }
    }
    let backoff = std_normal_quantile(1.0 - alpha_it)?;
    let d = bounding_box.semi_sizes();
    let semi = Vector3::from_fn(|j, _| {
        d[j] + backoff * (sigma2_robot[j] + sigma2_obstacle[j]).sqrt()
    });
    InflatedBox::new(semi)
}

/// Margin of the smooth ellipsoidal surrogate: `Σ_j (rel_j/d̃_j)² − 3`.
/// Nonnegative iff the relative position lies on or outside the
/// minimum-volume enclosing ellipsoid of the inflated box.
pub fn ellipsoid_margin(rel_pos: &Vector3<f64>, inflated: &InflatedBox) -> f64 {
    let d = inflated.semi_sizes();
    let mut sum = 0.0;
    for j in 0..3 {
        let r = rel_pos[j] / d[j];
        sum += r * r;
    }
    sum - 3.0
}

/// Analytic gradient of [`ellipsoid_margin`] with respect to the relative
/// position: component `j` is `2·rel_j/d̃_j²`.
pub fn ellipsoid_gradient(rel_pos: &Vector3<f64>, inflated: &InflatedBox) -> Vector3<f64> {
    let d = inflated.semi_sizes();
    Vector3::from_fn(|j, _| 2.0 * rel_pos[j] / (d[j] * d[j]))
}

const MC_BATCH: usize = 8192;

/// Monte Carlo estimate of the collision probability
/// `P(|Δ_j| ≤ d_j for all j)` for the relative position belief `Δ = p − q`.
///
/// Sampling uses fixed-size batches on separate ChaCha streams, so the result
/// is a deterministic function of `(belief, box, n_samples, seed)` no matter
/// how many worker threads execute the batches. Degenerate covariances are
/// handled by pushing a standard normal through a PSD factor.
pub fn mc_collision_probability(
    rel_belief: &GaussianBelief,
    bounding_box: &BoundingBox,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    if rel_belief.dim() != 3 {
        return Err(Error::Dimension(format!(
            "relative-position belief must be 3-dimensional, got {}",
            rel_belief.dim()
        )));
    }
    if n_samples == 0 {
        return Err(Error::Domain("n_samples must be positive".into()));
    }
    let factor = psd_factor(rel_belief.cov());
    let mean = rel_belief.mean().clone();
    let d = bounding_box.semi_sizes();
    let n_batches = n_samples.div_ceil(MC_BATCH);

    let hits: u64 = (0..n_batches)
        .into_par_iter()
        .map(|batch| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(batch as u64);
            let count = MC_BATCH.min(n_samples - batch * MC_BATCH);
            let mut hits = 0u64;
            let mut z = DVector::zeros(3);
            for _ in 0..count {
                for zj in z.iter_mut() {
                    *zj = rng.sample(StandardNormal);
                }
                let x = &mean + &factor * &z;
                if (0..3).all(|j| x[j].abs() <= d[j]) {
                    hits += 1;
                }
            }
            hits
        })
        .sum();

    Ok(hits as f64 / n_samples as f64)
}

// CDF extended to ±∞ arguments (exact limits).
fn cdf_extended(z: f64) -> f64 {
    if z.is_nan() {
        f64::NAN
    } else if z == f64::INFINITY {
        1.0
    } else if z == f64::NEG_INFINITY {
        0.0
    } else {
        std_normal_cdf(z).expect("finite argument")
    }
}

/// Closed-form collision probability for an axis-independent (diagonal
/// covariance) relative-position distribution: the product over axes of
/// `Ψ((d_j−μ_j)/σ_j) − Ψ((−d_j−μ_j)/σ_j)`.
pub fn analytic_box_probability(
    rel_mean: &Vector3<f64>,
    diag_vars: &Vector3<f64>,
    bounding_box: &BoundingBox,
) -> f64 {
    let d = bounding_box.semi_sizes();
    let mut prob = 1.0;
    for j in 0..3 {
        let sigma = diag_vars[j].max(0.0).sqrt();
        let p = if sigma == 0.0 {
            if rel_mean[j].abs() <= d[j] {
                1.0
            } else {
                0.0
            }
        } else {
            cdf_extended((d[j] - rel_mean[j]) / sigma) - cdf_extended((-d[j] - rel_mean[j]) / sigma)
        };
        prob *= p;
    }
    prob
}

/// One randomized certification case for the safety bound: a random box,
/// random (correlated) robot and obstacle position covariances, a random
/// per-step risk budget and a relative position ON the inflated ellipsoid
/// boundary, together with the Monte Carlo collision estimate and the
/// acceptance bound `α_it + 3·√(α_it(1−α_it)/n)`.
#[derive(Debug, Clone, Copy)]
pub struct SafetyCase {
    pub alpha_it: f64,
    /// Monte Carlo estimate of the collision probability at the boundary
    /// point.
    pub probability: f64,
    /// The sampling-aware acceptance bound.
    pub bound: f64,
}

impl SafetyCase {
    pub fn passes(&self) -> bool {
        self.probability <= self.bound
    }
}

// Random PSD 3x3 covariance with prescribed diagonal: a random Gram matrix
// rescaled by a diagonal congruence (which preserves semidefiniteness).
fn random_cov_with_diag(rng: &mut ChaCha8Rng, diag: &Vector3<f64>) -> DMatrix<f64> {
    let a = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
    let mut gram = &a * a.transpose();
    for i in 0..3 {
        gram[(i, i)] += 1e-9;
    }
    let mut cov = DMatrix::zeros(3, 3);
    for i in 0..3 {
        for j in 0..3 {
            cov[(i, j)] = gram[(i, j)] * (diag[i] * diag[j]).sqrt()
                / (gram[(i, i)] * gram[(j, j)]).sqrt();
        }
    }
    cov
}

/// Draws and evaluates one safety-chain case. Deterministic in
/// `(seed, case)`; the sampling splits into fixed substreams, so results do
/// not depend on worker count. `deflation_sigmas > 0` deliberately shrinks
/// the inflation (a negative control that must make the certification fail).
pub fn safety_chain_case(
    seed: u64,
    case: u64,
    n_samples: usize,
    deflation_sigmas: f64,
) -> Result<SafetyCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX - case);

    let d = Vector3::from_fn(|_, _| rng.random_range(0.2..3.0));
    let bounding_box = BoundingBox::new(d)?;
    let var_robot = Vector3::from_fn(|_, _| rng.random_range(1e-4..0.25));
    let var_obstacle = Vector3::from_fn(|_, _| rng.random_range(1e-4..0.25));
    let cov_robot = random_cov_with_diag(&mut rng, &var_robot);
    let cov_obstacle = random_cov_with_diag(&mut rng, &var_obstacle);
    let alpha_it = rng.random_range(1e-4..0.2);

    let backoff = std_normal_quantile(1.0 - alpha_it)? - deflation_sigmas;
    let semi = Vector3::from_fn(|j, _| {
        (d[j] + backoff * (var_robot[j] + var_obstacle[j]).sqrt()).max(1e-3)
    });
    let inflated = InflatedBox::new(semi)?;

    // Uniform direction to a point on the ellipsoid boundary (margin = 0).
    let mut dir = Vector3::from_fn(|_, _| {
        rng.sample::<f64, _>(StandardNormal)
    });
    while dir.norm() < 1e-6 {
        dir = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
    }
    let scale = 3.0_f64.sqrt()
        / Vector3::from_fn(|j, _| dir[j] / inflated.semi_sizes()[j]).norm();
    let rel = dir * scale;
    debug_assert!(ellipsoid_margin(&rel, &inflated).abs() < 1e-9);

    let mc_seed: u64 = rng.random();
    let belief = GaussianBelief::new(
        DVector::from_column_slice(rel.as_slice()),
        &cov_robot + &cov_obstacle,
    )?;
    let probability = mc_collision_probability(&belief, &bounding_box, n_samples, mc_seed)?;
    let bound = alpha_it + 3.0 * (alpha_it * (1.0 - alpha_it) / n_samples as f64).sqrt();
    Ok(SafetyCase {
        alpha_it,
        probability,
        bound,
    })
}
