//! The cross-stage Gaussian bridge.
//!
//! When stage `k+1` finishes at time `e_(k+1)` with terminal cloud `Y`, the
//! finer stage `k` must start from a draw of `x_s^k` that is *consistent
//! with* `Y` under the coupled endpoint construction (see `schedule`).
//! Because both endpoints share one noise realization, the conditional
//! distribution is Gaussian with a closed form:
//!
//! ```text
//! x_s^k  =  (s_k / e_(k+1)) * Up(Y)  +  z,
//! z ~ N(0, Sigma),   Sigma block-diagonal per cluster and axis,
//! Sigma_block = a * I - b * ones*ones^T              (D x D)
//! a = (1 - s_k)^2 / D^k
//! b = s_k^2 * (1 - e_(k+1))^2 / (e_(k+1))^2 / D^(k+1)
//! ```
//!
//! The block has eigenvalue `a` on the (D-1)-dimensional subspace
//! orthogonal to the all-ones vector and `a - b*D` along it, so the whole
//! covariance is positive semi-definite exactly when `s_k <= e_(k+1)` —
//! the schedule-level constraint. Two boundary regimes fall out:
//! `s_k = e_(k+1)` zeroes the ones-direction (noise is per-cluster
//! zero-mean), and `e_(k+1) = 1` zeroes `b` (noise is i.i.d.).
//!
//! Sampling is O(D) per cluster without any matrix factorization: draw `D`
//! i.i.d. standard normals `eps`, center them, and re-inject the mean along
//! the ones-direction at its own scale:
//!
//! ```text
//! z_i = sqrt(a) * (eps_i - mean(eps)) + sqrt(a - b*D) * mean(eps)
//! ```

use rand::Rng;
use rand_distr::StandardNormal;

use crate::cloud::PointCloud;
use crate::error::{invalid_arg, invalid_state, Result};
use crate::geometry::upsample_replicate;
use crate::schedule::StageSchedule;

/// Tiny negative eigenvalues from float roundoff are clamped to zero; more
/// negative than this is treated as a real violation.
pub const EIGEN_CLAMP: f64 = 1e-12;

/// Per-cluster covariance of the bridge noise at one stage transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BridgeCovariance {
    /// Diagonal coefficient of the block `a*I - b*ones*ones^T`.
    pub a: f64,
    /// Rank-one coefficient of the block.
    pub b: f64,
    /// Block size = cluster size = downsample ratio.
    pub block: usize,
    /// Eigenvalue on the subspace orthogonal to ones (multiplicity D-1).
    pub eigen_perp: f64,
    /// Eigenvalue along the ones direction (`a - b*D`, clamped at zero
    /// within [`EIGEN_CLAMP`]).
    pub eigen_ones: f64,
}

impl BridgeCovariance {
    /// Covariance for the transition into stage `stage` whose coarser
    /// neighbor ends at `e_next`. Fails (invalid state) when the
    /// ones-direction eigenvalue is negative beyond roundoff, i.e. when
    /// `s > e_next`.
    pub fn from_params(s: f64, e_next: f64, ratio: usize, stage: usize) -> Result<Self> {
        if ratio < 2 {
            return Err(invalid_arg!("ratio must be >= 2, got {ratio}"));
        }
        if !(0.0..=1.0).contains(&s) {
            return Err(invalid_arg!("stage start {s} outside [0, 1]"));
        }
        if !(e_next > 0.0 && e_next <= 1.0) {
            return Err(invalid_arg!("next-stage end {e_next} outside (0, 1]"));
        }
        let d = ratio as f64;
        let dk = d.powi(stage as i32);
        let a = (1.0 - s) * (1.0 - s) / dk;
        let b = s * s * (1.0 - e_next) * (1.0 - e_next) / (e_next * e_next) / (dk * d);
        let mut eigen_ones = a - b * d;
        if eigen_ones < -EIGEN_CLAMP {
            return Err(invalid_state!(
                "bridge covariance not positive semi-definite: ones-direction eigenvalue \
                 {eigen_ones:.3e} < 0 (start {s} > next end {e_next})"
            ));
        }
        if eigen_ones.abs() <= EIGEN_CLAMP {
            eigen_ones = 0.0;
        }
        Ok(BridgeCovariance {
            a,
            b,
            block: ratio,
            eigen_perp: a,
            eigen_ones,
        })
    }

    /// Entry `(i, j)` of the dense block — handy for checks and reports.
    pub fn block_entry(&self, i: usize, j: usize) -> f64 {
        if i == j {
            self.a - self.b
        } else {
            -self.b
        }
    }
}

/// Covariance for the transition between in-schedule stages `stage` and
/// `stage + 1`.
pub fn block_covariance(stage: usize, schedule: &StageSchedule) -> Result<BridgeCovariance> {
    if stage + 1 >= schedule.stages() {
        return Err(invalid_arg!(
            "stage {stage} has no coarser neighbor in a {}-stage schedule",
            schedule.stages()
        ));
    }
    let (s, _) = schedule.interval(stage)?;
    let (_, e_next) = schedule.interval(stage + 1)?;
    BridgeCovariance::from_params(s, e_next, schedule.ratio(), stage)
}

/// Draw bridge noise for `clusters` clusters of `cov.block` points each.
/// Exactly distributed as `N(0, Sigma)` per cluster and axis, O(D) per
/// cluster.
pub fn sample_bridge_noise<R: Rng>(
    clusters: usize,
    cov: &BridgeCovariance,
    rng: &mut R,
) -> Result<PointCloud> {
    if clusters == 0 {
        return Err(invalid_arg!("cluster count must be positive"));
    }
    let d = cov.block;
    let sqrt_perp = cov.eigen_perp.sqrt();
    let sqrt_ones = cov.eigen_ones.sqrt();
    let mut rows = vec![[0.0f32; 3]; clusters * d];
    let mut eps = vec![[0.0f64; 3]; d];
    for m in 0..clusters {
        let mut mean = [0.0f64; 3];
        for item in eps.iter_mut() {
            for (axis, slot) in item.iter_mut().enumerate() {
                let v: f64 = rng.sample(StandardNormal);
                *slot = v;
                mean[axis] += v;
            }
        }
        for axis in 0..3 {
            mean[axis] /= d as f64;
        }
        for (i, item) in eps.iter().enumerate() {
            let row = &mut rows[m * d + i];
            for axis in 0..3 {
                row[axis] =
                    (sqrt_perp * (item[axis] - mean[axis]) + sqrt_ones * mean[axis]) as f32;
            }
        }
    }
    Ok(PointCloud::from_rows(rows))
}

/// Lift a coarser stage's terminal cloud into the start state of stage
/// `stage`: scale its replicated points by `s_k / e_(k+1)` and add bridge
/// noise.
///
/// For the top of the cascade (`stage + 1 == stages`) the incoming cloud is
/// the prior draw, treated as a terminal state at time 1, so `e_next = 1`
/// and the noise is i.i.d. with variance `(1 - s_k)^2 / D^k`.
pub fn lift<R: Rng>(
    coarse_terminal: &PointCloud,
    stage: usize,
    schedule: &StageSchedule,
    rng: &mut R,
) -> Result<PointCloud> {
    if stage >= schedule.stages() {
        return Err(invalid_arg!(
            "stage {stage} out of range (schedule has {})",
            schedule.stages()
        ));
    }
    let want = schedule.level_points(stage + 1)?;
    if coarse_terminal.n_points() != want {
        return Err(invalid_arg!(
            "lift into stage {stage} expects {want} coarse points, got {}",
            coarse_terminal.n_points()
        ));
    }
    let (s, _) = schedule.interval(stage)?;
    let e_next = if stage + 1 < schedule.stages() {
        schedule.interval(stage + 1)?.1
    } else {
        1.0
    };
    let cov = BridgeCovariance::from_params(s, e_next, schedule.ratio(), stage)?;
    let noise = sample_bridge_noise(coarse_terminal.n_points(), &cov, rng)?;
    let up = upsample_replicate(coarse_terminal, schedule.ratio())?;
    up.combine(s / e_next, &noise, 1.0)
}
