//! Stage schedule: how generation time `[0, 1]` is split across
//! resolution stages, and how training endpoints are built on each stage.
//!
//! Stage `k` (k = 0 finest) works on clouds of `N / D^k` points over the
//! time interval `[s_k, e_k]`. Endpoints couple data with one shared noise
//! draw `n` of per-coordinate variance `1 / D^k`:
//!
//! ```text
//! x_s = s_k * Up(coarse) + (1 - s_k) * n
//! x_e = e_k * fine       + (1 - e_k) * n
//! ```
//!
//! Using the *same* `n` in both is what makes the cross-stage bridge
//! covariance (see `bridge`) exact; drawing twice silently breaks it.

use crate::cloud::PointCloud;
use crate::error::{invalid_arg, Result};
use crate::geometry::{upsample_replicate, HierarchyPair};

/// Validated stage layout. Immutable once constructed.
#[derive(Debug, Clone, PartialEq)]
pub struct StageSchedule {
    stages: usize,
    ratio: usize,
    intervals: Vec<(f64, f64)>,
    base_points: usize,
}

/// Coupled start/end states for one stage's flow.
#[derive(Debug, Clone)]
pub struct EndpointPair {
    pub x_s: PointCloud,
    pub x_e: PointCloud,
    pub stage: usize,
}

/// A point on the linear interpolant between endpoints.
#[derive(Debug, Clone)]
pub struct InterpolantState {
    pub x_t: PointCloud,
    pub t_local: f64,
    pub t_global: f64,
}

/// Validate and build a schedule.
///
/// Constraints, each reported by name on violation:
/// - exactly `stages` intervals with `0 <= s_k < e_k <= 1`;
/// - `s_k <= e_{k+1}` for adjacent stages — the positive semi-definiteness
///   condition for the cross-stage bridge covariance;
/// - `base_points` divisible by `ratio^stages`.
pub fn new_schedule(
    stages: usize,
    ratio: usize,
    intervals: Vec<(f64, f64)>,
    base_points: usize,
) -> Result<StageSchedule> {
    if stages == 0 {
        return Err(invalid_arg!("schedule needs at least one stage"));
    }
    if ratio < 2 {
        return Err(invalid_arg!("ratio must be >= 2, got {ratio}"));
    }
    if intervals.len() != stages {
        return Err(invalid_arg!(
            "expected {stages} intervals, got {}",
            intervals.len()
        ));
    }
    for (k, &(s, e)) in intervals.iter().enumerate() {
        if !(s.is_finite() && e.is_finite()) || s < 0.0 || e > 1.0 || s >= e {
            return Err(invalid_arg!(
                "interval {k} = ({s}, {e}) must satisfy 0 <= s < e <= 1"
            ));
        }
    }
    for k in 0..stages.saturating_sub(1) {
        let s_k = intervals[k].0;
        let e_next = intervals[k + 1].1;
        if s_k > e_next {
            return Err(invalid_arg!(
                "interval {k}: start {s_k} exceeds stage {}'s end {e_next}; \
                 the bridge covariance is positive semi-definite only when s_k <= e_(k+1)",
                k + 1
            ));
        }
    }
    let stride = (ratio as u64)
        .checked_pow(stages as u32)
        .ok_or_else(|| invalid_arg!("ratio {ratio}^{stages} overflows"))?;
    if base_points == 0 || (base_points as u64) % stride != 0 {
        return Err(invalid_arg!(
            "base point count {base_points} not divisible by {ratio}^{stages} = {stride}"
        ));
    }
    Ok(StageSchedule {
        stages,
        ratio,
        intervals,
        base_points,
    })
}

impl StageSchedule {
    pub fn stages(&self) -> usize {
        self.stages
    }

    pub fn ratio(&self) -> usize {
        self.ratio
    }

    pub fn base_points(&self) -> usize {
        self.base_points
    }

    pub fn intervals(&self) -> &[(f64, f64)] {
        &self.intervals
    }

    /// `(s_k, e_k)` for a stage in range.
    pub fn interval(&self, stage: usize) -> Result<(f64, f64)> {
        self.intervals
            .get(stage)
            .copied()
            .ok_or_else(|| invalid_arg!("stage {stage} out of range (schedule has {})", self.stages))
    }

    /// Points in a level-`k` cloud, valid for `k = 0 ..= stages`.
    pub fn level_points(&self, level: usize) -> Result<usize> {
        if level > self.stages {
            return Err(invalid_arg!(
                "level {level} out of range (hierarchy has levels 0..={})",
                self.stages
            ));
        }
        Ok(self.base_points / self.ratio.pow(level as u32))
    }

    /// Standard deviation of the stage-`k` endpoint noise: `D^(-k/2)`.
    pub fn noise_sigma(&self, stage: usize) -> f64 {
        (self.ratio as f64).powi(-(stage as i32)).sqrt()
    }
}

/// Build the coupled endpoints for `stage` from one hierarchy pair and one
/// *standard normal* draw shaped like `pair.fine` (scaled internally).
pub fn make_endpoints(
    pair: &HierarchyPair,
    stage: usize,
    schedule: &StageSchedule,
    noise: &PointCloud,
) -> Result<EndpointPair> {
    let (s, e) = schedule.interval(stage)?;
    let n_fine = schedule.level_points(stage)?;
    let n_coarse = schedule.level_points(stage + 1)?;
    if pair.ratio != schedule.ratio() {
        return Err(invalid_arg!(
            "pair ratio {} does not match schedule ratio {}",
            pair.ratio,
            schedule.ratio()
        ));
    }
    if pair.fine.n_points() != n_fine || pair.coarse.n_points() != n_coarse {
        return Err(invalid_arg!(
            "stage {stage} expects a {n_fine}/{n_coarse} pair, got {}/{}",
            pair.fine.n_points(),
            pair.coarse.n_points()
        ));
    }
    if noise.n_points() != n_fine {
        return Err(invalid_arg!(
            "noise must match the fine cloud ({n_fine} points), got {}",
            noise.n_points()
        ));
    }
    let sigma = schedule.noise_sigma(stage);
    let up = upsample_replicate(&pair.coarse, pair.ratio)?;
    let x_s = up.combine(s, noise, (1.0 - s) * sigma)?;
    let x_e = pair.fine.combine(e, noise, (1.0 - e) * sigma)?;
    Ok(EndpointPair { x_s, x_e, stage })
}

/// Linear interpolation between endpoints at local time `t` in `[0, 1]`.
pub fn lerp_endpoints(ep: &EndpointPair, t_local: f64) -> Result<PointCloud> {
    if !(0.0..=1.0).contains(&t_local) {
        return Err(invalid_arg!("local time {t_local} outside [0, 1]"));
    }
    ep.x_s.combine(1.0 - t_local, &ep.x_e, t_local)
}

/// Map a global time in `[s_k, e_k]` onto the interpolant.
pub fn interpolate(
    ep: &EndpointPair,
    t_global: f64,
    schedule: &StageSchedule,
) -> Result<InterpolantState> {
    let (s, e) = schedule.interval(ep.stage)?;
    if !(s..=e).contains(&t_global) {
        return Err(invalid_arg!(
            "global time {t_global} outside stage {} interval [{s}, {e}]",
            ep.stage
        ));
    }
    let t_local = (t_global - s) / (e - s);
    Ok(InterpolantState {
        x_t: lerp_endpoints(ep, t_local)?,
        t_local,
        t_global,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_hierarchy, DEFAULT_MAX_ITERS};
    use crate::seeds::rng_from;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn demo_schedule() -> StageSchedule {
        new_schedule(2, 4, vec![(0.6, 1.0), (0.0, 1.0)], 2048).unwrap()
    }

    fn random_cloud(seed: u64, n: usize) -> PointCloud {
        let mut rng = rng_from(seed);
        PointCloud::new(
            (0..n)
                .map(|_| std::array::from_fn(|_| rng.gen_range(-1.0f32..1.0)))
                .collect(),
        )
        .unwrap()
    }

    fn normal_cloud(seed: u64, n: usize) -> PointCloud {
        let mut rng = rng_from(seed);
        PointCloud::new(
            (0..n)
                .map(|_| std::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal) as f32))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn accepts_the_reference_layout() {
        let sched = demo_schedule();
        assert_eq!(sched.level_points(0).unwrap(), 2048);
        assert_eq!(sched.level_points(1).unwrap(), 512);
        assert_eq!(sched.level_points(2).unwrap(), 128);
        assert!(sched.level_points(3).is_err());
        assert_eq!(sched.noise_sigma(0), 1.0);
        assert!((sched.noise_sigma(1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn rejects_bridge_violating_intervals() {
        let err = new_schedule(2, 4, vec![(0.9, 1.0), (0.0, 0.5)], 2048).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("semi-definite"), "unhelpful message: {msg}");
    }

    #[test]
    fn rejects_malformed_intervals_and_sizes() {
        assert!(new_schedule(1, 4, vec![(0.0, 1.1)], 64).is_err());
        assert!(new_schedule(1, 4, vec![(-0.1, 1.0)], 64).is_err());
        assert!(new_schedule(1, 4, vec![(0.5, 0.5)], 64).is_err());
        assert!(new_schedule(2, 4, vec![(0.0, 1.0)], 64).is_err()); // count mismatch
        assert!(new_schedule(2, 4, vec![(0.6, 1.0), (0.0, 1.0)], 100).is_err()); // 100 % 16
        assert!(new_schedule(0, 4, vec![], 64).is_err());
        assert!(new_schedule(1, 1, vec![(0.0, 1.0)], 64).is_err());
        // Touching boundary s_0 == e_1 is allowed.
        assert!(new_schedule(2, 4, vec![(0.6, 1.0), (0.0, 0.6)], 64).is_ok());
    }

    #[test]
    fn endpoints_with_zero_noise_are_pure_scalings() {
        let sched = new_schedule(2, 2, vec![(0.6, 1.0), (0.0, 1.0)], 16).unwrap();
        let cloud = random_cloud(1, 16);
        let h = build_hierarchy(&cloud, 2, 2, DEFAULT_MAX_ITERS).unwrap();
        let pair = h.pair(0).unwrap();
        let zero = PointCloud::new(vec![[0.0; 3]; 16]).unwrap();
        let ep = make_endpoints(&pair, 0, &sched, &zero).unwrap();
        let up = upsample_replicate(&pair.coarse, 2).unwrap();
        for (a, b) in ep.x_s.iter().zip(up.iter()) {
            for axis in 0..3 {
                assert!((a[axis] as f64 - 0.6 * b[axis] as f64).abs() < 1e-6);
            }
        }
        // e_0 = 1 makes the data endpoint exact.
        assert_eq!(ep.x_e, pair.fine);
    }

    #[test]
    fn endpoint_difference_matches_target_identity() {
        // x_e - x_s must equal e*fine - s*Up(coarse) + (s - e)*sigma*noise.
        let sched = new_schedule(1, 4, vec![(0.3, 0.9)], 32).unwrap();
        let cloud = random_cloud(2, 32);
        let h = build_hierarchy(&cloud, 4, 1, DEFAULT_MAX_ITERS).unwrap();
        let pair = h.pair(0).unwrap();
        let noise = normal_cloud(3, 32);
        let ep = make_endpoints(&pair, 0, &sched, &noise).unwrap();
        let up = upsample_replicate(&pair.coarse, 4).unwrap();
        for i in 0..32 {
            for axis in 0..3 {
                let diff = ep.x_e.points()[i][axis] as f64 - ep.x_s.points()[i][axis] as f64;
                let want = 0.9 * pair.fine.points()[i][axis] as f64
                    - 0.3 * up.points()[i][axis] as f64
                    + (0.3 - 0.9) * noise.points()[i][axis] as f64; // sigma = 1 at stage 0
                assert!((diff - want).abs() < 1e-5, "row {i} axis {axis}");
            }
        }
    }

    #[test]
    fn endpoints_validate_resolutions() {
        let sched = demo_schedule();
        let cloud = random_cloud(4, 32);
        let h = build_hierarchy(&cloud, 4, 1, DEFAULT_MAX_ITERS).unwrap();
        let pair = h.pair(0).unwrap(); // 32/8 pair, wrong for a 2048-point schedule
        let noise = normal_cloud(5, 32);
        assert!(make_endpoints(&pair, 0, &sched, &noise).is_err());
    }

    #[test]
    fn interpolation_hits_endpoints_and_checks_range() {
        let sched = new_schedule(1, 2, vec![(0.2, 0.8)], 8).unwrap();
        let cloud = random_cloud(6, 8);
        let h = build_hierarchy(&cloud, 2, 1, DEFAULT_MAX_ITERS).unwrap();
        let noise = normal_cloud(7, 8);
        let ep = make_endpoints(&h.pair(0).unwrap(), 0, &sched, &noise).unwrap();

        let at_s = interpolate(&ep, 0.2, &sched).unwrap();
        assert_eq!(at_s.t_local, 0.0);
        assert_eq!(at_s.x_t, ep.x_s);
        let at_e = interpolate(&ep, 0.8, &sched).unwrap();
        assert_eq!(at_e.t_local, 1.0);
        assert_eq!(at_e.x_t, ep.x_e);

        let mid = interpolate(&ep, 0.5, &sched).unwrap();
        assert!((mid.t_local - 0.5).abs() < 1e-12);
        for i in 0..8 {
            for axis in 0..3 {
                let want = 0.5 * (ep.x_s.points()[i][axis] + ep.x_e.points()[i][axis]);
                assert!((mid.x_t.points()[i][axis] - want).abs() < 1e-6);
            }
        }
        assert!(interpolate(&ep, 0.1, &sched).is_err());
        assert!(interpolate(&ep, 0.9, &sched).is_err());
    }
}
