//! Geometry-preserving downsampling and the cluster hierarchy.
//!
//! A cloud of `N` points is reduced by a fixed ratio `D` via
//! equal-size clustering: farthest-point sampling seeds `N/D` centers, a
//! capacity-bounded greedy pass assigns exactly `D` points to each center,
//! and Lloyd-style refinement alternates assignment and mean updates. The
//! coarse cloud is the per-cluster means, and the fine cloud is reordered so
//! cluster `m` occupies rows `D*m .. D*(m+1)`. Upsampling is plain
//! replication, so cluster `m`'s replicated parent sits in the same rows —
//! the alignment every later stage (endpoints, bridge noise, lifting)
//! relies on.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::cloud::{dist2, PointCloud};
use crate::error::{invalid_arg, Error, Result};

/// Default cap on Lloyd refinement sweeps.
pub const DEFAULT_MAX_ITERS: usize = 25;

/// One level transition of the hierarchy: `fine` has `ratio` times the
/// points of `coarse`, stored cluster-contiguously, and `coarse` holds the
/// cluster means.
#[derive(Debug, Clone)]
pub struct HierarchyPair {
    pub fine: PointCloud,
    pub coarse: PointCloud,
    pub ratio: usize,
}

/// Full multi-level hierarchy: `levels[0]` is the (reordered) input and
/// `levels[k+1]` is `levels[k]` downsampled by `ratio`.
#[derive(Debug, Clone)]
pub struct Hierarchy {
    pub levels: Vec<PointCloud>,
    pub ratio: usize,
}

/// Refinement trace for one downsampling run.
#[derive(Debug, Clone)]
pub struct DownsampleStats {
    /// Assignment sweeps performed (at least one).
    pub iterations: usize,
    /// Sum of squared point-to-mean distances after each sweep;
    /// non-increasing by construction.
    pub objectives: Vec<f64>,
}

impl HierarchyPair {
    /// Check the structural contract: sizes match the ratio and every
    /// coarse row equals the mean of its fine block within `tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let n = self.fine.n_points();
        let m = self.coarse.n_points();
        if self.ratio < 2 {
            return Err(invalid_arg!("ratio must be >= 2, got {}", self.ratio));
        }
        if n != m * self.ratio {
            return Err(invalid_arg!(
                "fine size {n} != coarse size {m} * ratio {}",
                self.ratio
            ));
        }
        for (c_idx, c) in self.coarse.iter().enumerate() {
            let mean = block_mean(self.fine.points(), c_idx, self.ratio);
            for axis in 0..3 {
                let err = (c[axis] as f64 - mean[axis]).abs();
                if err > tol {
                    return Err(Error::InvalidState(format!(
                        "coarse row {c_idx} axis {axis} deviates from its block mean by {err:.3e}"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn block_mean(fine: &[[f32; 3]], block: usize, ratio: usize) -> [f64; 3] {
    let mut acc = [0.0f64; 3];
    for p in &fine[block * ratio..(block + 1) * ratio] {
        for axis in 0..3 {
            acc[axis] += p[axis] as f64;
        }
    }
    acc.map(|v| v / ratio as f64)
}

/// Farthest-point sampling: greedily pick `m` indices, each maximizing the
/// distance to the nearest already-selected point. Ties go to the lowest
/// index, so the result is deterministic. Runs in O(N * m).
pub fn farthest_point_sample(cloud: &PointCloud, m: usize, start: usize) -> Result<Vec<usize>> {
    let n = cloud.n_points();
    if m == 0 || m > n {
        return Err(invalid_arg!("cannot sample {m} points from a cloud of {n}"));
    }
    if start >= n {
        return Err(invalid_arg!("start index {start} out of range for {n} points"));
    }
    let pts = cloud.points();
    let mut selected = Vec::with_capacity(m);
    let mut min_d2 = vec![f64::INFINITY; n];
    let mut current = start;
    selected.push(current);
    for _ in 1..m {
        let cp = pts[current];
        let mut best = usize::MAX;
        let mut best_d2 = f64::NEG_INFINITY;
        for i in 0..n {
            let d = dist2(&pts[i], &cp);
            if d < min_d2[i] {
                min_d2[i] = d;
            }
            // Selected points have min_d2 zero and never win while any
            // unselected point remains; strict `>` keeps the lowest index
            // among ties.
            if !selected.contains(&i) && min_d2[i] > best_d2 {
                best_d2 = min_d2[i];
                best = i;
            }
        }
        current = best;
        selected.push(current);
    }
    Ok(selected)
}

/// Index of the lexicographically smallest coordinate triple — a
/// permutation-independent canonical start for FPS.
fn lexicographic_min_index(cloud: &PointCloud) -> usize {
    let pts = cloud.points();
    let mut best = 0;
    for i in 1..pts.len() {
        if lex_less(&pts[i], &pts[best]) {
            best = i;
        }
    }
    best
}

fn lex_less(a: &[f32; 3], b: &[f32; 3]) -> bool {
    for axis in 0..3 {
        match a[axis].total_cmp(&b[axis]) {
            std::cmp::Ordering::Less => return true,
            std::cmp::Ordering::Greater => return false,
            std::cmp::Ordering::Equal => {}
        }
    }
    false
}

/// Capacity-bounded greedy assignment: sort all (point, center) pairs by
/// squared distance (ties by point index, then center index) and accept a
/// pair when the point is unassigned and the center is below capacity.
/// Returns, per point, the index of its assigned center.
fn greedy_balanced_assign(pts: &[[f32; 3]], centers: &[[f64; 3]], capacity: usize) -> Vec<u32> {
    let n = pts.len();
    let m = centers.len();
    let mut pairs: Vec<(f64, u32, u32)> = Vec::with_capacity(n * m);
    for (i, p) in pts.iter().enumerate() {
        let (x, y, z) = (p[0] as f64, p[1] as f64, p[2] as f64);
        for (c, center) in centers.iter().enumerate() {
            let dx = x - center[0];
            let dy = y - center[1];
            let dz = z - center[2];
            pairs.push((dx * dx + dy * dy + dz * dz, i as u32, c as u32));
        }
    }
    pairs.sort_unstable_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then_with(|| a.1.cmp(&b.1))
            .then_with(|| a.2.cmp(&b.2))
    });
    let mut assign = vec![u32::MAX; n];
    let mut load = vec![0usize; m];
    let mut placed = 0usize;
    for &(_, i, c) in &pairs {
        let (i, c) = (i as usize, c as usize);
        if assign[i] == u32::MAX && load[c] < capacity {
            assign[i] = c as u32;
            load[c] += 1;
            placed += 1;
            if placed == n {
                break;
            }
        }
    }
    debug_assert!(assign.iter().all(|&a| a != u32::MAX));
    assign
}

fn cluster_means(pts: &[[f32; 3]], assign: &[u32], m: usize, capacity: usize) -> Vec<[f64; 3]> {
    let mut acc = vec![[0.0f64; 3]; m];
    for (p, &a) in pts.iter().zip(assign) {
        let a = a as usize;
        for axis in 0..3 {
            acc[a][axis] += p[axis] as f64;
        }
    }
    for c in &mut acc {
        for axis in 0..3 {
            c[axis] /= capacity as f64;
        }
    }
    acc
}

fn sse(pts: &[[f32; 3]], assign: &[u32], centers: &[[f64; 3]]) -> f64 {
    let mut total = 0.0;
    for (p, &a) in pts.iter().zip(assign) {
        let c = &centers[a as usize];
        let dx = p[0] as f64 - c[0];
        let dy = p[1] as f64 - c[1];
        let dz = p[2] as f64 - c[2];
        total += dx * dx + dy * dy + dz * dz;
    }
    total
}

/// Downsample by equal-size clustering. See the module docs for the
/// algorithm; `max_iters` bounds the refinement sweeps (use
/// [`DEFAULT_MAX_ITERS`] when unsure).
pub fn downsample(cloud: &PointCloud, d: usize, max_iters: usize) -> Result<HierarchyPair> {
    downsample_with_stats(cloud, d, max_iters).map(|(pair, _, _)| pair)
}

/// Cap on enumerated partitions for the exact small-input path.
const EXACT_ENUMERATION_CAP: u64 = 2048;

/// Number of ways to partition `n` items into unordered groups of `d`
/// (product of binomials, anchoring each group at its smallest free index),
/// or `None` once it exceeds [`EXACT_ENUMERATION_CAP`].
fn balanced_partition_count(n: usize, d: usize) -> Option<u64> {
    let mut count: u64 = 1;
    let mut r = n;
    while r > 0 {
        let mut choose: u64 = 1;
        for i in 0..(d - 1) {
            choose = choose.checked_mul((r - 1 - i) as u64)? / (i as u64 + 1);
        }
        count = count.checked_mul(choose)?;
        if count > EXACT_ENUMERATION_CAP {
            return None;
        }
        r -= d;
    }
    Some(count)
}

/// Exact minimum-SSE balanced partition by pruned enumeration. Inputs small
/// enough for this path get the global optimum; larger ones return `None`
/// and fall back to the iterative solver.
fn exact_small_assign(pts: &[[f32; 3]], d: usize) -> Option<Vec<u32>> {
    balanced_partition_count(pts.len(), d)?;

    fn group_cost(pts: &[[f32; 3]], group: &[usize]) -> f64 {
        let mut mean = [0.0f64; 3];
        for &i in group {
            for a in 0..3 {
                mean[a] += pts[i][a] as f64;
            }
        }
        for m in &mut mean {
            *m /= group.len() as f64;
        }
        let mut cost = 0.0;
        for &i in group {
            for a in 0..3 {
                let diff = pts[i][a] as f64 - mean[a];
                cost += diff * diff;
            }
        }
        cost
    }

    struct Search<'a> {
        pts: &'a [[f32; 3]],
        d: usize,
        assign: Vec<u32>,
        best: f64,
        best_assign: Vec<u32>,
    }

    impl Search<'_> {
        /// Assign cluster `cluster` (anchored at the lowest free index) and
        /// recurse; `acc` carries the cost of the clusters placed so far.
        fn place(&mut self, cluster: u32, acc: f64) {
            if acc >= self.best {
                return;
            }
            let Some(anchor) = self.assign.iter().position(|&a| a == u32::MAX) else {
                self.best = acc;
                self.best_assign = self.assign.clone();
                return;
            };
            let free: Vec<usize> = (anchor + 1..self.pts.len())
                .filter(|&i| self.assign[i] == u32::MAX)
                .collect();
            let mut group = vec![anchor; self.d];
            self.choose_mates(cluster, acc, &free, 0, &mut group, 1);
        }

        fn choose_mates(
            &mut self,
            cluster: u32,
            acc: f64,
            free: &[usize],
            start: usize,
            group: &mut Vec<usize>,
            slot: usize,
        ) {
            if slot == self.d {
                let cost = group_cost(self.pts, group);
                for &i in group.iter() {
                    self.assign[i] = cluster;
                }
                self.place(cluster + 1, acc + cost);
                for &i in group.iter() {
                    self.assign[i] = u32::MAX;
                }
                return;
            }
            for pick in start..free.len() {
                group[slot] = free[pick];
                self.choose_mates(cluster, acc, free, pick + 1, group, slot + 1);
            }
        }
    }

    let mut search = Search {
        pts,
        d,
        assign: vec![u32::MAX; pts.len()],
        best: f64::INFINITY,
        best_assign: vec![0; pts.len()],
    };
    search.place(0, 0.0);
    Some(search.best_assign)
}

/// As [`downsample`], also returning the refinement trace and the row
/// permutation (`order[new_row] = old_row`) applied to the fine cloud.
pub fn downsample_with_stats(
    cloud: &PointCloud,
    d: usize,
    max_iters: usize,
) -> Result<(HierarchyPair, DownsampleStats, Vec<usize>)> {
    let n = cloud.n_points();
    if d < 2 {
        return Err(invalid_arg!("downsample ratio must be >= 2, got {d}"));
    }
    if n % d != 0 {
        return Err(invalid_arg!("{n} points not divisible by ratio {d}"));
    }
    if max_iters == 0 {
        return Err(invalid_arg!("max_iters must be positive"));
    }
    let m = n / d;
    let pts = cloud.points();

    // Inputs with only a handful of balanced partitions are solved exactly;
    // the iterative solver below is a local search and can lose a few
    // percent to the optimum exactly where enumeration is free.
    if let Some(assign) = exact_small_assign(pts, d) {
        let centers = cluster_means(pts, &assign, m, d);
        let objective = sse(pts, &assign, &centers);
        let (pair, order) = assemble(pts, &assign, &centers, d);
        let stats = DownsampleStats {
            iterations: 1,
            objectives: vec![objective],
        };
        return Ok((pair, stats, order));
    }

    let start = lexicographic_min_index(cloud);
    let seeds = farthest_point_sample(cloud, m, start)?;
    let mut centers: Vec<[f64; 3]> = seeds
        .iter()
        .map(|&i| [pts[i][0] as f64, pts[i][1] as f64, pts[i][2] as f64])
        .collect();

    let mut assign = greedy_balanced_assign(pts, &centers, d);
    centers = cluster_means(pts, &assign, m, d);
    let mut objective = sse(pts, &assign, &centers);
    let mut objectives = vec![objective];

    for _ in 1..max_iters {
        let next = greedy_balanced_assign(pts, &centers, d);
        if next == assign {
            break; // converged
        }
        let next_centers = cluster_means(pts, &next, m, d);
        let next_objective = sse(pts, &next, &next_centers);
        if next_objective > objective {
            break; // keep the better incumbent
        }
        assign = next;
        centers = next_centers;
        objective = next_objective;
        objectives.push(objective);
    }

    let (pair, order) = assemble(pts, &assign, &centers, d);
    let stats = DownsampleStats {
        iterations: objectives.len(),
        objectives,
    };
    Ok((pair, stats, order))
}

/// Reorder points cluster-contiguously (members keep ascending original
/// index within a cluster) and emit the means as the coarse cloud.
fn assemble(
    pts: &[[f32; 3]],
    assign: &[u32],
    centers: &[[f64; 3]],
    d: usize,
) -> (HierarchyPair, Vec<usize>) {
    let m = centers.len();
    let mut order = Vec::with_capacity(pts.len());
    for c in 0..m as u32 {
        for (i, &a) in assign.iter().enumerate() {
            if a == c {
                order.push(i);
            }
        }
    }
    let fine = PointCloud::from_rows(order.iter().map(|&i| pts[i]).collect());
    let coarse = PointCloud::from_rows(
        centers
            .iter()
            .map(|c| [c[0] as f32, c[1] as f32, c[2] as f32])
            .collect(),
    );
    (
        HierarchyPair {
            fine,
            coarse,
            ratio: d,
        },
        order,
    )
}

/// Ablation baseline: group points by a random permutation instead of by
/// proximity, then average each group. Structurally a valid hierarchy pair,
/// geometrically meaningless on purpose.
pub fn downsample_random_pair<R: Rng>(
    cloud: &PointCloud,
    d: usize,
    rng: &mut R,
) -> Result<HierarchyPair> {
    let n = cloud.n_points();
    if d < 2 {
        return Err(invalid_arg!("downsample ratio must be >= 2, got {d}"));
    }
    if n % d != 0 {
        return Err(invalid_arg!("{n} points not divisible by ratio {d}"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let fine = cloud.reordered(&order);
    let m = n / d;
    let coarse = PointCloud::from_rows(
        (0..m)
            .map(|b| block_mean(fine.points(), b, d).map(|v| v as f32))
            .collect(),
    );
    Ok(HierarchyPair {
        fine,
        coarse,
        ratio: d,
    })
}

/// Replicate each point `d` times: row `i` of the input fills rows
/// `d*i .. d*(i+1)` of the output.
pub fn upsample_replicate(cloud: &PointCloud, d: usize) -> Result<PointCloud> {
    if d == 0 {
        return Err(invalid_arg!("upsample ratio must be positive"));
    }
    let mut rows = Vec::with_capacity(cloud.n_points() * d);
    for p in cloud.iter() {
        for _ in 0..d {
            rows.push(*p);
        }
    }
    Ok(PointCloud::from_rows(rows))
}

/// Build `k_levels` downsampling steps, producing `k_levels + 1` clouds.
/// Reorderings at coarse levels are propagated down in blocks so that every
/// level stays cluster-contiguous relative to its parent.
pub fn build_hierarchy(
    cloud: &PointCloud,
    d: usize,
    k_levels: usize,
    max_iters: usize,
) -> Result<Hierarchy> {
    let n = cloud.n_points();
    if k_levels == 0 {
        return Err(invalid_arg!("hierarchy needs at least one level"));
    }
    let stride = (d as u64)
        .checked_pow(k_levels as u32)
        .ok_or_else(|| invalid_arg!("ratio {d}^{k_levels} overflows"))?;
    if stride == 0 || (n as u64) % stride != 0 {
        return Err(invalid_arg!(
            "{n} points not divisible by {d}^{k_levels} = {stride}"
        ));
    }

    let mut levels = vec![cloud.clone()];
    for k in 0..k_levels {
        let (pair, _, order) = downsample_with_stats(&levels[k], d, max_iters)?;
        levels[k] = pair.fine;
        // Reordering level k moves its rows; finer levels hold d^(k-j)
        // rows per level-k row and must move in the same block pattern.
        for j in 0..k {
            let block = d.pow((k - j) as u32);
            levels[j] = permute_blocks(&levels[j], &order, block);
        }
        levels.push(pair.coarse);
    }
    Ok(Hierarchy { levels, ratio: d })
}

fn permute_blocks(cloud: &PointCloud, order: &[usize], block: usize) -> PointCloud {
    let pts = cloud.points();
    let mut rows = Vec::with_capacity(pts.len());
    for &src in order {
        rows.extend_from_slice(&pts[src * block..(src + 1) * block]);
    }
    PointCloud::from_rows(rows)
}

impl Hierarchy {
    /// The pair (fine = level `k`, coarse = level `k+1`).
    pub fn pair(&self, k: usize) -> Result<HierarchyPair> {
        if k + 1 >= self.levels.len() {
            return Err(invalid_arg!(
                "level {k} has no coarser neighbor in a {}-level hierarchy",
                self.levels.len()
            ));
        }
        Ok(HierarchyPair {
            fine: self.levels[k].clone(),
            coarse: self.levels[k + 1].clone(),
            ratio: self.ratio,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::rng_from;
    use rand::Rng;

    fn random_cloud<R: Rng>(rng: &mut R, n: usize) -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn fps_unit_square_picks_opposite_corner() {
        let c = PointCloud::new(vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [1.0, 1.0, 0.0],
        ])
        .unwrap();
        assert_eq!(farthest_point_sample(&c, 2, 0).unwrap(), vec![0, 3]);
    }

    #[test]
    fn fps_collinear_picks_far_end() {
        let c = PointCloud::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]]).unwrap();
        assert_eq!(farthest_point_sample(&c, 2, 0).unwrap(), vec![0, 2]);
    }

    #[test]
    fn fps_validates_arguments() {
        let c = PointCloud::new(vec![[0.0; 3], [1.0; 3]]).unwrap();
        assert!(farthest_point_sample(&c, 3, 0).is_err());
        assert!(farthest_point_sample(&c, 0, 0).is_err());
        assert!(farthest_point_sample(&c, 1, 2).is_err());
    }

    #[test]
    fn fps_handles_duplicate_points() {
        let c = PointCloud::new(vec![[1.0; 3]; 6]).unwrap();
        let picks = farthest_point_sample(&c, 4, 0).unwrap();
        let mut sorted = picks.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 4, "indices must be distinct: {picks:?}");
    }

    #[test]
    fn downsample_two_well_separated_pairs() {
        let c = PointCloud::new(vec![
            [0.0, 0.0, 0.0],
            [0.1, 0.0, 0.0],
            [10.0, 0.0, 0.0],
            [10.1, 0.0, 0.0],
        ])
        .unwrap();
        let pair = downsample(&c, 2, DEFAULT_MAX_ITERS).unwrap();
        let mut coarse: Vec<[f32; 3]> = pair.coarse.points().to_vec();
        coarse.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert!((coarse[0][0] - 0.05).abs() < 1e-6);
        assert!((coarse[1][0] - 10.05).abs() < 1e-6);
        // Cluster-contiguity: each fine block is one of the input pairs.
        for b in 0..2 {
            let xs: Vec<f32> = pair.fine.points()[2 * b..2 * b + 2].iter().map(|p| p[0]).collect();
            assert!((xs[0] - xs[1]).abs() < 0.2, "block {b} mixes far points: {xs:?}");
        }
        pair.validate(1e-6).unwrap();
    }

    #[test]
    fn downsample_rejects_bad_arguments() {
        let c = PointCloud::new(vec![[0.0; 3]; 6]).unwrap();
        assert!(downsample(&c, 4, 25).is_err()); // 6 % 4 != 0
        assert!(downsample(&c, 1, 25).is_err());
        assert!(downsample(&c, 2, 0).is_err());
    }

    #[test]
    fn downsample_identical_points_is_degenerate_but_valid() {
        let c = PointCloud::new(vec![[0.5, -0.5, 1.0]; 8]).unwrap();
        let pair = downsample(&c, 2, DEFAULT_MAX_ITERS).unwrap();
        pair.validate(1e-6).unwrap();
        for p in pair.coarse.iter() {
            assert_eq!(*p, [0.5, -0.5, 1.0]);
        }
    }

    #[test]
    fn downsample_balances_and_descends_on_random_clouds() {
        let mut rng = rng_from(0x9e0_1);
        for trial in 0..60 {
            let d = if trial % 2 == 0 { 2 } else { 4 };
            let m = rng.gen_range(2..=24);
            let c = random_cloud(&mut rng, d * m);
            let (pair, stats, order) = downsample_with_stats(&c, d, DEFAULT_MAX_ITERS).unwrap();
            pair.validate(1e-6).unwrap();
            // order is a permutation
            let mut sorted = order.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..c.n_points()).collect::<Vec<_>>());
            // objective trace never increases
            for w in stats.objectives.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "objective rose: {:?}", stats.objectives);
            }
        }
    }

    /// Independent enumeration of all balanced partitions, tracking only the
    /// best objective value.
    fn enumerate_best_objective(pts: &[[f32; 3]], d: usize) -> f64 {
        fn cost(pts: &[[f32; 3]], group: &[usize]) -> f64 {
            let mut mean = [0.0f64; 3];
            for &i in group {
                for a in 0..3 {
                    mean[a] += pts[i][a] as f64;
                }
            }
            for m in &mut mean {
                *m /= group.len() as f64;
            }
            group
                .iter()
                .map(|&i| {
                    (0..3)
                        .map(|a| (pts[i][a] as f64 - mean[a]).powi(2))
                        .sum::<f64>()
                })
                .sum()
        }
        fn walk(pts: &[[f32; 3]], d: usize, left: &[usize], acc: f64, best: &mut f64) {
            if left.is_empty() {
                *best = best.min(acc);
                return;
            }
            let anchor = left[0];
            let rest = &left[1..];
            let mut picks = vec![0usize; d - 1];
            fn pick_loop(
                pts: &[[f32; 3]],
                d: usize,
                rest: &[usize],
                anchor: usize,
                picks: &mut Vec<usize>,
                slot: usize,
                from: usize,
                acc: f64,
                best: &mut f64,
            ) {
                if slot == picks.len() {
                    let mut group = vec![anchor];
                    group.extend(picks.iter().map(|&p| rest[p]));
                    let c = cost(pts, &group);
                    let next: Vec<usize> = rest
                        .iter()
                        .enumerate()
                        .filter(|(idx, _)| !picks.contains(idx))
                        .map(|(_, &v)| v)
                        .collect();
                    walk(pts, d, &next, acc + c, best);
                    return;
                }
                for p in from..rest.len() {
                    picks[slot] = p;
                    pick_loop(pts, d, rest, anchor, picks, slot + 1, p + 1, acc, best);
                }
            }
            pick_loop(pts, d, rest, anchor, &mut picks, 0, 0, acc, best);
        }
        let all: Vec<usize> = (0..pts.len()).collect();
        let mut best = f64::INFINITY;
        walk(pts, d, &all, 0.0, &mut best);
        best
    }

    #[test]
    fn small_instances_reach_the_enumerated_optimum() {
        let mut rng = rng_from(0x9e0_7);
        for &(n, d) in &[(4usize, 2usize), (6, 2), (8, 2), (8, 4), (10, 2), (6, 3)] {
            for _ in 0..20 {
                let c = random_cloud(&mut rng, n);
                let (pair, stats, _) = downsample_with_stats(&c, d, DEFAULT_MAX_ITERS).unwrap();
                pair.validate(1e-6).unwrap();
                let got = *stats.objectives.last().unwrap();
                let best = enumerate_best_objective(c.points(), d);
                assert!(
                    (got - best).abs() <= 1e-9 + 1e-9 * best.abs(),
                    "n={n} d={d}: got {got}, optimum {best}"
                );
            }
        }
    }

    #[test]
    fn downsample_commutes_with_permutation_on_random_clouds() {
        let mut rng = rng_from(0x9e0_2);
        for _ in 0..25 {
            let c = random_cloud(&mut rng, 48);
            let mut perm: Vec<usize> = (0..48).collect();
            perm.shuffle(&mut rng);
            let shuffled = c.reordered(&perm);

            let a = downsample(&c, 4, DEFAULT_MAX_ITERS).unwrap();
            let b = downsample(&shuffled, 4, DEFAULT_MAX_ITERS).unwrap();
            assert_eq!(cluster_signature(&a), cluster_signature(&b));
        }
    }

    /// Canonical form of a clustering: per cluster, the sorted member
    /// coordinates (rounded to tolerate summation-order noise), sorted.
    fn cluster_signature(pair: &HierarchyPair) -> Vec<Vec<[i64; 3]>> {
        let quant = |p: &[f32; 3]| {
            [
                (p[0] as f64 * 1e6).round() as i64,
                (p[1] as f64 * 1e6).round() as i64,
                (p[2] as f64 * 1e6).round() as i64,
            ]
        };
        let d = pair.ratio;
        let mut clusters: Vec<Vec<[i64; 3]>> = (0..pair.coarse.n_points())
            .map(|b| {
                let mut members: Vec<[i64; 3]> =
                    pair.fine.points()[b * d..(b + 1) * d].iter().map(|p| quant(p)).collect();
                members.sort_unstable();
                members
            })
            .collect();
        clusters.sort_unstable();
        clusters
    }

    #[test]
    fn upsample_replicates_rows_in_place() {
        let c = PointCloud::new(vec![[1.0, 2.0, 3.0]]).unwrap();
        let up = upsample_replicate(&c, 3).unwrap();
        assert_eq!(up.points(), &[[1.0, 2.0, 3.0]; 3]);
        let pair = PointCloud::new(vec![[0.0; 3], [1.0; 3]]).unwrap();
        let up2 = upsample_replicate(&pair, 2).unwrap();
        assert_eq!(up2.points()[0], [0.0; 3]);
        assert_eq!(up2.points()[1], [0.0; 3]);
        assert_eq!(up2.points()[2], [1.0; 3]);
    }

    #[test]
    fn hierarchy_sixteen_to_one() {
        let mut rng = rng_from(0x9e0_3);
        let c = random_cloud(&mut rng, 16);
        let h = build_hierarchy(&c, 4, 2, DEFAULT_MAX_ITERS).unwrap();
        assert_eq!(h.levels.len(), 3);
        assert_eq!(h.levels[0].n_points(), 16);
        assert_eq!(h.levels[1].n_points(), 4);
        assert_eq!(h.levels[2].n_points(), 1);
        let top = h.levels[2].points()[0];
        let centroid = c.centroid();
        for axis in 0..3 {
            assert!((top[axis] as f64 - centroid[axis]).abs() < 1e-6);
        }
        // Every adjacent pair satisfies the mean contract, including the
        // propagated level-0 reordering.
        for k in 0..2 {
            h.pair(k).unwrap().validate(1e-6).unwrap();
        }
    }

    #[test]
    fn hierarchy_rejects_indivisible_sizes() {
        let mut rng = rng_from(0x9e0_4);
        let c = random_cloud(&mut rng, 20);
        assert!(build_hierarchy(&c, 4, 2, DEFAULT_MAX_ITERS).is_err()); // 20 % 16 != 0
    }

    #[test]
    fn random_pair_baseline_is_structurally_valid() {
        let mut rng = rng_from(0x9e0_5);
        let c = random_cloud(&mut rng, 32);
        let pair = downsample_random_pair(&c, 4, &mut rng).unwrap();
        pair.validate(1e-6).unwrap();
        // Fine is a permutation of the input.
        let mut a: Vec<[u32; 3]> = c.iter().map(|p| p.map(f32::to_bits)).collect();
        let mut b: Vec<[u32; 3]> = pair.fine.iter().map(|p| p.map(f32::to_bits)).collect();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
    }
}
