//! Point-set distances and the 1-NN two-sample test.
//!
//! - Chamfer: symmetric sum of mean squared nearest-neighbor distances
//!   (each direction averaged over its own cloud, then summed).
//! - EMD: mean Euclidean length of a minimum-cost perfect matching; exact
//!   via assignment up to [`EMD_EXACT_LIMIT`] points, auction-approximate
//!   (with declared bound) above.
//! - 1-NNA: leave-one-out nearest-neighbor accuracy over the union of a
//!   generated and a reference set. Indistinguishable sets score near 50%;
//!   memorized/identical sets score 0% (every sample's nearest neighbor is
//!   its own copy in the other set); disjoint sets score near 100%.

use rayon::prelude::*;

use crate::assignment::{solve_auction, solve_exact, CostMatrix};
use crate::cloud::{dist2, PointCloud};
use crate::error::{invalid_arg, Result};

/// Largest cloud size solved exactly by the assignment step of EMD.
pub const EMD_EXACT_LIMIT: usize = 1024;

/// How an EMD value was obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EmdMode {
    Exact,
    /// Auction with this bidding increment; the mean matched distance is
    /// within `eps` of optimal.
    Auction { eps: f64 },
}

/// Which cloud-to-cloud distance drives a set-level metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudMetric {
    Chamfer,
    Emd,
}

/// Chamfer distance. Cloud sizes may differ.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> f64 {
    directed_mean_sq(a, b) + directed_mean_sq(b, a)
}

fn directed_mean_sq(from: &PointCloud, to: &PointCloud) -> f64 {
    let total: f64 = from
        .iter()
        .map(|p| {
            to.iter()
                .map(|q| dist2(p, q))
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    total / from.n_points() as f64
}

/// Earth mover's distance between equal-size clouds.
pub fn emd(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    emd_detailed(a, b).map(|(value, _)| value)
}

/// As [`emd`], also reporting whether the matching was exact or
/// auction-approximate.
pub fn emd_detailed(a: &PointCloud, b: &PointCloud) -> Result<(f64, EmdMode)> {
    let n = a.n_points();
    if n != b.n_points() {
        return Err(invalid_arg!(
            "EMD requires equal point counts, got {} vs {}",
            n,
            b.n_points()
        ));
    }
    let mut costs = Vec::with_capacity(n * n);
    let mut max_cost = 0.0f64;
    for p in a.iter() {
        for q in b.iter() {
            let c = dist2(p, q).sqrt();
            if c > max_cost {
                max_cost = c;
            }
            costs.push(c);
        }
    }
    let matrix = CostMatrix::new(n, costs)?;
    if n <= EMD_EXACT_LIMIT {
        let (_, total) = solve_exact(&matrix);
        Ok((total / n as f64, EmdMode::Exact))
    } else {
        // Total auction slack is n * eps_bid, i.e. eps_bid on the mean.
        let eps = (max_cost * 1e-3).max(1e-9);
        let (_, total) = solve_auction(&matrix, eps)?;
        Ok((total / n as f64, EmdMode::Auction { eps }))
    }
}

fn cloud_distance(a: &PointCloud, b: &PointCloud, metric: CloudMetric) -> Result<f64> {
    match metric {
        CloudMetric::Chamfer => Ok(chamfer(a, b)),
        CloudMetric::Emd => emd(a, b),
    }
}

/// Leave-one-out 1-NN accuracy (percent) of a nearest-neighbor classifier
/// separating `generated` from `reference`. Ties resolve to the lowest
/// union index (generated block first).
pub fn one_nna(
    generated: &[PointCloud],
    reference: &[PointCloud],
    metric: CloudMetric,
) -> Result<f64> {
    if generated.is_empty() || reference.is_empty() {
        return Err(invalid_arg!("1-NNA needs non-empty generated and reference sets"));
    }
    let union: Vec<&PointCloud> = generated.iter().chain(reference.iter()).collect();
    let n = union.len();
    if n < 2 {
        return Err(invalid_arg!("1-NNA needs at least two clouds"));
    }
    // Symmetric distance matrix over the union, upper triangle in parallel.
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .collect();
    let dists: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| cloud_distance(union[i], union[j], metric))
        .collect::<Result<_>>()?;
    let mut matrix = vec![f64::INFINITY; n * n];
    for (&(i, j), &d) in pairs.iter().zip(dists.iter()) {
        matrix[i * n + j] = d;
        matrix[j * n + i] = d;
    }

    let n_gen = generated.len();
    let mut correct = 0usize;
    for i in 0..n {
        let row = &matrix[i * n..(i + 1) * n];
        let mut nearest = usize::MAX;
        let mut best = f64::INFINITY;
        for (j, &d) in row.iter().enumerate() {
            if j != i && d < best {
                best = d;
                nearest = j;
            }
        }
        let same_side = (i < n_gen) == (nearest < n_gen);
        if same_side {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / n as f64)
}
