//! Exact and approximate solvers for the linear assignment problem.
//!
//! `solve_exact` is the shortest-augmenting-path method with dual
//! potentials in the style of Jonker & Volgenant (1987): one Dijkstra-like
//! sweep per row over reduced costs, then a dual update and augmentation.
//! O(n^3) worst case, fast in practice on geometric costs, and exact for
//! arbitrary finite float matrices.
//!
//! `solve_auction` is a forward auction (Bertsekas) with a fixed bidding
//! increment `eps`; its total cost is within `n * eps` of optimal. It backs
//! the approximate mode for very large matchings where exact solves get
//! slow.

use crate::error::{invalid_arg, Result};

/// Dense square cost matrix, row-major.
pub struct CostMatrix {
    pub n: usize,
    pub costs: Vec<f64>,
}

impl CostMatrix {
    pub fn new(n: usize, costs: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(invalid_arg!("assignment needs at least one row"));
        }
        if costs.len() != n * n {
            return Err(invalid_arg!(
                "cost matrix must hold {n}*{n} entries, got {}",
                costs.len()
            ));
        }
        if !costs.iter().all(|c| c.is_finite()) {
            return Err(invalid_arg!("cost matrix contains non-finite entries"));
        }
        Ok(CostMatrix { n, costs })
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.costs[i * self.n + j]
    }
}

/// Minimum-cost perfect matching. Returns (row -> column, total cost).
pub fn solve_exact(cost: &CostMatrix) -> (Vec<usize>, f64) {
    let n = cost.n;
    let mut u = vec![0.0f64; n]; // row potentials
    let mut v = vec![0.0f64; n]; // column potentials
    let mut col4row = vec![usize::MAX; n];
    let mut row4col = vec![usize::MAX; n];

    let mut shortest = vec![0.0f64; n];
    let mut path = vec![usize::MAX; n];
    let mut in_rows = vec![false; n];
    let mut in_cols = vec![false; n];
    let mut remaining: Vec<usize> = Vec::with_capacity(n);

    for cur_row in 0..n {
        shortest.iter_mut().for_each(|s| *s = f64::INFINITY);
        in_rows.iter_mut().for_each(|b| *b = false);
        in_cols.iter_mut().for_each(|b| *b = false);
        remaining.clear();
        remaining.extend(0..n);

        let mut min_val = 0.0f64;
        let mut i = cur_row;
        let mut sink = usize::MAX;
        while sink == usize::MAX {
            in_rows[i] = true;
            let mut lowest = f64::INFINITY;
            let mut index = usize::MAX;
            for (pos, &j) in remaining.iter().enumerate() {
                let r = min_val + cost.at(i, j) - u[i] - v[j];
                if r < shortest[j] {
                    path[j] = i;
                    shortest[j] = r;
                }
                // Prefer an unassigned column on ties so augmentation can
                // finish one step earlier.
                if shortest[j] < lowest
                    || (shortest[j] == lowest && row4col[j] == usize::MAX)
                {
                    lowest = shortest[j];
                    index = pos;
                }
            }
            debug_assert!(lowest.is_finite(), "augmenting path stalled");
            min_val = lowest;
            let j = remaining[index];
            if row4col[j] == usize::MAX {
                sink = j;
            } else {
                i = row4col[j];
            }
            in_cols[j] = true;
            remaining.swap_remove(index);
        }

        u[cur_row] += min_val;
        for r in 0..n {
            if in_rows[r] && r != cur_row {
                u[r] += min_val - shortest[col4row[r]];
            }
        }
        for (j, &inc) in in_cols.iter().enumerate() {
            if inc {
                v[j] -= min_val - shortest[j];
            }
        }

        let mut j = sink;
        loop {
            let i = path[j];
            row4col[j] = i;
            std::mem::swap(&mut col4row[i], &mut j);
            if i == cur_row {
                break;
            }
        }
    }

    let total = (0..n).map(|i| cost.at(i, col4row[i])).sum();
    (col4row, total)
}

/// Forward auction with bidding increment `eps > 0`; returned total cost is
/// at most `n * eps` above optimal.
pub fn solve_auction(cost: &CostMatrix, eps: f64) -> Result<(Vec<usize>, f64)> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(invalid_arg!("auction increment must be positive, got {eps}"));
    }
    let n = cost.n;
    let mut price = vec![0.0f64; n];
    let mut col4row = vec![usize::MAX; n];
    let mut row4col = vec![usize::MAX; n];
    let mut unassigned: Vec<usize> = (0..n).collect();

    while let Some(i) = unassigned.pop() {
        // Benefit of column j to row i is -cost; find best and runner-up.
        let mut best_j = 0;
        let mut best = f64::NEG_INFINITY;
        let mut second = f64::NEG_INFINITY;
        for j in 0..n {
            let value = -cost.at(i, j) - price[j];
            if value > best {
                second = best;
                best = value;
                best_j = j;
            } else if value > second {
                second = value;
            }
        }
        let raise = if second.is_finite() { best - second } else { 0.0 };
        price[best_j] += raise + eps;
        if row4col[best_j] != usize::MAX {
            let evicted = row4col[best_j];
            col4row[evicted] = usize::MAX;
            unassigned.push(evicted);
        }
        row4col[best_j] = i;
        col4row[i] = best_j;
    }

    let total = (0..n).map(|i| cost.at(i, col4row[i])).sum();
    Ok((col4row, total))
}
