//! Point cloud container.
//!
//! Coordinates are 32-bit floats in row-major `[x, y, z]` rows, matching the
//! on-disk blob format. Heavier statistics (means, norms) accumulate in f64.

use crate::error::{invalid_arg, Result};

/// A finite, non-empty set of 3D points.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<[f32; 3]>,
}

impl PointCloud {
    /// Build a cloud, rejecting empty input and non-finite coordinates.
    pub fn new(points: Vec<[f32; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(invalid_arg!("point cloud must be non-empty"));
        }
        for (i, p) in points.iter().enumerate() {
            if !p.iter().all(|c| c.is_finite()) {
                return Err(invalid_arg!("point {i} has non-finite coordinates {p:?}"));
            }
        }
        Ok(PointCloud { points })
    }

    /// Construction path for internally generated data that is finite by
    /// construction (interpolants, noise draws, block means).
    pub(crate) fn from_rows(points: Vec<[f32; 3]>) -> Self {
        debug_assert!(!points.is_empty());
        PointCloud { points }
    }

    pub fn n_points(&self) -> usize {
        self.points.len()
    }

    pub fn points(&self) -> &[[f32; 3]] {
        &self.points
    }

    pub fn iter(&self) -> std::slice::Iter<'_, [f32; 3]> {
        self.points.iter()
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut acc = [0.0f64; 3];
        for p in &self.points {
            for c in 0..3 {
                acc[c] += p[c] as f64;
            }
        }
        let n = self.points.len() as f64;
        [acc[0] / n, acc[1] / n, acc[2] / n]
    }

    /// Largest Euclidean norm over points.
    pub fn max_norm(&self) -> f64 {
        self.points
            .iter()
            .map(|p| {
                let (x, y, z) = (p[0] as f64, p[1] as f64, p[2] as f64);
                (x * x + y * y + z * z).sqrt()
            })
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p.iter().all(|c| c.is_finite()))
    }

    /// Rows reordered so that row `i` of the result is row `order[i]` of
    /// `self`. `order` must be a permutation; callers uphold this.
    pub(crate) fn reordered(&self, order: &[usize]) -> Self {
        debug_assert_eq!(order.len(), self.points.len());
        PointCloud::from_rows(order.iter().map(|&i| self.points[i]).collect())
    }

    /// Element-wise `alpha * self + beta * other`; clouds must match in size.
    pub fn combine(&self, alpha: f64, other: &PointCloud, beta: f64) -> Result<PointCloud> {
        if self.n_points() != other.n_points() {
            return Err(invalid_arg!(
                "cloud size mismatch: {} vs {}",
                self.n_points(),
                other.n_points()
            ));
        }
        let rows = self
            .points
            .iter()
            .zip(other.points.iter())
            .map(|(a, b)| {
                [
                    (alpha * a[0] as f64 + beta * b[0] as f64) as f32,
                    (alpha * a[1] as f64 + beta * b[1] as f64) as f32,
                    (alpha * a[2] as f64 + beta * b[2] as f64) as f32,
                ]
            })
            .collect();
        Ok(PointCloud::from_rows(rows))
    }

    /// Draw `n` points with independent standard-normal coordinates.
    pub fn standard_normal<R: rand::Rng>(n: usize, rng: &mut R) -> PointCloud {
        debug_assert!(n > 0);
        let rows = (0..n)
            .map(|_| {
                std::array::from_fn(|_| {
                    let v: f64 = rng.sample(rand_distr::StandardNormal);
                    v as f32
                })
            })
            .collect();
        PointCloud::from_rows(rows)
    }

    pub fn scaled(&self, alpha: f64) -> PointCloud {
        PointCloud::from_rows(
            self.points
                .iter()
                .map(|p| {
                    [
                        (alpha * p[0] as f64) as f32,
                        (alpha * p[1] as f64) as f32,
                        (alpha * p[2] as f64) as f32,
                    ]
                })
                .collect(),
        )
    }
}

/// Squared Euclidean distance between two points, accumulated in f64.
pub(crate) fn dist2(a: &[f32; 3], b: &[f32; 3]) -> f64 {
    let dx = a[0] as f64 - b[0] as f64;
    let dy = a[1] as f64 - b[1] as f64;
    let dz = a[2] as f64 - b[2] as f64;
    dx * dx + dy * dy + dz * dz
}
