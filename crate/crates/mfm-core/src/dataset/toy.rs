//! Synthetic shape corpus for desk-scale experiments.
//!
//! Four shapes with closed-form uniform surface samplers. Each generated
//! cloud gets a mild random rigid rotation (up to 15 degrees) and an
//! isotropic scale jitter of ±10%, so a corpus has pose variety without
//! losing its identity.

use std::str::FromStr;

use rand::Rng;

use crate::cloud::PointCloud;
use crate::error::{invalid_arg, Error, Result};

/// Shape families available to `toy_shapes`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyKind {
    /// Unit sphere surface.
    Sphere,
    /// Torus with ring radius 1 and tube radius 0.3.
    Torus,
    /// Two axis-aligned cube surfaces (half-side 0.25) centered at x = ±0.75.
    TwoBoxes,
    /// Unit circle in the z = 0 plane; a deliberately degenerate planar case.
    Ring2d,
}

impl ToyKind {
    pub const ALL: [ToyKind; 4] = [
        ToyKind::Sphere,
        ToyKind::Torus,
        ToyKind::TwoBoxes,
        ToyKind::Ring2d,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ToyKind::Sphere => "sphere",
            ToyKind::Torus => "torus",
            ToyKind::TwoBoxes => "two_boxes",
            ToyKind::Ring2d => "ring2d",
        }
    }
}

impl FromStr for ToyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<ToyKind> {
        match s {
            "sphere" => Ok(ToyKind::Sphere),
            "torus" => Ok(ToyKind::Torus),
            "two_boxes" => Ok(ToyKind::TwoBoxes),
            "ring2d" => Ok(ToyKind::Ring2d),
            other => Err(invalid_arg!(
                "unknown toy shape `{other}` (expected sphere, torus, two_boxes, or ring2d)"
            )),
        }
    }
}

const TORUS_RING: f64 = 1.0;
const TORUS_TUBE: f64 = 0.3;
const BOX_CENTER_X: f64 = 0.75;
const BOX_HALF_SIDE: f64 = 0.25;
const MAX_TILT_DEGREES: f64 = 15.0;

/// Generate `count` clouds of `n_points` each from one shape family.
pub fn toy_shapes<R: Rng>(
    kind: ToyKind,
    n_points: usize,
    count: usize,
    rng: &mut R,
) -> Result<Vec<PointCloud>> {
    if n_points == 0 {
        return Err(invalid_arg!("n_points must be positive"));
    }
    if count == 0 {
        return Err(invalid_arg!("count must be positive"));
    }
    let mut clouds = Vec::with_capacity(count);
    for _ in 0..count {
        let mut rows = Vec::with_capacity(n_points);
        for i in 0..n_points {
            rows.push(match kind {
                ToyKind::Sphere => sphere_point(rng),
                ToyKind::Torus => torus_point(rng),
                ToyKind::TwoBoxes => box_point(i, n_points, rng),
                ToyKind::Ring2d => ring_point(rng),
            });
        }
        let rot = random_tilt(rng);
        let scale = rng.gen_range(0.9..1.1);
        let jittered = rows
            .iter()
            .map(|p| {
                let r = rotate(&rot, p);
                [
                    (scale * r[0]) as f32,
                    (scale * r[1]) as f32,
                    (scale * r[2]) as f32,
                ]
            })
            .collect();
        clouds.push(PointCloud::new(jittered)?);
    }
    Ok(clouds)
}

fn sphere_point<R: Rng>(rng: &mut R) -> [f64; 3] {
    // Normalized Gaussian vector: uniform on the sphere.
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| rng.sample(rand_distr::StandardNormal));
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if norm > 1e-9 {
            return [v[0] / norm, v[1] / norm, v[2] / norm];
        }
    }
}

fn torus_point<R: Rng>(rng: &mut R) -> [f64; 3] {
    // Uniform area: the ring angle is uniform, the tube angle is accepted
    // with probability proportional to its local circumference.
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let phi = loop {
        let phi = rng.gen_range(0.0..std::f64::consts::TAU);
        let accept = (TORUS_RING + TORUS_TUBE * phi.cos()) / (TORUS_RING + TORUS_TUBE);
        if rng.gen_range(0.0..1.0) < accept {
            break phi;
        }
    };
    let ring = TORUS_RING + TORUS_TUBE * phi.cos();
    [ring * theta.cos(), ring * theta.sin(), TORUS_TUBE * phi.sin()]
}

fn box_point<R: Rng>(index: usize, total: usize, rng: &mut R) -> [f64; 3] {
    // Alternate points between the two boxes for an even split, then pick a
    // cube face uniformly (all faces have equal area).
    let center_x = if index < total / 2 {
        -BOX_CENTER_X
    } else {
        BOX_CENTER_X
    };
    let face = rng.gen_range(0..6usize);
    let (u, v) = (
        rng.gen_range(-BOX_HALF_SIDE..BOX_HALF_SIDE),
        rng.gen_range(-BOX_HALF_SIDE..BOX_HALF_SIDE),
    );
    let h = BOX_HALF_SIDE;
    let local = match face {
        0 => [h, u, v],
        1 => [-h, u, v],
        2 => [u, h, v],
        3 => [u, -h, v],
        4 => [u, v, h],
        _ => [u, v, -h],
    };
    [local[0] + center_x, local[1], local[2]]
}

fn ring_point<R: Rng>(rng: &mut R) -> [f64; 3] {
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    [theta.cos(), theta.sin(), 0.0]
}

/// A rotation of at most `MAX_TILT_DEGREES` about a uniformly random axis,
/// as a row-major 3x3 matrix (Rodrigues form).
fn random_tilt<R: Rng>(rng: &mut R) -> [[f64; 3]; 3] {
    let axis = sphere_point(rng);
    let max = MAX_TILT_DEGREES.to_radians();
    let angle = rng.gen_range(-max..max);
    let (sin, cos) = angle.sin_cos();
    let one_c = 1.0 - cos;
    let (x, y, z) = (axis[0], axis[1], axis[2]);
    [
        [
            cos + x * x * one_c,
            x * y * one_c - z * sin,
            x * z * one_c + y * sin,
        ],
        [
            y * x * one_c + z * sin,
            cos + y * y * one_c,
            y * z * one_c - x * sin,
        ],
        [
            z * x * one_c - y * sin,
            z * y * one_c + x * sin,
            cos + z * z * one_c,
        ],
    ]
}

fn rotate(m: &[[f64; 3]; 3], p: &[f64; 3]) -> [f64; 3] {
    std::array::from_fn(|r| m[r][0] * p[0] + m[r][1] * p[1] + m[r][2] * p[2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::rng_from;

    #[test]
    fn kind_names_round_trip() {
        for kind in ToyKind::ALL {
            assert_eq!(kind.name().parse::<ToyKind>().unwrap(), kind);
        }
        assert!("cube".parse::<ToyKind>().is_err());
    }

    #[test]
    fn sphere_norms_stay_within_jitter_bounds() {
        let mut rng = rng_from(0x70e_1);
        let clouds = toy_shapes(ToyKind::Sphere, 256, 5, &mut rng).unwrap();
        for cloud in &clouds {
            for p in cloud.iter() {
                let norm = (p[0] as f64).hypot(p[1] as f64).hypot(p[2] as f64);
                assert!((0.9..=1.1).contains(&norm), "norm {norm}");
            }
        }
    }

    #[test]
    fn torus_norms_stay_within_tube_bounds() {
        let mut rng = rng_from(0x70e_2);
        let clouds = toy_shapes(ToyKind::Torus, 256, 3, &mut rng).unwrap();
        // Rotation preserves norms; point norms lie in [R-r, R+r] x jitter.
        for cloud in &clouds {
            let mut max_abs_z = 0.0f64;
            for p in cloud.iter() {
                let norm = (p[0] as f64).hypot(p[1] as f64).hypot(p[2] as f64);
                assert!((0.63..=1.43).contains(&norm), "norm {norm}");
                max_abs_z = max_abs_z.max((p[2] as f64).abs());
            }
            assert!(max_abs_z > 0.05, "torus cloud is unexpectedly flat");
        }
    }

    /// The two boxes must stay separated after jitter: no x near zero and a
    /// roughly even split between the modes.
    #[test]
    fn two_boxes_x_histogram_is_bimodal() {
        let mut rng = rng_from(0x70e_3);
        let clouds = toy_shapes(ToyKind::TwoBoxes, 512, 3, &mut rng).unwrap();
        for cloud in &clouds {
            let left = cloud.iter().filter(|p| p[0] < 0.0).count();
            let right = cloud.n_points() - left;
            assert!(cloud.iter().all(|p| p[0].abs() > 0.25), "gap invaded");
            assert!(left >= 154 && right >= 154, "split {left}/{right}"); // >= 30%
        }
    }

    #[test]
    fn ring_is_planar_before_rotation_and_thin_after() {
        let mut rng = rng_from(0x70e_4);
        let clouds = toy_shapes(ToyKind::Ring2d, 128, 2, &mut rng).unwrap();
        for cloud in &clouds {
            // A rotated unit circle still has every point at norm ~ scale.
            let norms: Vec<f64> = cloud
                .iter()
                .map(|p| (p[0] as f64).hypot(p[1] as f64).hypot(p[2] as f64))
                .collect();
            let spread = norms.iter().cloned().fold(f64::MIN, f64::max)
                - norms.iter().cloned().fold(f64::MAX, f64::min);
            assert!(spread < 1e-5, "ring norms spread {spread}");
        }
    }

    #[test]
    fn same_seed_reproduces_the_corpus() {
        let a = toy_shapes(ToyKind::Torus, 64, 4, &mut rng_from(99)).unwrap();
        let b = toy_shapes(ToyKind::Torus, 64, 4, &mut rng_from(99)).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.points(), y.points());
        }
    }

    #[test]
    fn zero_sizes_are_rejected() {
        let mut rng = rng_from(1);
        assert!(toy_shapes(ToyKind::Sphere, 0, 1, &mut rng).is_err());
        assert!(toy_shapes(ToyKind::Sphere, 8, 0, &mut rng).is_err());
    }
}
