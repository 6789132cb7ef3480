//! Dataset pipeline: file ingestion, normalization, replica subsampling,
//! toy-shape synthesis, and the on-disk hierarchy store.
//!
//! `preprocess_dataset` is the entry point: it scans a directory of cloud
//! files (optionally nested one level, with the subdirectory name used as a
//! class label), normalizes each cloud, draws replica subsamples, builds the
//! cluster hierarchy per replica, and persists everything into a
//! [`store::HierarchyStore`]. Per-file work is parallel; store writes happen
//! at the end, in deterministic sorted order.

pub mod io;
pub mod store;
pub mod toy;

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::cloud::PointCloud;
use crate::error::{invalid_arg, Result};
use crate::geometry::{build_hierarchy, Hierarchy};
use crate::seeds::{derive_seed, rng_from};
use store::{CloudRecord, HierarchyStore};

/// What normalization removed from a cloud: `original = scale * p + centroid`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationParams {
    pub centroid: [f64; 3],
    pub scale: f64,
}

/// Center a cloud on its centroid and scale it so the farthest point sits on
/// the unit sphere.
pub fn normalize(cloud: &PointCloud) -> Result<(PointCloud, NormalizationParams)> {
    let centroid = cloud.centroid();
    let mut centered: Vec<[f64; 3]> = cloud
        .iter()
        .map(|p| {
            [
                p[0] as f64 - centroid[0],
                p[1] as f64 - centroid[1],
                p[2] as f64 - centroid[2],
            ]
        })
        .collect();
    let scale = centered
        .iter()
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .fold(0.0f64, f64::max);
    if scale <= 1e-12 {
        return Err(invalid_arg!(
            "degenerate cloud: all points coincide, nothing to normalize"
        ));
    }
    for p in &mut centered {
        for c in p.iter_mut() {
            *c /= scale;
        }
    }
    let rows = centered
        .iter()
        .map(|p| [p[0] as f32, p[1] as f32, p[2] as f32])
        .collect();
    Ok((
        PointCloud::new(rows)?,
        NormalizationParams { centroid, scale },
    ))
}

/// Normalize a cloud, then draw `replicas` independent subsamples of `n`
/// points without replacement.
pub fn ingest<R: Rng>(
    cloud: &PointCloud,
    n: usize,
    replicas: usize,
    rng: &mut R,
) -> Result<(Vec<PointCloud>, NormalizationParams)> {
    if n == 0 || replicas == 0 {
        return Err(invalid_arg!("n and replicas must be positive"));
    }
    if cloud.n_points() < n {
        return Err(invalid_arg!(
            "cloud has {} points, need at least {n} to subsample",
            cloud.n_points()
        ));
    }
    let (normalized, params) = normalize(cloud)?;
    let mut out = Vec::with_capacity(replicas);
    for _ in 0..replicas {
        let picks = rand::seq::index::sample(rng, normalized.n_points(), n);
        let rows = picks.iter().map(|i| normalized.points()[i]).collect();
        out.push(PointCloud::new(rows)?);
    }
    Ok((out, params))
}

/// Settings for one preprocessing run.
#[derive(Debug, Clone)]
pub struct PreprocessOptions {
    /// Dataset name recorded in the manifest.
    pub name: String,
    /// Finest-level point count per cloud.
    pub points: usize,
    /// Downsampling ratio between levels.
    pub ratio: usize,
    /// Downsampling rounds (the store holds levels `0..=stages`).
    pub stages: usize,
    /// Independent subsamples per source cloud.
    pub replicas: usize,
    pub seed: u64,
    /// Refinement sweep cap for the clustering.
    pub max_iters: usize,
}

/// Result of a preprocessing run: the populated store plus the files that
/// were skipped with the reason for each.
#[derive(Debug)]
pub struct PreprocessOutcome {
    pub store: HierarchyStore,
    pub skipped: Vec<(String, String)>,
}

/// Candidate cloud files: directly in `input`, or one subdirectory deep
/// (the subdirectory name becomes the label). Sorted by relative path.
fn scan_candidates(input: &Path) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    let mut top: Vec<_> = std::fs::read_dir(input)?.collect::<std::io::Result<_>>()?;
    top.sort_by_key(|e| e.file_name());
    for entry in top {
        let path = entry.path();
        let name = entry.file_name().to_string_lossy().into_owned();
        if path.is_dir() {
            let mut sub: Vec<_> = std::fs::read_dir(&path)?.collect::<std::io::Result<_>>()?;
            sub.sort_by_key(|e| e.file_name());
            for file in sub {
                let fpath = file.path();
                if fpath.is_file() && io::CloudFormat::from_path(&fpath).is_ok() {
                    let rel = format!("{name}/{}", file.file_name().to_string_lossy());
                    out.push((rel, name.clone()));
                }
            }
        } else if io::CloudFormat::from_path(&path).is_ok() {
            out.push((name, String::new()));
        }
    }
    Ok(out)
}

/// Build a store from a directory of cloud files. See the module docs for
/// the layout rules; failures are per-file (recorded in the outcome), and
/// only a run where *every* file fails is an error.
pub fn preprocess_dataset(
    input: &Path,
    output: &Path,
    options: &PreprocessOptions,
) -> Result<PreprocessOutcome> {
    let candidates = scan_candidates(input)?;
    if candidates.is_empty() {
        return Err(invalid_arg!(
            "no cloud files (.xyz/.ply/.obj) under {}",
            input.display()
        ));
    }

    struct PerFile {
        label: String,
        source: String,
        params: NormalizationParams,
        hierarchies: Vec<Hierarchy>,
    }

    let results: Vec<(String, Result<PerFile>)> = candidates
        .par_iter()
        .map(|(rel, label)| {
            let work = || -> Result<PerFile> {
                let path = input.join(rel);
                let cloud = io::load_cloud(&path)?;
                // Seed per relative path: reruns and file-list changes leave
                // other clouds' draws untouched.
                let mut rng = rng_from(derive_seed(options.seed, rel));
                let (replicas, params) =
                    ingest(&cloud, options.points, options.replicas, &mut rng)?;
                let hierarchies = replicas
                    .iter()
                    .map(|r| build_hierarchy(r, options.ratio, options.stages, options.max_iters))
                    .collect::<Result<Vec<_>>>()?;
                let source = Path::new(rel)
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| rel.clone());
                Ok(PerFile {
                    label: label.clone(),
                    source,
                    params,
                    hierarchies,
                })
            };
            (rel.clone(), work())
        })
        .collect();

    let mut store = HierarchyStore::create(
        output,
        &options.name,
        options.points,
        options.ratio,
        options.stages,
        options.replicas,
    )?;
    let mut skipped = Vec::new();
    for (rel, result) in results {
        match result {
            Ok(per_file) => {
                for (replica, hierarchy) in per_file.hierarchies.iter().enumerate() {
                    store.push_cloud(
                        CloudRecord {
                            source: per_file.source.clone(),
                            replica,
                            label: per_file.label.clone(),
                            centroid: per_file.params.centroid,
                            scale: per_file.params.scale,
                        },
                        hierarchy,
                    )?;
                }
            }
            Err(err) => skipped.push((rel, err.to_string())),
        }
    }
    if store.is_empty() {
        return Err(invalid_arg!(
            "every input failed preprocessing; first failure: {} ({})",
            skipped[0].0,
            skipped[0].1
        ));
    }
    store.finalize()?;
    Ok(PreprocessOutcome { store, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::toy::{toy_shapes, ToyKind};
    use crate::seeds::rng_from;
    use std::fs;

    #[test]
    fn normalize_centers_and_scales() {
        let cloud = PointCloud::new(vec![[2.0, 0.0, 0.0], [4.0, 0.0, 0.0]]).unwrap();
        let (norm, params) = normalize(&cloud).unwrap();
        assert_eq!(params.centroid, [3.0, 0.0, 0.0]);
        assert_eq!(params.scale, 1.0);
        assert_eq!(norm.points(), &[[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);

        let degenerate = PointCloud::new(vec![[5.0, 5.0, 5.0]; 3]).unwrap();
        assert!(normalize(&degenerate).is_err());
    }

    #[test]
    fn ingest_of_exact_size_is_identity_up_to_order() {
        let mut rng = rng_from(0xd5_1);
        let cloud = PointCloud::standard_normal(32, &mut rng);
        let (replicas, _) = ingest(&cloud, 32, 1, &mut rng).unwrap();
        let (normalized, _) = normalize(&cloud).unwrap();
        let mut got: Vec<_> = replicas[0].points().to_vec();
        let mut want: Vec<_> = normalized.points().to_vec();
        let key = |p: &[f32; 3]| (p[0].to_bits(), p[1].to_bits(), p[2].to_bits());
        got.sort_by_key(key);
        want.sort_by_key(key);
        assert_eq!(got, want);
    }

    #[test]
    fn ingest_draws_distinct_replicas_and_validates() {
        let mut rng = rng_from(0xd5_2);
        let cloud = PointCloud::standard_normal(64, &mut rng);
        let (replicas, _) = ingest(&cloud, 16, 5, &mut rng).unwrap();
        assert_eq!(replicas.len(), 5);
        assert!(replicas.iter().all(|r| r.n_points() == 16));
        assert_ne!(replicas[0].points(), replicas[1].points());
        assert!(ingest(&cloud, 128, 1, &mut rng).is_err()); // too few points
        assert!(ingest(&cloud, 0, 1, &mut rng).is_err());
    }

    #[test]
    fn normalization_is_idempotent() {
        let mut rng = rng_from(0xd5_3);
        let cloud = PointCloud::standard_normal(64, &mut rng).scaled(3.7);
        let (replicas, _) = ingest(&cloud, 64, 1, &mut rng).unwrap();
        let (_, params) = normalize(&replicas[0]).unwrap();
        let drift =
            (params.centroid[0].powi(2) + params.centroid[1].powi(2) + params.centroid[2].powi(2))
                .sqrt();
        assert!(drift < 1e-6, "centroid drift {drift}");
        assert!((params.scale - 1.0).abs() < 1e-6, "scale {}", params.scale);
    }

    fn options(seed: u64) -> PreprocessOptions {
        PreprocessOptions {
            name: "unit".into(),
            points: 16,
            ratio: 4,
            stages: 2,
            replicas: 2,
            seed,
            max_iters: 25,
        }
    }

    fn write_toy(dir: &Path, name: &str, kind: ToyKind, n: usize, seed: u64) {
        let cloud = &toy_shapes(kind, n, 1, &mut rng_from(seed)).unwrap()[0];
        io::save_xyz(&dir.join(name), cloud).unwrap();
    }

    #[test]
    fn preprocess_builds_labels_skips_failures_and_reruns_identically() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in");
        fs::create_dir_all(input.join("torus")).unwrap();
        write_toy(&input, "sphere0.xyz", ToyKind::Sphere, 64, 1);
        write_toy(&input.join("torus"), "t0.xyz", ToyKind::Torus, 64, 2);
        fs::write(input.join("broken.xyz"), "not numbers at all\n").unwrap();
        fs::write(input.join("notes.txt"), "ignored entirely\n").unwrap();

        let out1 = dir.path().join("store1");
        let outcome = preprocess_dataset(&input, &out1, &options(5)).unwrap();
        // 2 loadable sources x 2 replicas; the broken file is recorded.
        assert_eq!(outcome.store.len(), 4);
        assert_eq!(outcome.skipped.len(), 1);
        assert!(outcome.skipped[0].0.contains("broken.xyz"));
        let labels: Vec<String> = outcome
            .store
            .records
            .iter()
            .map(|r| r.label.clone())
            .collect();
        assert_eq!(labels, vec!["", "", "torus", "torus"]);
        assert_eq!(outcome.store.records[0].source, "sphere0");
        assert_eq!(outcome.store.records[1].replica, 1);
        // Every stored pair satisfies the structural contract.
        for stage in 0..2 {
            for pair in outcome.store.load_pairs(stage).unwrap() {
                pair.validate(store::LOAD_MEAN_TOL).unwrap();
            }
        }
        // Level-0 clouds fit in the unit ball.
        for idx in 0..outcome.store.len() {
            let level0 = outcome.store.load_level(idx, 0).unwrap();
            assert!(level0.max_norm() <= 1.0 + 1e-6);
        }

        // Re-run into a fresh directory: byte-identical artifacts.
        let out2 = dir.path().join("store2");
        preprocess_dataset(&input, &out2, &options(5)).unwrap();
        let manifest1 = fs::read(out1.join("manifest.txt")).unwrap();
        let manifest2 = fs::read(out2.join("manifest.txt")).unwrap();
        assert_eq!(manifest1, manifest2);
        for idx in 0..4 {
            for level in 0..=2 {
                let name = format!("cloud_{idx:05}.lvl{level}.bin");
                assert_eq!(
                    fs::read(out1.join(&name)).unwrap(),
                    fs::read(out2.join(&name)).unwrap(),
                    "{name} differs between reruns"
                );
            }
        }
    }

    #[test]
    fn preprocess_rejects_empty_and_all_failing_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("empty");
        fs::create_dir_all(&input).unwrap();
        assert!(preprocess_dataset(&input, &dir.path().join("s"), &options(1)).is_err());

        let input = dir.path().join("allbad");
        fs::create_dir_all(&input).unwrap();
        fs::write(input.join("a.xyz"), "garbage\n").unwrap();
        let err = preprocess_dataset(&input, &dir.path().join("s2"), &options(1));
        assert!(err.is_err());
    }
}
