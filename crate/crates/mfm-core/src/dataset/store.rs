//! The persisted hierarchy container.
//!
//! A store is a directory holding one text manifest plus one binary blob per
//! cloud per level (`cloud_00042.lvl1.bin`). Level-k blobs hold `N / D^k`
//! rows of little-endian f32 xyz; within a fine level, rows `D*m .. D*(m+1)`
//! are the cluster whose mean is coarse row `m`. Loaded pairs are re-checked
//! against that contract, so a corrupted or foreign blob cannot silently
//! enter training.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::cloud::PointCloud;
use crate::dataset::io::{load_blob, save_blob};
use crate::error::{invalid_arg, Error, Result};
use crate::geometry::{Hierarchy, HierarchyPair};

/// Environment variable consulted for a default store directory.
pub const STORE_ENV_VAR: &str = "MFM_STORE";

/// Block-mean tolerance for pairs loaded from disk.
pub const LOAD_MEAN_TOL: f64 = 1e-6;

/// Default store root from the environment, if set.
pub fn default_store_dir() -> Option<PathBuf> {
    std::env::var_os(STORE_ENV_VAR).map(PathBuf::from)
}

/// Per-cloud manifest entry.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudRecord {
    /// Source name (file stem or toy-shape kind).
    pub source: String,
    /// Which replica subsample of the source this is.
    pub replica: usize,
    /// Free-form class label; empty string = unlabeled.
    pub label: String,
    /// Centroid removed during normalization.
    pub centroid: [f64; 3],
    /// Isotropic scale divided out during normalization.
    pub scale: f64,
}

/// An on-disk dataset of cluster-contiguous hierarchies.
#[derive(Debug)]
pub struct HierarchyStore {
    root: PathBuf,
    pub name: String,
    /// Finest-level point count.
    pub points: usize,
    /// Downsampling ratio between adjacent levels.
    pub ratio: usize,
    /// Number of downsampling rounds; blobs exist for levels `0..=stages`.
    pub stages: usize,
    pub replicas: usize,
    pub records: Vec<CloudRecord>,
}

impl HierarchyStore {
    /// Start an empty store; the directory is created if needed.
    pub fn create(
        root: &Path,
        name: &str,
        points: usize,
        ratio: usize,
        stages: usize,
        replicas: usize,
    ) -> Result<Self> {
        if points == 0 || ratio < 2 || stages == 0 || replicas == 0 {
            return Err(invalid_arg!(
                "store needs points > 0, ratio >= 2, stages >= 1, replicas >= 1"
            ));
        }
        let stride = (ratio as u64)
            .checked_pow(stages as u32)
            .filter(|&s| points as u64 % s == 0)
            .ok_or_else(|| {
                invalid_arg!("{points} points not divisible by {ratio}^{stages}")
            })?;
        debug_assert!(stride > 0);
        fs::create_dir_all(root)?;
        Ok(HierarchyStore {
            root: root.to_path_buf(),
            name: name.to_string(),
            points,
            ratio,
            stages,
            replicas,
            records: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn blob_path(&self, cloud: usize, level: usize) -> PathBuf {
        self.root.join(format!("cloud_{cloud:05}.lvl{level}.bin"))
    }

    /// Append one cloud's hierarchy: writes every level blob, records the
    /// metadata, and returns the new cloud index. `finalize` persists the
    /// manifest once all clouds are in.
    pub fn push_cloud(&mut self, record: CloudRecord, hierarchy: &Hierarchy) -> Result<usize> {
        if hierarchy.ratio != self.ratio {
            return Err(invalid_arg!(
                "hierarchy ratio {} does not match store ratio {}",
                hierarchy.ratio,
                self.ratio
            ));
        }
        if hierarchy.levels.len() != self.stages + 1 {
            return Err(invalid_arg!(
                "hierarchy has {} levels, store expects {}",
                hierarchy.levels.len(),
                self.stages + 1
            ));
        }
        for (k, level) in hierarchy.levels.iter().enumerate() {
            let want = self.points / self.ratio.pow(k as u32);
            if level.n_points() != want {
                return Err(invalid_arg!(
                    "level {k} has {} rows, store expects {want}",
                    level.n_points()
                ));
            }
        }
        if !(record.scale.is_finite() && record.scale > 0.0) {
            return Err(invalid_arg!("record scale must be positive"));
        }
        let idx = self.records.len();
        for (k, level) in hierarchy.levels.iter().enumerate() {
            save_blob(&self.blob_path(idx, k), level)?;
        }
        self.records.push(record);
        Ok(idx)
    }

    /// Write the manifest reflecting the current records.
    pub fn finalize(&self) -> Result<()> {
        let mut text = String::new();
        text.push_str("[store]\n");
        text.push_str(&format!("name = {}\n", self.name));
        text.push_str(&format!("points = {}\n", self.points));
        text.push_str(&format!("ratio = {}\n", self.ratio));
        text.push_str(&format!("stages = {}\n", self.stages));
        text.push_str(&format!("replicas = {}\n", self.replicas));
        text.push_str(&format!("clouds = {}\n", self.records.len()));
        for (idx, rec) in self.records.iter().enumerate() {
            text.push_str(&format!("\n[cloud {idx}]\n"));
            text.push_str(&format!("source = {}\n", rec.source));
            text.push_str(&format!("replica = {}\n", rec.replica));
            text.push_str(&format!("label = {}\n", rec.label));
            text.push_str(&format!(
                "centroid = {} {} {}\n",
                rec.centroid[0], rec.centroid[1], rec.centroid[2]
            ));
            text.push_str(&format!("scale = {}\n", rec.scale));
        }
        fs::write(self.root.join("manifest.txt"), text)?;
        Ok(())
    }

    /// Open an existing store by parsing its manifest.
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join("manifest.txt");
        let text = fs::read_to_string(&path)?;
        let fail = |line: usize, msg: String| Error::Format {
            path: path.display().to_string(),
            line,
            msg,
        };

        // Sectioned key/value text: `[store]` once, `[cloud N]` per cloud.
        let mut store_kv: BTreeMap<String, String> = BTreeMap::new();
        let mut clouds: BTreeMap<usize, BTreeMap<String, String>> = BTreeMap::new();
        let mut section: Option<Option<usize>> = None; // None=store, Some(i)=cloud i
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(head) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                if head == "store" {
                    section = Some(None);
                } else if let Some(num) = head.strip_prefix("cloud ") {
                    let i: usize = num
                        .parse()
                        .map_err(|_| fail(line_no, format!("bad cloud index `{num}`")))?;
                    clouds.entry(i).or_default();
                    section = Some(Some(i));
                } else {
                    return Err(fail(line_no, format!("unknown section `[{head}]`")));
                }
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| fail(line_no, format!("expected `key = value`, got `{line}`")))?;
            match section {
                Some(None) => {
                    store_kv.insert(key, value);
                }
                Some(Some(i)) => {
                    clouds.get_mut(&i).unwrap().insert(key, value);
                }
                None => return Err(fail(line_no, "entry before any section header".into())),
            }
        }

        let get = |key: &str| -> Result<&String> {
            store_kv
                .get(key)
                .ok_or_else(|| fail(0, format!("[store] is missing `{key}`")))
        };
        let num = |key: &str| -> Result<usize> {
            get(key)?
                .parse()
                .map_err(|_| fail(0, format!("`{key}` is not an integer")))
        };
        let name = get("name")?.clone();
        let (points, ratio, stages, replicas, declared) = (
            num("points")?,
            num("ratio")?,
            num("stages")?,
            num("replicas")?,
            num("clouds")?,
        );
        if clouds.len() != declared {
            return Err(fail(
                0,
                format!("manifest declares {declared} clouds, found {}", clouds.len()),
            ));
        }
        let mut records = Vec::with_capacity(clouds.len());
        for (expect_idx, (idx, kv)) in clouds.iter().enumerate() {
            if *idx != expect_idx {
                return Err(fail(0, format!("cloud indices are not contiguous at {idx}")));
            }
            let field = |key: &str| -> Result<&String> {
                kv.get(key)
                    .ok_or_else(|| fail(0, format!("[cloud {idx}] is missing `{key}`")))
            };
            let centroid_raw = field("centroid")?;
            let parts: Vec<f64> = centroid_raw
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| fail(0, format!("[cloud {idx}] has a bad centroid")))?;
            if parts.len() != 3 {
                return Err(fail(0, format!("[cloud {idx}] centroid needs 3 numbers")));
            }
            records.push(CloudRecord {
                source: field("source")?.clone(),
                replica: field("replica")?
                    .parse()
                    .map_err(|_| fail(0, format!("[cloud {idx}] has a bad replica")))?,
                label: field("label")?.clone(),
                centroid: [parts[0], parts[1], parts[2]],
                scale: field("scale")?
                    .parse()
                    .map_err(|_| fail(0, format!("[cloud {idx}] has a bad scale")))?,
            });
        }
        Ok(HierarchyStore {
            root: root.to_path_buf(),
            name,
            points,
            ratio,
            stages,
            replicas,
            records,
        })
    }

    /// Load one level of one cloud, enforcing the row-count contract.
    pub fn load_level(&self, cloud: usize, level: usize) -> Result<PointCloud> {
        if cloud >= self.records.len() {
            return Err(invalid_arg!(
                "cloud {cloud} out of range ({} stored)",
                self.records.len()
            ));
        }
        if level > self.stages {
            return Err(invalid_arg!(
                "level {level} out of range (store has levels 0..={})",
                self.stages
            ));
        }
        let blob = load_blob(&self.blob_path(cloud, level))?;
        let want = self.points / self.ratio.pow(level as u32);
        if blob.n_points() != want {
            return Err(Error::InvalidState(format!(
                "cloud {cloud} level {level} has {} rows, manifest implies {want}",
                blob.n_points()
            )));
        }
        Ok(blob)
    }

    /// Load the (fine, coarse) pair for one stage of one cloud and verify
    /// the cluster-mean contract before handing it to training.
    pub fn load_pair(&self, cloud: usize, stage: usize) -> Result<HierarchyPair> {
        if stage >= self.stages {
            return Err(invalid_arg!(
                "stage {stage} out of range (store has {} stages)",
                self.stages
            ));
        }
        let pair = HierarchyPair {
            fine: self.load_level(cloud, stage)?,
            coarse: self.load_level(cloud, stage + 1)?,
            ratio: self.ratio,
        };
        pair.validate(LOAD_MEAN_TOL)?;
        Ok(pair)
    }

    /// Load every cloud's pair for one stage, in index order.
    pub fn load_pairs(&self, stage: usize) -> Result<Vec<HierarchyPair>> {
        (0..self.records.len())
            .map(|i| self.load_pair(i, stage))
            .collect()
    }

    /// Distinct labels in first-appearance order, skipping unlabeled clouds,
    /// with each cloud's label index (`None` = unlabeled).
    pub fn label_vocabulary(&self) -> (Vec<String>, Vec<Option<u32>>) {
        let mut vocab: Vec<String> = Vec::new();
        let per_cloud = self
            .records
            .iter()
            .map(|r| {
                if r.label.is_empty() {
                    None
                } else if let Some(pos) = vocab.iter().position(|l| l == &r.label) {
                    Some(pos as u32)
                } else {
                    vocab.push(r.label.clone());
                    Some((vocab.len() - 1) as u32)
                }
            })
            .collect();
        (vocab, per_cloud)
    }
}
