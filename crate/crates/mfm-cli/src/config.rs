//! Run configuration: a plain-text, sectioned key/value file describing the
//! stage schedule, model shape, per-stage training settings, and sampler.
//!
//! ```text
//! [schedule]
//! stages = 2
//! ratio = 4
//! points = 256
//! interval 0 = 0.6 1.0
//! interval 1 = 0.0 1.0
//!
//! [model]
//! widths = 64 64 64
//! time_dim = 16
//! classes = 2          # 0 = unconditional
//!
//! [train]              # defaults for every stage
//! lr = 2e-4
//! epochs = 50
//!
//! [train stage 1]      # per-stage overrides
//! grad_clip = 0.01
//!
//! [sampler]
//! nfe = 400 1000       # finest stage first
//! prior = scaled
//!
//! [run]
//! seed = 0
//! ```
//!
//! Omitted keys take the defaults shown by `emit()`; unknown sections or
//! keys are errors so typos cannot silently revert a run to defaults.

use std::fmt::Write as _;
use std::path::Path;

use mfm_core::inference::PriorVariance;
use mfm_core::model::ModelArch;
use mfm_core::schedule::new_schedule;
use mfm_core::training::{TimeWarp, TrainConfig};
use mfm_core::{Error, Result, StageSchedule};

/// A fully resolved run configuration (file values merged over defaults).
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub schedule: StageSchedule,
    pub widths: [usize; 3],
    pub time_dim: usize,
    /// Class-vocabulary size for the coarsest stage; 0 trains every stage
    /// unconditionally.
    pub classes: usize,
    /// Per-stage training settings, index = stage. `seed` fields are left 0
    /// here; commands derive per-stage seeds from `self.seed`.
    pub train: Vec<TrainConfig>,
    pub nfe: Vec<usize>,
    pub prior: PriorVariance,
    pub seed: u64,
}

/// Training defaults; the coarsest stage additionally defaults to gradient
/// clipping at 0.01, where early updates are largest.
fn default_train() -> TrainConfig {
    TrainConfig {
        lr: 2e-4,
        lr_decay: 0.998,
        ema_decay: 0.9999,
        grad_clip: None,
        batch_size: 32,
        epochs: 50,
        time_warp: TimeWarp::Sqrt,
        seed: 0,
    }
}

const COARSE_DEFAULT_GRAD_CLIP: f64 = 0.01;
const DEFAULT_NFE_FINEST: usize = 400;
const DEFAULT_NFE_COARSER: usize = 1000;

/// One parsed `key = value` line.
struct Entry {
    section: String,
    key: String,
    value: String,
    line: usize,
    used: std::cell::Cell<bool>,
}

fn fail(path: &Path, line: usize, msg: String) -> Error {
    Error::Format {
        path: path.display().to_string(),
        line,
        msg,
    }
}

fn split_entries(path: &Path, text: &str) -> Result<Vec<Entry>> {
    let mut entries = Vec::new();
    let mut section = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(rest) = content.strip_prefix('[') {
            let Some(name) = rest.strip_suffix(']') else {
                return Err(fail(path, line, format!("unterminated section `{content}`")));
            };
            section = name.trim().to_string();
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(fail(path, line, format!("expected `key = value`, got `{content}`")));
        };
        if section.is_empty() {
            return Err(fail(path, line, "key before any [section] header".to_string()));
        }
        entries.push(Entry {
            section: section.clone(),
            key: key.trim().to_string(),
            value: value.trim().to_string(),
            line,
            used: std::cell::Cell::new(false),
        });
    }
    Ok(entries)
}

struct Lookup<'a> {
    path: &'a Path,
    entries: &'a [Entry],
}

impl<'a> Lookup<'a> {
    fn get(&self, section: &str, key: &str) -> Result<Option<&'a Entry>> {
        let mut found = None;
        for e in self.entries.iter().filter(|e| e.section == section && e.key == key) {
            if found.is_some() {
                return Err(fail(
                    self.path,
                    e.line,
                    format!("duplicate key `{key}` in [{section}]"),
                ));
            }
            e.used.set(true);
            found = Some(e);
        }
        Ok(found)
    }

    fn parse<T: std::str::FromStr>(&self, section: &str, key: &str, what: &str) -> Result<Option<T>> {
        match self.get(section, key)? {
            None => Ok(None),
            Some(e) => match e.value.parse::<T>() {
                Ok(v) => Ok(Some(v)),
                Err(_) => Err(fail(
                    self.path,
                    e.line,
                    format!("`{key} = {}` is not {what}", e.value),
                )),
            },
        }
    }

    fn require<T: std::str::FromStr>(&self, section: &str, key: &str, what: &str) -> Result<T> {
        self.parse(section, key, what)?.ok_or_else(|| {
            fail(
                self.path,
                0,
                format!("missing required key `{key}` in [{section}]"),
            )
        })
    }
}

fn parse_numbers<T: std::str::FromStr>(
    path: &Path,
    e: &Entry,
    count: Option<usize>,
    what: &str,
) -> Result<Vec<T>> {
    let parts: Vec<&str> = e.value.split_whitespace().collect();
    if let Some(n) = count {
        if parts.len() != n {
            return Err(fail(
                path,
                e.line,
                format!("`{}` needs {n} values, got {}", e.key, parts.len()),
            ));
        }
    }
    parts
        .iter()
        .map(|p| {
            p.parse::<T>()
                .map_err(|_| fail(path, e.line, format!("`{p}` is not {what}")))
        })
        .collect()
}

/// Apply `[train]` or `[train stage N]` keys onto `cfg`.
fn apply_train_keys(lookup: &Lookup, section: &str, cfg: &mut TrainConfig) -> Result<()> {
    if let Some(v) = lookup.parse::<f64>(section, "lr", "a number")? {
        cfg.lr = v;
    }
    if let Some(v) = lookup.parse::<f64>(section, "lr_decay", "a number")? {
        cfg.lr_decay = v;
    }
    if let Some(v) = lookup.parse::<f64>(section, "ema_decay", "a number")? {
        cfg.ema_decay = v;
    }
    if let Some(e) = lookup.get(section, "grad_clip")? {
        cfg.grad_clip = if e.value == "none" {
            None
        } else {
            Some(e.value.parse::<f64>().map_err(|_| {
                fail(
                    lookup.path,
                    e.line,
                    format!("`grad_clip = {}` is not a number or `none`", e.value),
                )
            })?)
        };
    }
    if let Some(v) = lookup.parse::<usize>(section, "batch_size", "an integer")? {
        cfg.batch_size = v;
    }
    if let Some(v) = lookup.parse::<usize>(section, "epochs", "an integer")? {
        cfg.epochs = v;
    }
    if let Some(e) = lookup.get(section, "time_warp")? {
        cfg.time_warp = match e.value.as_str() {
            "sqrt" => TimeWarp::Sqrt,
            "uniform" => TimeWarp::Uniform,
            other => {
                return Err(fail(
                    lookup.path,
                    e.line,
                    format!("`time_warp = {other}` (expected sqrt or uniform)"),
                ))
            }
        };
    }
    Ok(())
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::parse(path, &text)
    }

    pub fn parse(path: &Path, text: &str) -> Result<RunConfig> {
        let entries = split_entries(path, text)?;
        let lookup = Lookup {
            path,
            entries: &entries,
        };

        // [schedule]
        let stages: usize = lookup.require("schedule", "stages", "an integer")?;
        let ratio: usize = lookup.require("schedule", "ratio", "an integer")?;
        let points: usize = lookup.require("schedule", "points", "an integer")?;
        let mut intervals = Vec::with_capacity(stages);
        for k in 0..stages {
            let key = format!("interval {k}");
            let Some(e) = lookup.get("schedule", &key)? else {
                return Err(fail(
                    path,
                    0,
                    format!("missing `{key}` in [schedule] ({stages} stages declared)"),
                ));
            };
            let pair: Vec<f64> = parse_numbers(path, e, Some(2), "a number")?;
            intervals.push((pair[0], pair[1]));
        }
        let schedule = new_schedule(stages, ratio, intervals, points)?;

        // [model]
        let widths = match lookup.get("model", "widths")? {
            None => [64usize, 64, 64],
            Some(e) => {
                let v: Vec<usize> = parse_numbers(path, e, Some(3), "an integer")?;
                [v[0], v[1], v[2]]
            }
        };
        let time_dim = lookup.parse::<usize>("model", "time_dim", "an integer")?.unwrap_or(16);
        let classes = lookup.parse::<usize>("model", "classes", "an integer")?.unwrap_or(0);

        // [train] and [train stage N]
        let mut base = default_train();
        apply_train_keys(&lookup, "train", &mut base)?;
        let mut train = Vec::with_capacity(stages);
        for stage in 0..stages {
            let mut cfg = base.clone();
            if stage == stages - 1 && lookup.get("train", "grad_clip")?.is_none() {
                cfg.grad_clip = Some(COARSE_DEFAULT_GRAD_CLIP);
            }
            apply_train_keys(&lookup, &format!("train stage {stage}"), &mut cfg)?;
            train.push(cfg);
        }

        // [sampler]
        let nfe = match lookup.get("sampler", "nfe")? {
            None => (0..stages)
                .map(|k| if k == 0 { DEFAULT_NFE_FINEST } else { DEFAULT_NFE_COARSER })
                .collect(),
            Some(e) => {
                let v: Vec<usize> = parse_numbers(path, e, Some(stages), "an integer")?;
                if let Some(bad) = v.iter().position(|&n| n == 0) {
                    return Err(fail(path, e.line, format!("nfe for stage {bad} must be >= 1")));
                }
                v
            }
        };
        let prior = match lookup.get("sampler", "prior")? {
            None => PriorVariance::Scaled,
            Some(e) => match e.value.as_str() {
                "scaled" => PriorVariance::Scaled,
                "unit" => PriorVariance::Unit,
                other => {
                    return Err(fail(
                        path,
                        e.line,
                        format!("`prior = {other}` (expected scaled or unit)"),
                    ))
                }
            },
        };

        // [run]
        let seed = lookup.parse::<u64>("run", "seed", "an integer")?.unwrap_or(0);

        if let Some(unused) = entries.iter().find(|e| !e.used.get()) {
            return Err(fail(
                path,
                unused.line,
                format!("unknown key `{}` in [{}]", unused.key, unused.section),
            ));
        }

        let config = RunConfig {
            schedule,
            widths,
            time_dim,
            classes,
            train,
            nfe,
            prior,
            seed,
        };
        config.validate_arch()?;
        Ok(config)
    }

    /// Every stage's arch must pass model validation; catch it at load time
    /// rather than deep inside a command.
    fn validate_arch(&self) -> Result<()> {
        for stage in 0..self.schedule.stages() {
            self.arch_for(stage).validate()?;
            self.train[stage].validate()?;
        }
        Ok(())
    }

    /// The class condition enters at the coarsest stage, where global shape
    /// is decided; finer stages refine unconditionally.
    pub fn arch_for(&self, stage: usize) -> ModelArch {
        let conditional = self.classes > 0 && stage + 1 == self.schedule.stages();
        ModelArch {
            widths: self.widths,
            time_dim: self.time_dim,
            classes: conditional.then_some(self.classes),
        }
    }

    /// Re-emit the resolved configuration in the file format, defaults
    /// included, so every run logs exactly what it executed.
    pub fn emit(&self) -> String {
        let mut out = String::new();
        let s = &mut out;
        let _ = writeln!(s, "[schedule]");
        let _ = writeln!(s, "stages = {}", self.schedule.stages());
        let _ = writeln!(s, "ratio = {}", self.schedule.ratio());
        let _ = writeln!(s, "points = {}", self.schedule.base_points());
        for (k, (a, b)) in self.schedule.intervals().iter().enumerate() {
            let _ = writeln!(s, "interval {k} = {a} {b}");
        }
        let _ = writeln!(s, "\n[model]");
        let _ = writeln!(s, "widths = {} {} {}", self.widths[0], self.widths[1], self.widths[2]);
        let _ = writeln!(s, "time_dim = {}", self.time_dim);
        let _ = writeln!(s, "classes = {}", self.classes);
        for (stage, cfg) in self.train.iter().enumerate() {
            let _ = writeln!(s, "\n[train stage {stage}]");
            let _ = writeln!(s, "lr = {}", cfg.lr);
            let _ = writeln!(s, "lr_decay = {}", cfg.lr_decay);
            let _ = writeln!(s, "ema_decay = {}", cfg.ema_decay);
            match cfg.grad_clip {
                Some(c) => {
                    let _ = writeln!(s, "grad_clip = {c}");
                }
                None => {
                    let _ = writeln!(s, "grad_clip = none");
                }
            }
            let _ = writeln!(s, "batch_size = {}", cfg.batch_size);
            let _ = writeln!(s, "epochs = {}", cfg.epochs);
            let warp = match cfg.time_warp {
                TimeWarp::Sqrt => "sqrt",
                TimeWarp::Uniform => "uniform",
            };
            let _ = writeln!(s, "time_warp = {warp}");
        }
        let _ = writeln!(s, "\n[sampler]");
        let _ = writeln!(
            s,
            "nfe = {}",
            self.nfe.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(" ")
        );
        let prior = match self.prior {
            PriorVariance::Scaled => "scaled",
            PriorVariance::Unit => "unit",
        };
        let _ = writeln!(s, "prior = {prior}");
        let _ = writeln!(s, "\n[run]");
        let _ = writeln!(s, "seed = {}", self.seed);
        out
    }
}
