//! `mfm` — operator surface for the multi-scale flow-matching pipeline.
//!
//! Subcommands: `preprocess` (build a hierarchy store from a directory of
//! clouds), `train` (fit one stage's velocity model), `sample` (cascade
//! generation from checkpoints), `eval` (generative-quality metrics),
//! `verify` (bridge statistical suite), `toygen` (synthetic corpora).
//!
//! Exit codes: 0 success, 1 validation/runtime failure (diagnostic on
//! stderr), 2 usage error.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mfm_core::dataset::io::{load_cloud, save_xyz};
use mfm_core::dataset::store::{default_store_dir, HierarchyStore};
use mfm_core::dataset::toy::{toy_shapes, ToyKind};
use mfm_core::dataset::{preprocess_dataset, PreprocessOptions};
use mfm_core::geometry::DEFAULT_MAX_ITERS;
use mfm_core::inference::generate_with_rng;
use mfm_core::metrics::{one_nna, CloudMetric};
use mfm_core::model::{load_checkpoint, save_checkpoint, Checkpoint};
use mfm_core::seeds::{derive_seed_indexed, rng_from};
use mfm_core::training::train_stage;
use mfm_core::verify::run_bridge_checks;
use mfm_core::{PointCloud, Result, SamplerConfig, VelocityField};

use config::RunConfig;

/// Validation failure with the violated constraint named in the message.
macro_rules! invalid_arg {
    ($($arg:tt)*) => {
        mfm_core::Error::InvalidArgument(format!($($arg)*))
    };
}

#[derive(Parser)]
#[command(name = "mfm", version, about = "Multi-scale flow matching for point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a cluster-hierarchy store from a directory of cloud files.
    Preprocess {
        /// Directory of .xyz/.ply/.obj files (subdirectory names become labels).
        #[arg(long = "in")]
        input: PathBuf,
        /// Store directory to create (default: $MFM_STORE).
        #[arg(long = "out")]
        output: Option<PathBuf>,
        /// Finest-level points per cloud.
        #[arg(long)]
        n: usize,
        /// Downsampling ratio between levels.
        #[arg(long)]
        d: usize,
        /// Number of downsampling rounds (store holds levels 0..=k).
        #[arg(long)]
        k: usize,
        /// Independent subsamples per source cloud.
        #[arg(long, default_value_t = 1)]
        replicas: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one stage's velocity model on a preprocessed store.
    Train {
        /// Hierarchy store directory (default: $MFM_STORE).
        #[arg(long)]
        store: Option<PathBuf>,
        /// Run configuration file.
        #[arg(long)]
        config: PathBuf,
        /// Stage to train (0 = finest).
        #[arg(long)]
        stage: usize,
        /// Checkpoint file to write.
        #[arg(long = "out")]
        output: PathBuf,
    },
    /// Generate clouds by cascading through stage checkpoints.
    Sample {
        /// One checkpoint per stage, any order.
        #[arg(long, num_args = 1..)]
        ckpts: Vec<PathBuf>,
        /// Run configuration file.
        #[arg(long)]
        config: PathBuf,
        /// Number of clouds to generate.
        #[arg(long)]
        count: usize,
        /// Directory for sample_NNNNN.xyz files.
        #[arg(long = "out")]
        output: PathBuf,
        /// Integration steps per stage, finest first (overrides the config).
        #[arg(long, value_delimiter = ',')]
        nfe: Option<Vec<usize>>,
        /// Class id for conditional coarse models.
        #[arg(long)]
        class: Option<u32>,
    },
    /// Score generated clouds against a reference set.
    Eval {
        /// Directory of generated clouds.
        #[arg(long = "gen")]
        generated: PathBuf,
        /// Directory of reference clouds.
        #[arg(long = "ref")]
        reference: PathBuf,
        /// cd, emd, or both.
        #[arg(long, default_value = "cd")]
        metric: String,
    },
    /// Run the cross-stage bridge statistical suite for a schedule.
    Verify {
        /// Run configuration file.
        #[arg(long)]
        config: PathBuf,
    },
    /// Write a synthetic corpus of toy shapes.
    Toygen {
        /// sphere, torus, two_boxes, or ring2d.
        #[arg(long)]
        kind: String,
        /// Number of clouds.
        #[arg(long)]
        count: usize,
        /// Points per cloud.
        #[arg(long)]
        n: usize,
        /// Directory for the .xyz files.
        #[arg(long = "out")]
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders help/version through the error path too; those
            // exit 0, real usage errors exit 2.
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(2),
            };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Preprocess {
            input,
            output,
            n,
            d,
            k,
            replicas,
            seed,
        } => cmd_preprocess(&input, output, n, d, k, replicas, seed),
        Command::Train {
            store,
            config,
            stage,
            output,
        } => cmd_train(store, &config, stage, &output),
        Command::Sample {
            ckpts,
            config,
            count,
            output,
            nfe,
            class,
        } => cmd_sample(&ckpts, &config, count, &output, nfe, class),
        Command::Eval {
            generated,
            reference,
            metric,
        } => cmd_eval(&generated, &reference, &metric),
        Command::Verify { config } => cmd_verify(&config),
        Command::Toygen {
            kind,
            count,
            n,
            output,
            seed,
        } => cmd_toygen(&kind, count, n, &output, seed),
    }
}

/// `--out`/`--store` fall back to `$MFM_STORE`.
fn resolve_store(flag: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.or_else(default_store_dir).ok_or_else(|| {
        invalid_arg!("no {what} given and MFM_STORE is not set")
    })
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let cfg = RunConfig::load(path)?;
    print!("{}", cfg.emit());
    println!();
    Ok(cfg)
}

fn cmd_preprocess(
    input: &Path,
    output: Option<PathBuf>,
    n: usize,
    d: usize,
    k: usize,
    replicas: usize,
    seed: u64,
) -> Result<ExitCode> {
    let output = resolve_store(output, "--out store path")?;
    let name = input
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    let options = PreprocessOptions {
        name,
        points: n,
        ratio: d,
        stages: k,
        replicas,
        seed,
        max_iters: DEFAULT_MAX_ITERS,
    };
    println!(
        "preprocess: in = {} out = {} n = {n} d = {d} k = {k} replicas = {replicas} seed = {seed}\n",
        input.display(),
        output.display()
    );
    let outcome = preprocess_dataset(input, &output, &options)?;
    for (file, reason) in &outcome.skipped {
        eprintln!("skipped {file}: {reason}");
    }
    println!(
        "stored {} hierarchies ({} levels each) in {}",
        outcome.store.records.len(),
        outcome.store.stages + 1,
        output.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(store: Option<PathBuf>, config: &Path, stage: usize, output: &Path) -> Result<ExitCode> {
    let cfg = load_config(config)?;
    let store_dir = resolve_store(store, "--store path")?;
    let store = HierarchyStore::open(&store_dir)?;

    let stages = cfg.schedule.stages();
    if stage >= stages {
        return Err(invalid_arg!("stage {stage} out of range: schedule has {stages} stages"));
    }
    if store.points != cfg.schedule.base_points()
        || store.ratio != cfg.schedule.ratio()
        || store.stages < stages
    {
        return Err(invalid_arg!(
            "store geometry (n = {}, d = {}, k = {}) does not match the schedule \
             (points = {}, ratio = {}, stages = {})",
            store.points,
            store.ratio,
            store.stages,
            cfg.schedule.base_points(),
            cfg.schedule.ratio(),
            stages
        ));
    }

    let arch = cfg.arch_for(stage);
    let (vocab, per_cloud) = store.label_vocabulary();
    let labels: Option<Vec<u32>> = match arch.classes {
        None => None,
        Some(classes) => {
            if vocab.len() != classes {
                return Err(invalid_arg!(
                    "config declares {classes} classes but the store has {} labels ({})",
                    vocab.len(),
                    if vocab.is_empty() { "unlabeled".to_string() } else { vocab.join(", ") }
                ));
            }
            Some(
                per_cloud
                    .iter()
                    .enumerate()
                    .map(|(i, l)| {
                        l.ok_or_else(|| {
                            invalid_arg!("cloud {i} in the store is unlabeled; conditional training needs labels")
                        })
                    })
                    .collect::<Result<_>>()?,
            )
        }
    };

    let pairs = store.load_pairs(stage)?;
    if pairs.is_empty() {
        return Err(invalid_arg!("store at {} holds no clouds", store_dir.display()));
    }
    let mut train_cfg = cfg.train[stage].clone();
    train_cfg.seed = derive_seed_indexed(cfg.seed, "train", stage as u64);

    println!(
        "training stage {stage} on {} pairs ({} -> {} points)",
        pairs.len(),
        pairs[0].fine.n_points(),
        pairs[0].coarse.n_points()
    );
    let report = train_stage(
        &pairs,
        labels.as_deref(),
        stage,
        &cfg.schedule,
        &arch,
        &train_cfg,
    )?;
    for (i, (loss, secs)) in report.epoch_losses.iter().zip(&report.epoch_secs).enumerate() {
        println!("epoch {i:4}  loss {loss:.6}  ({secs:.2}s)");
    }

    let ckpt = Checkpoint {
        stage,
        arch,
        labels: if arch_is_conditional(&cfg, stage) { vocab } else { Vec::new() },
        live: report.live.params().to_vec(),
        ema: report.ema.clone(),
    };
    save_checkpoint(output, &ckpt)?;
    println!(
        "wrote {} ({} parameters, final loss {:.6})",
        output.display(),
        ckpt.live.len(),
        report.epoch_losses.last().unwrap_or(&f64::NAN)
    );
    Ok(ExitCode::SUCCESS)
}

fn arch_is_conditional(cfg: &RunConfig, stage: usize) -> bool {
    cfg.arch_for(stage).classes.is_some()
}

fn cmd_sample(
    ckpts: &[PathBuf],
    config: &Path,
    count: usize,
    output: &Path,
    nfe: Option<Vec<usize>>,
    class: Option<u32>,
) -> Result<ExitCode> {
    let mut cfg = load_config(config)?;
    if let Some(nfe) = nfe {
        let stages = cfg.schedule.stages();
        if nfe.len() != stages {
            return Err(invalid_arg!(
                "--nfe needs one value per stage ({stages}), got {}",
                nfe.len()
            ));
        }
        if nfe.contains(&0) {
            return Err(invalid_arg!("--nfe values must be >= 1"));
        }
        cfg.nfe = nfe;
    }

    let stages = cfg.schedule.stages();
    let mut slots: Vec<Option<Checkpoint>> = (0..stages).map(|_| None).collect();
    for path in ckpts {
        let ckpt = load_checkpoint(path)?;
        if ckpt.stage >= stages {
            return Err(invalid_arg!(
                "{} is for stage {}, but the schedule has {stages} stages",
                path.display(),
                ckpt.stage
            ));
        }
        let slot = &mut slots[ckpt.stage];
        if slot.is_some() {
            return Err(invalid_arg!("two checkpoints given for stage {}", ckpt.stage));
        }
        *slot = Some(ckpt);
    }
    let checkpoints: Vec<Checkpoint> = slots
        .into_iter()
        .enumerate()
        .map(|(stage, s)| s.ok_or_else(|| invalid_arg!("no checkpoint given for stage {stage}")))
        .collect::<Result<_>>()?;

    // Sampling uses the EMA weights; the live set is kept for resuming.
    let models: Vec<_> = checkpoints
        .iter()
        .map(|c| c.ema_model())
        .collect::<Result<_>>()?;
    let fields: Vec<&dyn VelocityField> = models.iter().map(|m| m as &dyn VelocityField).collect();

    let coarse = &checkpoints[stages - 1];
    if let (Some(classes), Some(id)) = (coarse.arch.classes, class) {
        if id as usize >= classes {
            return Err(invalid_arg!(
                "--class {id} out of range: the coarse checkpoint has {classes} classes"
            ));
        }
        if !coarse.labels.is_empty() {
            println!("class {id} = {}", coarse.labels[id as usize]);
        }
    }
    if class.is_some() && coarse.arch.classes.is_none() {
        return Err(invalid_arg!("--class given but the coarse checkpoint is unconditional"));
    }

    let sampler = SamplerConfig {
        nfe_per_stage: cfg.nfe.clone(),
        prior: cfg.prior,
        seed: cfg.seed,
    };
    std::fs::create_dir_all(output)?;
    for i in 0..count {
        let mut rng = rng_from(derive_seed_indexed(cfg.seed, "sample", i as u64));
        let cloud = generate_with_rng(&fields, &cfg.schedule, &sampler, class, &mut rng)?;
        save_xyz(&output.join(format!("sample_{i:05}.xyz")), &cloud)?;
    }
    println!(
        "wrote {count} clouds of {} points to {}",
        cfg.schedule.base_points(),
        output.display()
    );
    Ok(ExitCode::SUCCESS)
}

/// All loadable clouds in a directory, sorted by file name.
fn load_cloud_dir(dir: &Path) -> Result<Vec<PointCloud>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    let clouds: Vec<PointCloud> = files
        .iter()
        .filter_map(|p| load_cloud(p).ok())
        .collect();
    if clouds.is_empty() {
        return Err(invalid_arg!("no loadable clouds in {}", dir.display()));
    }
    Ok(clouds)
}

fn cmd_eval(generated: &Path, reference: &Path, metric: &str) -> Result<ExitCode> {
    let metrics: Vec<CloudMetric> = match metric {
        "cd" => vec![CloudMetric::Chamfer],
        "emd" => vec![CloudMetric::Emd],
        "both" => vec![CloudMetric::Chamfer, CloudMetric::Emd],
        other => return Err(invalid_arg!("unknown metric `{other}` (expected cd, emd, or both)")),
    };
    let gen_clouds = load_cloud_dir(generated)?;
    let ref_clouds = load_cloud_dir(reference)?;
    println!(
        "eval: gen = {} ({} clouds) ref = {} ({} clouds) metric = {metric}\n",
        generated.display(),
        gen_clouds.len(),
        reference.display(),
        ref_clouds.len()
    );
    for m in metrics {
        let nna = one_nna(&gen_clouds, &ref_clouds, m)?;
        let key = match m {
            CloudMetric::Chamfer => "cd_1nna",
            CloudMetric::Emd => "emd_1nna",
        };
        println!("{key} = {nna:.2}");
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(config: &Path) -> Result<ExitCode> {
    let cfg = load_config(config)?;
    let results = run_bridge_checks(&cfg.schedule, cfg.seed)?;
    let mut failures = 0usize;
    for r in &results {
        let tag = if r.passed { "PASS" } else { "FAIL" };
        println!("[{tag}] {}: {}", r.name, r.detail);
        failures += usize::from(!r.passed);
    }
    if failures > 0 {
        eprintln!("error: {failures} of {} bridge checks failed", results.len());
        return Ok(ExitCode::FAILURE);
    }
    println!("all {} bridge checks passed", results.len());
    Ok(ExitCode::SUCCESS)
}

fn cmd_toygen(kind: &str, count: usize, n: usize, output: &Path, seed: u64) -> Result<ExitCode> {
    let kind: ToyKind = kind.parse()?;
    println!(
        "toygen: kind = {} count = {count} n = {n} out = {} seed = {seed}\n",
        kind.name(),
        output.display()
    );
    let mut rng = rng_from(seed);
    let clouds = toy_shapes(kind, n, count, &mut rng)?;
    std::fs::create_dir_all(output)?;
    for (i, cloud) in clouds.iter().enumerate() {
        save_xyz(&output.join(format!("{}_{i:04}.xyz", kind.name())), cloud)?;
    }
    println!("wrote {count} clouds to {}", output.display());
    Ok(ExitCode::SUCCESS)
}
