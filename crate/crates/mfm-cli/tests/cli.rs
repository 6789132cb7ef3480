//! End-to-end exercises of the `mfm` binary: the full
//! toygen -> preprocess -> verify -> train -> sample -> eval pipeline at
//! desk scale, plus exit-code and determinism contracts.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mfm() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mfm"))
}

fn run(args: &[&str]) -> Output {
    mfm().args(args).output().expect("spawn mfm")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout:\n{}\nstderr:\n{}",
        stdout(out),
        stderr(out)
    );
}

fn write_config(path: &Path, body: &str) {
    std::fs::write(path, body).unwrap();
}

const CONFIG: &str = "\
[schedule]
stages = 2
ratio = 2
points = 16
interval 0 = 0.6 1.0
interval 1 = 0.0 1.0

[model]
widths = 8 8 8
time_dim = 4
classes = 2

[train]
lr = 1e-3
epochs = 2
batch_size = 8

[sampler]
nfe = 6 8

[run]
seed = 42
";

fn xyz_files(dir: &Path) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "xyz"))
        .collect();
    files.sort();
    files
}

#[test]
fn pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let raw = root.join("raw");
    let store = root.join("store");
    let cfg = root.join("run.cfg");
    write_config(&cfg, CONFIG);
    let cfg_s = cfg.to_str().unwrap();

    // Labeled corpus: one subdirectory per class.
    for (kind, sub) in [("sphere", "sphere"), ("torus", "torus")] {
        let dir = raw.join(sub);
        let out = run(&[
            "toygen", "--kind", kind, "--count", "6", "--n", "32",
            "--out", dir.to_str().unwrap(), "--seed", "1",
        ]);
        assert_ok(&out, "toygen");
        assert_eq!(xyz_files(&dir).len(), 6);
    }

    // Preprocess into a 3-level store (16 -> 8 -> 4 points).
    let out = run(&[
        "preprocess", "--in", raw.to_str().unwrap(), "--out", store.to_str().unwrap(),
        "--n", "16", "--d", "2", "--k", "2", "--replicas", "1", "--seed", "7",
    ]);
    assert_ok(&out, "preprocess");
    assert!(stdout(&out).contains("stored 12 hierarchies"));
    assert!(store.join("manifest.txt").is_file());

    // The bridge suite passes for this schedule.
    let out = run(&["verify", "--config", cfg_s]);
    assert_ok(&out, "verify");
    let text = stdout(&out);
    assert!(text.contains("[PASS]"), "{text}");
    assert!(!text.contains("[FAIL]"), "{text}");

    // Train both stages; every run prints the resolved config first.
    let ckpt0 = root.join("stage0.ckpt");
    let ckpt1 = root.join("stage1.ckpt");
    for (stage, ckpt) in [("0", &ckpt0), ("1", &ckpt1)] {
        let out = run(&[
            "train", "--store", store.to_str().unwrap(), "--config", cfg_s,
            "--stage", stage, "--out", ckpt.to_str().unwrap(),
        ]);
        assert_ok(&out, "train");
        let text = stdout(&out);
        assert!(text.contains("[schedule]") && text.contains("seed = 42"), "{text}");
        assert!(text.contains("epoch"), "{text}");
        assert!(ckpt.is_file());
    }

    // Sample a small conditional batch.
    let gen = root.join("gen");
    let out = run(&[
        "sample", "--ckpts", ckpt0.to_str().unwrap(), ckpt1.to_str().unwrap(),
        "--config", cfg_s, "--count", "4", "--out", gen.to_str().unwrap(),
        "--class", "1",
    ]);
    assert_ok(&out, "sample");
    let files = xyz_files(&gen);
    assert_eq!(files.len(), 4);
    let first = std::fs::read_to_string(&files[0]).unwrap();
    assert_eq!(first.lines().count(), 16);

    // Same invocation, same bytes; the per-cloud streams are seed-derived.
    let gen2 = root.join("gen2");
    let out = run(&[
        "sample", "--ckpts", ckpt1.to_str().unwrap(), ckpt0.to_str().unwrap(),
        "--config", cfg_s, "--count", "4", "--out", gen2.to_str().unwrap(),
        "--class", "1",
    ]);
    assert_ok(&out, "sample again");
    for (a, b) in xyz_files(&gen).iter().zip(xyz_files(&gen2).iter()) {
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }

    // Eval emits the metric table.
    let rf = root.join("refsphere");
    let out = run(&[
        "toygen", "--kind", "sphere", "--count", "4", "--n", "16",
        "--out", rf.to_str().unwrap(), "--seed", "9",
    ]);
    assert_ok(&out, "toygen ref");
    let out = run(&[
        "eval", "--gen", gen.to_str().unwrap(), "--ref", rf.to_str().unwrap(),
        "--metric", "both",
    ]);
    assert_ok(&out, "eval");
    let text = stdout(&out);
    assert!(text.contains("cd_1nna = "), "{text}");
    assert!(text.contains("emd_1nna = "), "{text}");

    // --nfe overrides the config's step counts.
    let gen3 = root.join("gen3");
    let out = run(&[
        "sample", "--ckpts", ckpt0.to_str().unwrap(), ckpt1.to_str().unwrap(),
        "--config", cfg_s, "--count", "1", "--out", gen3.to_str().unwrap(),
        "--nfe", "3,5", "--class", "0",
    ]);
    assert_ok(&out, "sample with --nfe");
    assert_eq!(xyz_files(&gen3).len(), 1);
}

#[test]
fn store_path_falls_back_to_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let raw = root.join("raw");
    let store = root.join("store");

    let out = run(&[
        "toygen", "--kind", "sphere", "--count", "3", "--n", "16",
        "--out", raw.to_str().unwrap(), "--seed", "2",
    ]);
    assert_ok(&out, "toygen");

    let out = mfm()
        .args(["preprocess", "--in", raw.to_str().unwrap(), "--n", "16",
               "--d", "4", "--k", "1", "--replicas", "1", "--seed", "3"])
        .env("MFM_STORE", &store)
        .output()
        .unwrap();
    assert_ok(&out, "preprocess via MFM_STORE");
    assert!(store.join("manifest.txt").is_file());

    // Without the flag or the variable, the run fails with the named gap.
    let out = mfm()
        .args(["preprocess", "--in", raw.to_str().unwrap(), "--n", "16",
               "--d", "4", "--k", "1"])
        .env_remove("MFM_STORE")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("MFM_STORE"), "{}", stderr(&out));
}

#[test]
fn infeasible_schedule_fails_verify_naming_the_constraint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    write_config(
        &cfg,
        "[schedule]\nstages = 2\nratio = 4\npoints = 256\n\
         interval 0 = 0.9 1.0\ninterval 1 = 0.0 0.5\n",
    );
    let out = run(&["verify", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(
        stderr(&out).contains("positive semi-definite"),
        "stderr: {}",
        stderr(&out)
    );
}

#[test]
fn usage_errors_exit_two() {
    let out = run(&["preprocess", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("preprocess"));
}

#[test]
fn sample_rejects_mismatched_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = root.join("run.cfg");
    write_config(&cfg, CONFIG);

    // Only a stage-0 checkpoint: missing coverage is a validation failure.
    let raw = root.join("raw");
    let store = root.join("store");
    let out = run(&[
        "toygen", "--kind", "sphere", "--count", "4", "--n", "16",
        "--out", raw.to_str().unwrap(),
    ]);
    assert_ok(&out, "toygen");
    let out = run(&[
        "preprocess", "--in", raw.to_str().unwrap(), "--out", store.to_str().unwrap(),
        "--n", "16", "--d", "2", "--k", "2", "--replicas", "1", "--seed", "5",
    ]);
    assert_ok(&out, "preprocess");

    // classes = 2 but the store is single-class: train must refuse.
    let ckpt1 = root.join("stage1.ckpt");
    let out = run(&[
        "train", "--store", store.to_str().unwrap(), "--config", cfg.to_str().unwrap(),
        "--stage", "1", "--out", ckpt1.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("classes"), "{}", stderr(&out));

    // Unconditional stage 0 trains fine, but cannot drive a cascade alone.
    let ckpt0 = root.join("stage0.ckpt");
    let out = run(&[
        "train", "--store", store.to_str().unwrap(), "--config", cfg.to_str().unwrap(),
        "--stage", "0", "--out", ckpt0.to_str().unwrap(),
    ]);
    assert_ok(&out, "train stage 0");
    let out = run(&[
        "sample", "--ckpts", ckpt0.to_str().unwrap(), "--config", cfg.to_str().unwrap(),
        "--count", "1", "--out", root.join("gen").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("no checkpoint"), "{}", stderr(&out));
}
