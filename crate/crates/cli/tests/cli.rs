//! End-to-end tests of the `ctdf` binary: exit codes, stderr conventions,
//! and a full command pipeline on a miniature configuration.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ctdf"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn ctdf")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn workdir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("ctdf-bin-{name}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

const TINY: &str = "\
[model]
branches = 2
channels = 4,8
stages = 2
convs_per_stage = 1

[phantom]
size = 32

[sim]
n_angles = 30
n_det = 48

[train]
n_train = 3
n_val = 2
iterations = 3
checkpoint_every = 2
log_every = 1
";

#[test]
fn help_and_version_exit_zero() {
    let out = run(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["gen-data", "train", "denoise", "eval", "noise-analyze"] {
        assert!(text.contains(sub), "--help must list {sub}");
    }
    assert_eq!(run(&["--version"]).status.code(), Some(0));
    assert_eq!(run(&["train", "--help"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_one_with_error_prefix() {
    // No subcommand at all.
    let out = run(&[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).starts_with("error:"), "{}", stderr_of(&out));

    // Unknown subcommand.
    let out = run(&["transmogrify"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).starts_with("error:"));

    // Missing the required --config flag.
    let out = run(&["train"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).starts_with("error:"));

    // Unknown flag.
    let out = run(&["train", "--config", "x.cfg", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).starts_with("error:"));
}

#[test]
fn runtime_errors_exit_two_with_error_prefix() {
    let dir = workdir("runtime-err");

    // Config file that does not exist.
    let out = run(&["train", "--config", dir.join("nope.cfg").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).starts_with("error:"), "{}", stderr_of(&out));

    // Config file with an unknown key: one-line diagnostic, exit 2.
    let bad = write_config(&dir, "bad.cfg", "[train]\nitertions = 5\n");
    let out = run(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_of(&out);
    assert!(err.starts_with("error:"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1, "one-line error: {err}");
    assert!(err.contains("itertions"), "{err}");

    // Training without generated data.
    let cfg = write_config(&dir, "tiny.cfg", TINY);
    let out = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).starts_with("error:"));

    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn invalid_thread_count_is_a_usage_error() {
    let dir = workdir("threads");
    let cfg = write_config(&dir, "tiny.cfg", TINY);
    let out = bin()
        .args(["gen-data", "--config", cfg.to_str().unwrap()])
        .env("CTDF_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("CTDF_THREADS"));

    let out = bin()
        .args(["gen-data", "--config", cfg.to_str().unwrap()])
        .env("CTDF_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn full_pipeline_via_binary() {
    let dir = workdir("pipeline");
    let cfg_path = write_config(&dir, "tiny.cfg", TINY);
    let cfg = cfg_path.to_str().unwrap();

    let out = run(&["gen-data", "--config", cfg]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    assert!(dir.join("data/manifest.txt").exists());
    assert!(dir.join("data/pair_00000.ldct").exists());

    // Single worker thread must work end to end.
    let out = bin()
        .args(["train", "--config", cfg])
        .env("CTDF_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    assert!(dir.join("checkpoints/final.ctdn").exists());
    assert!(dir.join("checkpoints/runlog.csv").exists());

    let out = run(&["denoise", "--config", cfg]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));

    let out = run(&["eval", "--config", cfg]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    assert!(dir.join("reports/metrics.csv").exists());
    assert!(dir.join("reports/curves.csv").exists());

    let out = run(&["noise-analyze", "--config", cfg]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    assert!(dir.join("reports/noise.csv").exists());
    assert!(dir.join("reports/preview_removed.pgm").exists());
    assert!(dir.join("reports/preview_removed_highfreq.pgm").exists());
    assert!(dir.join("reports/preview_removed_spectrum.pgm").exists());

    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn out_and_seed_overrides() {
    let dir = workdir("overrides");
    let cfg_path = write_config(&dir, "tiny.cfg", TINY);
    let cfg = cfg_path.to_str().unwrap();

    // --out redirects gen-data away from the configured data dir; --seed
    // changes the generated bytes.
    let alt = dir.join("alt_data");
    let out = run(&["gen-data", "--config", cfg, "--out", alt.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr_of(&out));
    assert!(alt.join("manifest.txt").exists());
    assert!(!dir.join("data").exists(), "--out must fully redirect the output");

    let alt2 = dir.join("alt_data2");
    let out = run(&[
        "gen-data", "--config", cfg, "--seed", "7", "--out", alt2.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let a = std::fs::read(alt.join("pair_00000.ldct")).unwrap();
    let b = std::fs::read(alt2.join("pair_00000.ldct")).unwrap();
    assert_ne!(a, b, "different seeds must change the data");

    std::fs::remove_dir_all(&dir).ok();
}
