//! `ctdf` — batch CLI for the CT denoising workbench.
//!
//! Five subcommands cover the full workflow: `gen-data` simulates a paired
//! low-/normal-dose dataset, `train` fits a denoiser, `denoise` runs it over
//! the validation split, `eval` scores it, and `noise-analyze` decomposes
//! what it removed. Every command takes `--config <path>` plus optional
//! `--seed` and `--out` overrides.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure. Errors print to
//! stderr as a single `error: ...` line. `CTDF_THREADS` caps the worker
//! thread count (default: all cores).

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod pgm;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use ctdf_core::error::Result;

use crate::config::{load_config, RunConfig};

#[derive(Parser, Debug)]
#[command(
    name = "ctdf",
    version,
    about = "Low-dose CT denoising workbench: simulate, train, denoise, evaluate"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// Run configuration file (flat `key = value` sections).
    #[arg(long)]
    config: PathBuf,
    /// Override the configured master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the command's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Simulate a paired low-/normal-dose dataset and its split manifest.
    GenData(CommonArgs),
    /// Train the configured denoiser on the generated dataset.
    Train(CommonArgs),
    /// Denoise the validation slices with a trained checkpoint.
    Denoise(CommonArgs),
    /// Score the validation slices (RMSE, SSIM, CNR) against ground truth.
    Eval(CommonArgs),
    /// Decompose the removed signal into target noise and added noise.
    NoiseAnalyze(CommonArgs),
}

fn configure_threads() -> std::result::Result<(), String> {
    match std::env::var("CTDF_THREADS") {
        Err(_) => Ok(()),
        Ok(raw) => match raw.trim().parse::<usize>() {
            Ok(n) if n >= 1 => {
                // A second build_global in the same process is harmless: the
                // first pool wins, which is what tests that call main_entry
                // repeatedly need.
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
                Ok(())
            }
            _ => Err(format!(
                "CTDF_THREADS must be a positive integer, got {raw:?}"
            )),
        },
    }
}

fn apply_overrides(cfg: &mut RunConfig, cmd: &Cmd, args: &CommonArgs) {
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        match cmd {
            Cmd::GenData(_) => cfg.data_dir = out.clone(),
            Cmd::Train(_) => cfg.ckpt_dir = out.clone(),
            Cmd::Denoise(_) | Cmd::Eval(_) | Cmd::NoiseAnalyze(_) => {
                cfg.report_dir = out.clone()
            }
        }
    }
}

fn run(cmd: &Cmd) -> Result<()> {
    let args = match cmd {
        Cmd::GenData(a) | Cmd::Train(a) | Cmd::Denoise(a) | Cmd::Eval(a)
        | Cmd::NoiseAnalyze(a) => a,
    };
    let mut cfg = load_config(&args.config)?;
    apply_overrides(&mut cfg, cmd, args);
    match cmd {
        Cmd::GenData(_) => commands::cmd_gen_data(&cfg),
        Cmd::Train(_) => commands::cmd_train(&cfg).map(|_| ()),
        Cmd::Denoise(_) => commands::cmd_denoise(&cfg),
        Cmd::Eval(_) => commands::cmd_eval(&cfg).map(|_| ()),
        Cmd::NoiseAnalyze(_) => commands::cmd_noise_analyze(&cfg).map(|_| ()),
    }
}

/// Parses arguments, dispatches, and returns the process exit code.
pub fn main_entry<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return 1;
    }
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let first_line = e.to_string();
            let first_line = first_line.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: {first_line}");
            return 1;
        }
    };
    match run(&cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
