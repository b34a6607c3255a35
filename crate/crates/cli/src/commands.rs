//! The five batch commands: data generation, training, inference,
//! evaluation, and noise analysis.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use ctdf_core::dataset::{
    augment, denormalize, normalize, read_manifest, split_manifest, write_manifest,
    AugmentParams,
};
use ctdf_core::error::{Error, Result};
use ctdf_core::graph::{build_hrnet, build_unet, ArchDescriptor, ModelGraph};
use ctdf_core::metrics::{evaluate_manifest, MetricsReport};
use ctdf_core::noise_analysis::{
    analyze_pair, fft2, highfreq_component, HighpassSpec, NoiseReport,
};
use ctdf_core::optim::{adam_step, mse_loss, AdamState};
use ctdf_core::rng::{derive_seed, stream, StreamTag};
use ctdf_core::sim::slice_io::{read_pair, write_slice};
use ctdf_core::sim::{gen_pair, ImageHU, TrainingPair};
use ctdf_core::tensor::{DType, Tensor};
use rand::Rng;

use crate::checkpoint::{load_checkpoint, require_matching_arch, save_checkpoint};
use crate::config::RunConfig;
use crate::pgm;

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn manifest_path(cfg: &RunConfig) -> PathBuf {
    cfg.data_dir.join("manifest.txt")
}

/// Generates `n_train + n_val` simulated pairs and the split manifest.
///
/// Deterministic in the seed: rerunning overwrites every file with identical
/// bytes.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    if cfg.n_train == 0 {
        return Err(Error::Config("n_train must be at least 1".into()));
    }
    if cfg.n_val == 0 {
        return Err(Error::Config("n_val must be at least 1".into()));
    }
    let n_total = cfg.n_train + cfg.n_val;
    create_dir(&cfg.data_dir)?;

    let stems: Vec<String> = (0..n_total).map(|i| format!("pair_{i:05}")).collect();
    stems
        .par_iter()
        .enumerate()
        .try_for_each(|(i, stem)| -> Result<()> {
            let pair_seed = derive_seed(cfg.seed, StreamTag::Sample, i as u64);
            let pair = gen_pair(&cfg.phantom, &cfg.sim, pair_seed)?;
            ctdf_core::sim::slice_io::write_pair(&cfg.data_dir, stem, &pair, DType::F64)
        })?;

    let ratio = cfg.n_train as f64 / n_total as f64;
    let manifest = split_manifest(&stems, ratio, cfg.seed)?;
    if manifest.train.len() != cfg.n_train || manifest.val.len() != cfg.n_val {
        return Err(Error::Contract(format!(
            "split produced {}/{} pairs, wanted {}/{}",
            manifest.train.len(),
            manifest.val.len(),
            cfg.n_train,
            cfg.n_val
        )));
    }
    write_manifest(&manifest_path(cfg), &manifest)?;
    println!(
        "generated {n_total} pairs ({} train / {} val) at {}x{} in {}",
        cfg.n_train,
        cfg.n_val,
        cfg.phantom.size(),
        cfg.phantom.size(),
        cfg.data_dir.display()
    );
    Ok(())
}

/// Builds the configured architecture with the run's init stream.
pub fn build_model(cfg: &RunConfig, dtype: DType) -> Result<ModelGraph> {
    let init_seed = derive_seed(cfg.seed, StreamTag::Init, 0);
    match &cfg.model {
        ArchDescriptor::Hrnet(c) => build_hrnet(c, init_seed, dtype),
        ArchDescriptor::Unet(c) => build_unet(c, init_seed, dtype),
        ArchDescriptor::Custom(_) => {
            Err(Error::Config("config files can only select hrnet or unet".into()))
        }
    }
}

/// One training example: the augmented pair, normalized, as (input, target).
///
/// The target is always the normal-dose image — never the clean phantom,
/// which a practical setting would not have.
pub fn training_example(
    pair: &TrainingPair,
    params: &AugmentParams,
    aug_seed: u64,
    dtype: DType,
) -> Result<(Tensor, Tensor)> {
    let aug = augment(pair, params, aug_seed)?;
    Ok((
        normalize(&aug.ldct).cast(dtype),
        normalize(&aug.ndct).cast(dtype),
    ))
}

/// Outcome summary of a training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub final_loss: f64,
    pub final_checkpoint: PathBuf,
    pub runlog: PathBuf,
}

/// Trains the configured model on the generated dataset.
///
/// Per iteration: draw a training pair uniformly (per-iteration stream),
/// augment, normalize, forward, MSE against the normalized NDCT target,
/// backprop, Adam step at the scheduled rate. Checkpoints are written every
/// `checkpoint_every` iterations and at the end; the run log gets one
/// `iteration,lr,loss` line per iteration, flushed every `log_every`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    for w in cfg.schedule_warnings() {
        eprintln!("warning: {w}");
    }
    let manifest = read_manifest(&manifest_path(cfg))?;
    if manifest.train.is_empty() {
        return Err(Error::Config("manifest has no training pairs".into()));
    }
    let pairs: Vec<TrainingPair> = manifest
        .train
        .par_iter()
        .map(|stem| read_pair(&cfg.data_dir, stem))
        .collect::<Result<_>>()?;

    let mut graph = build_model(cfg, DType::F32)?;
    let schedule = cfg.lr_schedule()?;
    let mut adam = AdamState::new(graph.params().tensors());
    create_dir(&cfg.ckpt_dir)?;

    let runlog_path = cfg.ckpt_dir.join("runlog.csv");
    let mut runlog = std::fs::File::create(&runlog_path)
        .map_err(|e| Error::io(&runlog_path, e))?;
    let mut log_buf = String::from("iteration,lr,loss\n");
    let mut final_loss = f64::NAN;

    for iter in 0..cfg.iterations {
        let idx = stream(cfg.seed, StreamTag::Sample, iter).random_range(0..pairs.len());
        let aug_seed = derive_seed(cfg.seed, StreamTag::Augment, iter);
        let (x, y) = training_example(&pairs[idx], &cfg.augment, aug_seed, DType::F32)?;

        let (out, tape) = graph.forward(&x, true)?;
        let tape = tape.expect("recording forward returns a tape");
        let (loss, grad_out) = mse_loss(&out, &y)?;
        let grads = graph.backward(&tape, &grad_out)?;
        let lr = schedule.lr_at(iter);

        if !loss.is_finite() {
            let grad_norm = grads
                .params
                .iter()
                .map(|g| {
                    g.to_f64_vec().iter().map(|v| v * v).sum::<f64>()
                })
                .sum::<f64>()
                .sqrt();
            return Err(Error::Numeric(format!(
                "training diverged at iteration {iter}: loss {loss} (lr {lr}, \
                 gradient norm {grad_norm})"
            )));
        }

        let hyper = cfg.adam.clone().at_lr(lr)?;
        adam_step(
            graph.params_mut().tensors_mut(),
            &grads.params,
            &mut adam,
            &hyper,
        )?;

        log_buf.push_str(&format!("{iter},{lr},{loss}\n"));
        if (iter + 1) % cfg.log_every == 0 {
            runlog
                .write_all(log_buf.as_bytes())
                .and_then(|_| runlog.flush())
                .map_err(|e| Error::io(&runlog_path, e))?;
            log_buf.clear();
        }
        if (iter + 1) % cfg.checkpoint_every == 0 {
            let path = cfg.ckpt_dir.join(format!("ckpt_{:06}.ctdn", iter + 1));
            save_checkpoint(&path, &graph, iter + 1, Some(&adam))?;
        }
        final_loss = loss;
    }

    runlog
        .write_all(log_buf.as_bytes())
        .and_then(|_| runlog.flush())
        .map_err(|e| Error::io(&runlog_path, e))?;

    let final_checkpoint = cfg.ckpt_dir.join("final.ctdn");
    save_checkpoint(&final_checkpoint, &graph, cfg.iterations, Some(&adam))?;
    println!(
        "trained {} for {} iterations (final loss {final_loss}); checkpoint {}",
        match &cfg.model {
            ArchDescriptor::Hrnet(_) => "hrnet",
            ArchDescriptor::Unet(_) => "unet",
            ArchDescriptor::Custom(_) => "custom",
        },
        cfg.iterations,
        final_checkpoint.display()
    );
    Ok(TrainOutcome { final_loss, final_checkpoint, runlog: runlog_path })
}

/// Runs a model over one slice: normalize, forward, denormalize.
pub fn denoise_image(graph: &ModelGraph, img: &ImageHU) -> Result<ImageHU> {
    let (h, w) = (img.h(), img.w());
    if let Some((fh, fw)) = graph.meta().fixed_input {
        if (h, w) != (fh, fw) {
            return Err(Error::Config(format!(
                "checkpoint expects {fh}x{fw} slices, got {h}x{w}; crop or zero-pad \
                 the input to match"
            )));
        }
    }
    let d = graph.meta().input_divisor;
    if h % d != 0 || w % d != 0 {
        return Err(Error::Config(format!(
            "slice size {h}x{w} is not divisible by {d} as this model requires; \
             zero-pad to the next multiple of {d}"
        )));
    }
    let x = normalize(img).cast(graph.dtype());
    let (out, _) = graph.forward(&x, false)?;
    denormalize(&out)
}

/// Denoises the named slices into `<out_dir>/<stem>.denoised` files.
pub fn denoise_slices(
    graph: &ModelGraph,
    data_dir: &Path,
    stems: &[String],
    out_dir: &Path,
) -> Result<()> {
    create_dir(out_dir)?;
    stems.par_iter().try_for_each(|stem| -> Result<()> {
        let pair = read_pair(data_dir, stem)?;
        let out = denoise_image(graph, &pair.ldct)?;
        write_slice(&out_dir.join(format!("{stem}.denoised")), &out, DType::F64)
    })
}

/// Loads the inference checkpoint, cross-checking any explicitly configured
/// model against the checkpointed architecture.
pub fn load_inference_graph(cfg: &RunConfig) -> Result<ModelGraph> {
    let path = cfg.inference_checkpoint();
    let loaded = load_checkpoint(&path)?;
    if cfg.model_explicit {
        require_matching_arch(&loaded, &cfg.model)?;
    }
    Ok(loaded.graph)
}

fn validation_stems(cfg: &RunConfig) -> Result<Vec<String>> {
    let manifest = read_manifest(&manifest_path(cfg))?;
    if manifest.val.is_empty() {
        return Err(Error::Config("validation manifest is empty".into()));
    }
    Ok(manifest.val)
}

/// Denoises every validation slice with the inference checkpoint.
pub fn cmd_denoise(cfg: &RunConfig) -> Result<()> {
    let graph = load_inference_graph(cfg)?;
    let stems = validation_stems(cfg)?;
    denoise_slices(&graph, &cfg.data_dir, &stems, &cfg.report_dir)?;
    println!(
        "denoised {} validation slices into {}",
        stems.len(),
        cfg.report_dir.display()
    );
    Ok(())
}

/// Per-slice curve rows mirroring the metrics CSV without the aggregate.
pub const CURVES_HEADER: &str = "slice_index,rmse_ldct,rmse_out,ssim_ldct,ssim_out";

/// Scores the validation split; writes `metrics.csv` and `curves.csv`.
pub fn cmd_eval(cfg: &RunConfig) -> Result<MetricsReport> {
    let graph = load_inference_graph(cfg)?;
    let stems = validation_stems(cfg)?;
    let report = evaluate_manifest(&cfg.data_dir, &stems, |_stem, ldct| {
        denoise_image(&graph, ldct)
    })?;

    create_dir(&cfg.report_dir)?;
    let metrics_path = cfg.report_dir.join("metrics.csv");
    let csv = report.to_csv();
    write_text(&metrics_path, &csv)?;
    let parsed = MetricsReport::parse_csv(&csv)?;
    if parsed != report {
        return Err(Error::Contract(
            "metrics CSV did not parse back to the in-memory report".into(),
        ));
    }

    let mut curves = String::from(CURVES_HEADER);
    curves.push('\n');
    for (i, row) in report.rows.iter().enumerate() {
        curves.push_str(&format!(
            "{i},{},{},{},{}\n",
            row.rmse_ldct, row.rmse_out, row.ssim_paper_ldct, row.ssim_paper_out
        ));
    }
    write_text(&cfg.report_dir.join("curves.csv"), &curves)?;

    println!(
        "evaluated {} validation slices; mean rmse ldct {} -> denoised {}; \
         mean ssim {} -> {}; report {}",
        report.rows.len(),
        report.mean.rmse_ldct,
        report.mean.rmse_out,
        report.mean.ssim_paper_ldct,
        report.mean.ssim_paper_out,
        metrics_path.display()
    );
    Ok(report)
}

/// DC-centered copy of a spectrum's magnitudes for display.
fn fftshifted_magnitudes(spec: &ctdf_core::noise_analysis::Spectrum) -> Vec<f64> {
    let (h, w) = (spec.h(), spec.w());
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let sr = (r + h / 2) % h;
            let sc = (c + w / 2) % w;
            out[sr * w + sc] = spec.at(r, c).norm();
        }
    }
    out
}

/// CSV header of the noise analysis output.
pub const NOISE_CSV_HEADER: &str = ctdf_core::noise_analysis::CSV_HEADER;

/// Decomposes what the checkpoint removed from each validation slice.
///
/// Writes `noise.csv` (per-pair rows plus `MEAN`) and, for the first
/// validation slice, three PGM previews: the removed noise, its
/// high-frequency component (both windowed to +-50 HU), and the DC-centered
/// log-magnitude spectrum.
pub fn cmd_noise_analyze(cfg: &RunConfig) -> Result<NoiseReport> {
    let graph = load_inference_graph(cfg)?;
    let stems = validation_stems(cfg)?;
    let band = HighpassSpec::default();

    let reports: Vec<NoiseReport> = stems
        .par_iter()
        .map(|stem| {
            let pair = read_pair(&cfg.data_dir, stem)?;
            let denoised = denoise_image(&graph, &pair.ldct)?;
            analyze_pair(&pair, &denoised, &band)
        })
        .collect::<Result<_>>()?;
    let mean = NoiseReport::mean_of(&reports)?;

    create_dir(&cfg.report_dir)?;
    let mut csv = String::from(NOISE_CSV_HEADER);
    csv.push('\n');
    for (stem, report) in stems.iter().zip(&reports) {
        csv.push_str(&report.csv_row(stem));
        csv.push('\n');
    }
    csv.push_str(&mean.csv_row("MEAN"));
    csv.push('\n');
    write_text(&cfg.report_dir.join("noise.csv"), &csv)?;

    let first = read_pair(&cfg.data_dir, &stems[0])?;
    let denoised = denoise_image(&graph, &first.ldct)?;
    let removed = first.ldct.sub(&denoised)?;
    let (h, w) = (removed.h(), removed.w());
    pgm::write_pgm(
        &cfg.report_dir.join("preview_removed.pgm"),
        w,
        h,
        &pgm::window_to_u8(removed.data(), pgm::NOISE_WINDOW.0, pgm::NOISE_WINDOW.1),
    )?;
    let hf = highfreq_component(&removed, &band)?;
    pgm::write_pgm(
        &cfg.report_dir.join("preview_removed_highfreq.pgm"),
        w,
        h,
        &pgm::window_to_u8(hf.data(), pgm::NOISE_WINDOW.0, pgm::NOISE_WINDOW.1),
    )?;
    let spectrum = fft2(&removed)?;
    pgm::write_pgm(
        &cfg.report_dir.join("preview_removed_spectrum.pgm"),
        w,
        h,
        &pgm::spectrum_log_to_u8(&fftshifted_magnitudes(&spectrum)),
    )?;

    println!(
        "analyzed {} validation slices; mean cos(removed, added) {}; mean \
         projection onto added {}%; residual {}%; report {}",
        stems.len(),
        mean.cos_ra,
        mean.proj_added_pct,
        mean.residual_pct,
        cfg.report_dir.join("noise.csv").display()
    );
    Ok(mean)
}
