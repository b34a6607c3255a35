//! Run configuration: a flat `key = value` text format with `[section]`
//! headers.
//!
//! Unknown sections, unknown keys, and duplicate keys are all hard errors so
//! a typo in an experiment config cannot silently fall back to a default.
//! Every key has a desk-scale default, so the empty file is a valid
//! configuration. Relative paths in `[paths]` are resolved against the
//! directory containing the config file.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use ctdf_core::dataset::AugmentParams;
use ctdf_core::error::{Error, Result};
use ctdf_core::graph::{ArchDescriptor, HrnetConfig, UnetConfig};
use ctdf_core::optim::{AdamHyper, LrSchedule};
use ctdf_core::sim::phantom::PhantomSpec;
use ctdf_core::sim::SimConfig;

/// Fully resolved run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    /// Selected architecture with its hyperparameters.
    pub model: ArchDescriptor,
    /// Whether the config file set any `[model]` key explicitly (used to
    /// cross-check against checkpoints).
    pub model_explicit: bool,
    pub phantom: PhantomSpec,
    pub sim: SimConfig,
    pub augment: AugmentParams,
    pub adam: AdamHyper,
    /// Explicit schedule milestones; `None` selects the default step-down
    /// schedule built from the base learning rate.
    pub milestones: Option<Vec<(u64, f64)>>,
    pub iterations: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub ckpt_dir: PathBuf,
    pub report_dir: PathBuf,
    /// Checkpoint to load for inference commands; defaults to
    /// `<ckpt_dir>/final.ctdn`.
    pub checkpoint_file: Option<PathBuf>,
}

impl RunConfig {
    /// The checkpoint inference commands read.
    pub fn inference_checkpoint(&self) -> PathBuf {
        self.checkpoint_file
            .clone()
            .unwrap_or_else(|| self.ckpt_dir.join("final.ctdn"))
    }

    /// The learning-rate schedule: explicit milestones if configured, else
    /// the reference step-down recipe (base rate from iteration 0, /10 at
    /// iteration 50000, /100 at iteration 75000). The default milestones do
    /// not rescale with `iterations`; short runs simply never reach them
    /// (see `schedule_warnings`).
    pub fn lr_schedule(&self) -> Result<LrSchedule> {
        if let Some(ms) = &self.milestones {
            return LrSchedule::new(ms.clone());
        }
        let lr = self.adam.lr;
        LrSchedule::new(vec![(0, lr), (50_000, lr / 10.0), (75_000, lr / 100.0)])
    }

    /// Milestones at or past the end of the run are legal but ineffective;
    /// returns one warning line per such milestone.
    pub fn schedule_warnings(&self) -> Vec<String> {
        match self.lr_schedule() {
            Ok(s) => s
                .milestones()
                .iter()
                .filter(|(it, _)| *it >= self.iterations)
                .map(|(it, lr)| {
                    format!(
                        "milestone at iteration {it} (lr {lr}) never activates in a \
                         {}-iteration run",
                        self.iterations
                    )
                })
                .collect(),
            Err(_) => Vec::new(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be >= 1".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be >= 1".into()));
        }
        self.augment.validate()?;
        self.sim.validate()?;
        self.lr_schedule()?;
        match &self.model {
            ArchDescriptor::Hrnet(c) => {
                c.validate()?;
                let d = 1usize << (c.branches - 1);
                if self.augment.target_size % d != 0 {
                    return Err(Error::Config(format!(
                        "slice size {} is not divisible by {d} as the {}-branch \
                         hrnet requires",
                        self.augment.target_size, c.branches
                    )));
                }
            }
            ArchDescriptor::Unet(c) => {
                c.validate()?;
                if c.input_size != self.augment.target_size {
                    return Err(Error::Config(format!(
                        "unet input_size {} must equal the slice size {}",
                        c.input_size, self.augment.target_size
                    )));
                }
            }
            ArchDescriptor::Custom(_) => {
                return Err(Error::Config(
                    "config files can only select hrnet or unet".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Raw parsed entries with duplicate/unknown tracking.
struct RawConfig {
    entries: HashMap<(String, String), (String, usize)>,
}

impl RawConfig {
    fn parse(text: &str, path: &Path) -> Result<RawConfig> {
        let mut entries = HashMap::new();
        let mut section: Option<String> = None;
        for (i, raw_line) in text.lines().enumerate() {
            let line = raw_line.trim();
            let line_no = i + 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line.starts_with('[') {
                if !line.ends_with(']') || line.len() < 3 {
                    return Err(Error::format(
                        path,
                        format!("line {line_no}: malformed section header {line:?}"),
                    ));
                }
                section = Some(line[1..line.len() - 1].trim().to_string());
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::format(
                    path,
                    format!("line {line_no}: expected `key = value`, got {line:?}"),
                ));
            };
            let Some(section) = section.clone() else {
                return Err(Error::format(
                    path,
                    format!(
                        "line {line_no}: key {:?} appears before any [section] header",
                        key.trim()
                    ),
                ));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if let Some((_, first)) =
                entries.insert((section.clone(), key.clone()), (value, line_no))
            {
                return Err(Error::format(
                    path,
                    format!(
                        "line {line_no}: duplicate key {key:?} in [{section}] \
                         (first set on line {first})"
                    ),
                ));
            }
        }
        Ok(RawConfig { entries })
    }

    fn take(&mut self, section: &str, key: &str) -> Option<String> {
        self.entries
            .remove(&(section.to_string(), key.to_string()))
            .map(|(v, _)| v)
    }

    fn has_section(&self, section: &str) -> bool {
        self.entries.keys().any(|(s, _)| s == section)
    }

    fn reject_leftovers(&self, path: &Path) -> Result<()> {
        let mut left: Vec<(&(String, String), &(String, usize))> = self.entries.iter().collect();
        left.sort_by_key(|(_, (_, line))| *line);
        if let Some(((section, key), (_, line))) = left.first() {
            return Err(Error::format(
                path,
                format!("line {line}: unknown key {key:?} in section [{section}]"),
            ));
        }
        Ok(())
    }
}

fn parse_num<T: std::str::FromStr>(what: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>()
        .map_err(|e| Error::Config(format!("{what}: cannot parse {v:?}: {e}")))
}

fn parse_bool(what: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!(
            "{what}: expected true or false, got {v:?}"
        ))),
    }
}

fn parse_usize_list(what: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|s| parse_num::<usize>(what, s.trim()))
        .collect()
}

fn parse_milestones(v: &str) -> Result<Vec<(u64, f64)>> {
    v.split(',')
        .map(|item| {
            let item = item.trim();
            let Some((it, lr)) = item.split_once(':') else {
                return Err(Error::Config(format!(
                    "optim.milestones: expected `iteration:lr`, got {item:?}"
                )));
            };
            Ok((
                parse_num::<u64>("optim.milestones iteration", it.trim())?,
                parse_num::<f64>("optim.milestones lr", lr.trim())?,
            ))
        })
        .collect()
}

/// Parses the configuration text. `base_dir` anchors relative paths.
pub fn parse_config(text: &str, path: &Path, base_dir: &Path) -> Result<RunConfig> {
    let mut raw = RawConfig::parse(text, path)?;

    // Reject unknown section names up front for a clearer message.
    {
        let known = ["model", "phantom", "sim", "augment", "optim", "train", "paths"];
        let mut sections: Vec<(&String, usize)> = raw
            .entries
            .iter()
            .map(|((s, _), (_, line))| (s, *line))
            .collect();
        sections.sort_by_key(|(_, line)| *line);
        for (section, line) in sections {
            if !known.contains(&section.as_str()) {
                return Err(Error::format(
                    path,
                    format!("line {line}: unknown section [{section}]"),
                ));
            }
        }
    }

    let model_explicit = raw.has_section("model");

    // [phantom]
    let size = match raw.take("phantom", "size") {
        Some(v) => parse_num::<usize>("phantom.size", &v)?,
        None => 64,
    };
    let n_ellipses = match raw.take("phantom", "n_ellipses") {
        Some(v) => parse_num::<usize>("phantom.n_ellipses", &v)?,
        None => 5,
    };
    let atten_lo = match raw.take("phantom", "atten_lo") {
        Some(v) => parse_num::<f64>("phantom.atten_lo", &v)?,
        None => -80.0,
    };
    let atten_hi = match raw.take("phantom", "atten_hi") {
        Some(v) => parse_num::<f64>("phantom.atten_hi", &v)?,
        None => 120.0,
    };
    let lesion = match raw.take("phantom", "lesion") {
        Some(v) => parse_bool("phantom.lesion", &v)?,
        None => true,
    };
    let phantom = PhantomSpec::new(n_ellipses, (atten_lo, atten_hi), size, lesion)?;

    // [model]
    let arch_name = raw.take("model", "arch").unwrap_or_else(|| "hrnet".into());
    let model = match arch_name.as_str() {
        "hrnet" => {
            let mut c = HrnetConfig::default();
            if let Some(v) = raw.take("model", "branches") {
                c.branches = parse_num("model.branches", &v)?;
            }
            if let Some(v) = raw.take("model", "channels") {
                c.channels = parse_usize_list("model.channels", &v)?;
            } else if c.channels.len() != c.branches {
                // Default widths follow the branch count: 16 doubling.
                c.channels = (0..c.branches).map(|i| 16usize << i).collect();
            }
            if let Some(v) = raw.take("model", "stages") {
                c.stages = parse_num("model.stages", &v)?;
            }
            if let Some(v) = raw.take("model", "convs_per_stage") {
                c.convs_per_stage = parse_num("model.convs_per_stage", &v)?;
            }
            if let Some(v) = raw.take("model", "in_eps") {
                c.in_eps = parse_num("model.in_eps", &v)?;
            }
            ArchDescriptor::Hrnet(c)
        }
        "unet" => {
            let mut c = UnetConfig {
                input_size: size,
                ..UnetConfig::default()
            };
            if let Some(v) = raw.take("model", "input_size") {
                c.input_size = parse_num("model.input_size", &v)?;
            }
            if let Some(v) = raw.take("model", "init_channels") {
                c.init_channels = parse_num("model.init_channels", &v)?;
            }
            if let Some(v) = raw.take("model", "max_channels") {
                c.max_channels = parse_num("model.max_channels", &v)?;
            }
            if let Some(v) = raw.take("model", "in_eps") {
                c.in_eps = parse_num("model.in_eps", &v)?;
            }
            ArchDescriptor::Unet(c)
        }
        other => {
            return Err(Error::Config(format!(
                "model.arch must be hrnet or unet, got {other:?}"
            )));
        }
    };

    // [sim]
    let mut sim = SimConfig::default();
    if let Some(v) = raw.take("sim", "i0") {
        sim.i0 = parse_num("sim.i0", &v)?;
    }
    if let Some(v) = raw.take("sim", "dose_fraction") {
        sim.fraction = parse_num("sim.dose_fraction", &v)?;
    }
    if let Some(v) = raw.take("sim", "n_angles") {
        sim.n_angles = parse_num("sim.n_angles", &v)?;
    }
    if let Some(v) = raw.take("sim", "n_det") {
        sim.n_det = parse_num("sim.n_det", &v)?;
    }

    // [augment]
    let mut augment = AugmentParams::desk(size);
    if let Some(v) = raw.take("augment", "max_translate") {
        augment.max_translate = parse_num("augment.max_translate", &v)?;
    }
    if let Some(v) = raw.take("augment", "rotate_deg") {
        augment.rotate_range_deg = parse_num("augment.rotate_deg", &v)?;
    }
    if let Some(v) = raw.take("augment", "target_size") {
        augment.target_size = parse_num("augment.target_size", &v)?;
    }

    // [optim]
    let lr = match raw.take("optim", "lr") {
        Some(v) => parse_num::<f64>("optim.lr", &v)?,
        None => 1e-4,
    };
    let beta1 = match raw.take("optim", "beta1") {
        Some(v) => parse_num::<f64>("optim.beta1", &v)?,
        None => 0.9,
    };
    let beta2 = match raw.take("optim", "beta2") {
        Some(v) => parse_num::<f64>("optim.beta2", &v)?,
        None => 0.999,
    };
    let eps = match raw.take("optim", "eps") {
        Some(v) => parse_num::<f64>("optim.eps", &v)?,
        None => 1e-8,
    };
    let adam = AdamHyper::new(lr, beta1, beta2, eps)?;
    let milestones = match raw.take("optim", "milestones") {
        Some(v) => Some(parse_milestones(&v)?),
        None => None,
    };

    // [train]
    let iterations = match raw.take("train", "iterations") {
        Some(v) => parse_num::<u64>("train.iterations", &v)?,
        None => 2000,
    };
    let n_train = match raw.take("train", "n_train") {
        Some(v) => parse_num::<usize>("train.n_train", &v)?,
        None => 200,
    };
    let n_val = match raw.take("train", "n_val") {
        Some(v) => parse_num::<usize>("train.n_val", &v)?,
        None => 40,
    };
    let checkpoint_every = match raw.take("train", "checkpoint_every") {
        Some(v) => parse_num::<u64>("train.checkpoint_every", &v)?,
        None => 500,
    };
    let log_every = match raw.take("train", "log_every") {
        Some(v) => parse_num::<u64>("train.log_every", &v)?,
        None => 100,
    };
    let seed = match raw.take("train", "seed") {
        Some(v) => parse_num::<u64>("train.seed", &v)?,
        None => 0,
    };

    // [paths]
    let resolve = |v: String| -> PathBuf {
        let p = PathBuf::from(v);
        if p.is_absolute() {
            p
        } else {
            base_dir.join(p)
        }
    };
    let data_dir = resolve(raw.take("paths", "data").unwrap_or_else(|| "data".into()));
    let ckpt_dir = resolve(
        raw.take("paths", "checkpoints")
            .unwrap_or_else(|| "checkpoints".into()),
    );
    let report_dir = resolve(
        raw.take("paths", "reports")
            .unwrap_or_else(|| "reports".into()),
    );
    let checkpoint_file = raw.take("paths", "checkpoint_file").map(resolve);

    raw.reject_leftovers(path)?;

    let cfg = RunConfig {
        model,
        model_explicit,
        phantom,
        sim,
        augment,
        adam,
        milestones,
        iterations,
        n_train,
        n_val,
        checkpoint_every,
        log_every,
        seed,
        data_dir,
        ckpt_dir,
        report_dir,
        checkpoint_file,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Loads and parses a configuration file.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_config(&text, path, base)
}
