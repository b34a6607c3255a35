//! Normalization, augmentation, and train/validation split logic.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{stream, StreamTag};
use crate::sim::radon::sample_zero_ext;
use crate::sim::{ImageHU, TrainingPair};
use crate::tensor::{Shape4, Tensor};

/// Display-range divisor: stored-HU `[0, 2000]` maps into `[0, 1]`.
pub const NORM_DIVISOR: f64 = 2000.0;

/// Converts a stored-HU slice into a `(1,1,h,w)` tensor scaled by 1/2000.
pub fn normalize(img: &ImageHU) -> Tensor {
    let data: Vec<f64> = img.data().iter().map(|v| v / NORM_DIVISOR).collect();
    Tensor::from_vec(Shape4::new(1, 1, img.h(), img.w()), data)
        .expect("image dimensions are positive")
}

/// Exact inverse of [`normalize`]: scales by 2000 back to stored-HU.
///
/// Accepts `(1,1,h,w)` tensors of either dtype (f32 model outputs are first
/// widened to f64).
pub fn denormalize(t: &Tensor) -> Result<ImageHU> {
    let s = t.shape();
    if s.n != 1 || s.c != 1 {
        return Err(Error::Shape(format!(
            "expected a (1,1,h,w) tensor to denormalize, got {s}"
        )));
    }
    let data: Vec<f64> = t.to_f64_vec().iter().map(|v| v * NORM_DIVISOR).collect();
    ImageHU::new(s.h, s.w, data)
}

/// Augmentation ranges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    /// Maximum absolute translation per axis, in whole pixels.
    pub max_translate: usize,
    /// Maximum absolute rotation, in degrees.
    pub rotate_range_deg: f64,
    /// Output side length; inputs are center-cropped / zero-padded to this.
    pub target_size: usize,
}

impl AugmentParams {
    /// Desk defaults for a given slice size: translate up to a quarter of the
    /// slice, rotate up to 10 degrees, keep the size.
    pub fn desk(size: usize) -> Self {
        Self { max_translate: size / 4, rotate_range_deg: 10.0, target_size: size }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_size == 0 {
            return Err(Error::Config("target size must be positive".into()));
        }
        if self.max_translate >= self.target_size {
            return Err(Error::Config(format!(
                "max translation {} must be smaller than the target size {}",
                self.max_translate, self.target_size
            )));
        }
        if !self.rotate_range_deg.is_finite() || self.rotate_range_deg < 0.0 {
            return Err(Error::Config(format!(
                "rotation range must be non-negative, got {}",
                self.rotate_range_deg
            )));
        }
        Ok(())
    }
}

/// The single geometric transform applied to every image of one pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    /// Content shift along rows (positive moves content down).
    pub dy: isize,
    /// Content shift along columns (positive moves content right).
    pub dx: isize,
    /// Rotation in degrees.
    pub theta_deg: f64,
}

/// Draws the transform parameters for one pair. [`augment`] draws exactly
/// once and applies the same transform to all images, so the pair stays
/// geometrically consistent.
pub fn draw_augment(p: &AugmentParams, seed: u64) -> AugmentDraw {
    let mut rng = stream(seed, StreamTag::Augment, 0);
    let m = p.max_translate as i64;
    let dy = rng.random_range(-m..=m) as isize;
    let dx = rng.random_range(-m..=m) as isize;
    let theta_deg = if p.rotate_range_deg == 0.0 {
        0.0
    } else {
        rng.random_range(-p.rotate_range_deg..=p.rotate_range_deg)
    };
    AugmentDraw { dy, dx, theta_deg }
}

fn translate(img: &ImageHU, dy: isize, dx: isize) -> ImageHU {
    if dy == 0 && dx == 0 {
        return img.clone();
    }
    let (h, w) = (img.h(), img.w());
    let mut data = vec![0.0; h * w];
    for r in 0..h {
        let sr = r as isize - dy;
        if sr < 0 || sr >= h as isize {
            continue;
        }
        for c in 0..w {
            let sc = c as isize - dx;
            if sc < 0 || sc >= w as isize {
                continue;
            }
            data[r * w + c] = img.at(sr as usize, sc as usize);
        }
    }
    ImageHU::new(h, w, data).expect("translation preserves finiteness")
}

fn rotate(img: &ImageHU, theta_deg: f64) -> ImageHU {
    // Exactly zero rotation takes no resampling path at all.
    if theta_deg == 0.0 {
        return img.clone();
    }
    let (h, w) = (img.h(), img.w());
    let cr = (h as f64 - 1.0) / 2.0;
    let cc = (w as f64 - 1.0) / 2.0;
    let (sin_t, cos_t) = theta_deg.to_radians().sin_cos();
    let mut data = vec![0.0; h * w];
    for r in 0..h {
        let dy = r as f64 - cr;
        for c in 0..w {
            let dx = c as f64 - cc;
            // Inverse rotation of the destination coordinate.
            let sx = dx * cos_t + dy * sin_t;
            let sy = -dx * sin_t + dy * cos_t;
            data[r * w + c] = sample_zero_ext(img.data(), h, w, sy + cr, sx + cc);
        }
    }
    ImageHU::new(h, w, data).expect("rotation preserves finiteness")
}

fn crop_or_pad(img: &ImageHU, target: usize) -> ImageHU {
    let (h, w) = (img.h(), img.w());
    if h == target && w == target {
        return img.clone();
    }
    let off_r = (h as isize - target as isize).div_euclid(2);
    let off_c = (w as isize - target as isize).div_euclid(2);
    let mut data = vec![0.0; target * target];
    for r in 0..target {
        let sr = r as isize + off_r;
        if sr < 0 || sr >= h as isize {
            continue;
        }
        for c in 0..target {
            let sc = c as isize + off_c;
            if sc < 0 || sc >= w as isize {
                continue;
            }
            data[r * target + c] = img.at(sr as usize, sc as usize);
        }
    }
    ImageHU::new(target, target, data).expect("crop/pad preserves finiteness")
}

/// Applies one drawn transform: integer translation, rotation about the
/// center (bilinear, zero fill), then center crop / zero-pad to
/// `target_size`.
pub fn apply_geometry(img: &ImageHU, draw: &AugmentDraw, target_size: usize) -> ImageHU {
    let moved = translate(img, draw.dy, draw.dx);
    let turned = rotate(&moved, draw.theta_deg);
    crop_or_pad(&turned, target_size)
}

/// Augments a pair with one shared geometric transform.
///
/// `ldct`, `ndct` and `clean` are transformed identically; the noise fields
/// are then *recomputed by subtraction* (interpolation would otherwise break
/// the pair algebra), and the stored `ndct`/`ldct` are re-composed as
/// `clean + target` / `ndct + added` so the decomposition stays bit-exact.
pub fn augment(pair: &TrainingPair, p: &AugmentParams, seed: u64) -> Result<TrainingPair> {
    p.validate()?;
    let draw = draw_augment(p, seed);
    let clean = apply_geometry(&pair.clean, &draw, p.target_size);
    let t_ndct = apply_geometry(&pair.ndct, &draw, p.target_size);
    let t_ldct = apply_geometry(&pair.ldct, &draw, p.target_size);

    let target_noise = t_ndct.sub(&clean)?;
    let ndct = clean.add(&target_noise)?;
    let added_noise = t_ldct.sub(&ndct)?;
    let ldct = ndct.add(&added_noise)?;
    Ok(TrainingPair { ldct, ndct, clean, added_noise, target_noise })
}

/// Reproducible train/validation assignment of pair stems.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub seed: u64,
}

/// Shuffles the stems deterministically and assigns the first
/// `ceil(ratio * n)` to the training split.
pub fn split_manifest(stems: &[String], ratio: f64, seed: u64) -> Result<DatasetManifest> {
    if stems.is_empty() {
        return Err(Error::Config("cannot split an empty stem list".into()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let mut sorted = stems.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config("stem list contains duplicates".into()));
    }
    let mut shuffled = stems.to_vec();
    let mut rng = stream(seed, StreamTag::Sample, 0);
    shuffled.shuffle(&mut rng);
    // Ceiling with a small guard against floating-point noise in ratio*n
    // (e.g. 0.8*10 evaluating to 8.000000000000002).
    let n = shuffled.len();
    let n_train = ((ratio * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let n_train = n_train.min(n);
    let val = shuffled.split_off(n_train);
    Ok(DatasetManifest { train: shuffled, val, seed })
}

/// Serializes a manifest (`# seed=` header, `[train]` / `[val]` sections,
/// one stem per line).
pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let mut text = String::new();
    let _ = writeln!(text, "# seed={}", manifest.seed);
    let _ = writeln!(text, "[train]");
    for stem in &manifest.train {
        let _ = writeln!(text, "{stem}");
    }
    let _ = writeln!(text, "[val]");
    for stem in &manifest.val {
        let _ = writeln!(text, "{stem}");
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses a manifest written by [`write_manifest`].
pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut seed: Option<u64> = None;
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut current: Option<&mut Vec<String>> = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("# seed=") {
            let parsed = rest
                .trim()
                .parse::<u64>()
                .map_err(|e| Error::format(path, format!("line {}: bad seed: {e}", lineno + 1)))?;
            seed = Some(parsed);
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        match line {
            "[train]" => current = Some(&mut train),
            "[val]" => current = Some(&mut val),
            _ if line.starts_with('[') => {
                return Err(Error::format(
                    path,
                    format!("line {}: unknown section {line}", lineno + 1),
                ));
            }
            stem => match current.as_deref_mut() {
                Some(section) => section.push(stem.to_string()),
                None => {
                    return Err(Error::format(
                        path,
                        format!("line {}: stem {stem} appears before any section", lineno + 1),
                    ));
                }
            },
        }
    }
    let seed = seed.ok_or_else(|| Error::format(path, "missing '# seed=' header"))?;
    Ok(DatasetManifest { train, val, seed })
}
