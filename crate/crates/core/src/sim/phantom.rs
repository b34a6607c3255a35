//! Random ellipse phantoms on a water-cylinder background.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{stream, StreamTag};
use crate::sim::{ImageHU, WATER_STORED_HU};

/// Supersampling grid per pixel axis: each pixel is averaged over an 8x8 grid
/// of sub-samples so object boundaries get fractional coverage instead of
/// hard staircase edges. 8x8 keeps the rasterized disk rotationally symmetric
/// to well under half a percent in projection space.
const SUPERSAMPLE: usize = 8;

/// Relative semi-axis range for regular ellipses, as a fraction of the disk
/// radius.
const AXIS_FRAC: (f64, f64) = (0.05, 0.25);

/// Relative major semi-axis range for the low-contrast lesion; with aspect
/// ratio at most 1 this caps the lesion area at 0.81% of the disk area.
const LESION_AXIS_FRAC: (f64, f64) = (0.03, 0.09);

/// Lesion contrast range in stored-HU.
const LESION_CONTRAST: (f64, f64) = (20.0, 40.0);

/// Margin in pixels kept between any ellipse and the inscribed circle.
const MARGIN_PX: f64 = 1.0;

/// Description of one random phantom.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    n_ellipses: usize,
    atten_lo: f64,
    atten_hi: f64,
    size: usize,
    lesion: bool,
}

impl PhantomSpec {
    /// Validates and builds a phantom description.
    ///
    /// `atten_range` is the additive contrast range of the random ellipses in
    /// stored-HU, relative to the water background. `lesion` requests one
    /// extra small low-contrast ellipse (contrast 20-40 stored-HU, area at
    /// most 1% of the disk).
    pub fn new(
        n_ellipses: usize,
        atten_range: (f64, f64),
        size: usize,
        lesion: bool,
    ) -> Result<Self> {
        if size < 32 {
            return Err(Error::Config(format!("phantom size must be at least 32, got {size}")));
        }
        let (lo, hi) = atten_range;
        if !lo.is_finite() || !hi.is_finite() || lo > hi {
            return Err(Error::Config(format!(
                "attenuation range must be finite with lo <= hi, got [{lo}, {hi}]"
            )));
        }
        Ok(Self { n_ellipses, atten_lo: lo, atten_hi: hi, size, lesion })
    }

    pub fn n_ellipses(&self) -> usize {
        self.n_ellipses
    }

    pub fn atten_range(&self) -> (f64, f64) {
        (self.atten_lo, self.atten_hi)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn lesion(&self) -> bool {
        self.lesion
    }

    /// Radius of the water disk: the circle inscribed in the square slice.
    pub fn disk_radius(&self) -> f64 {
        self.size as f64 / 2.0
    }
}

/// One constant-attenuation ellipse, in pixel coordinates relative to the
/// image center (x along columns, y along rows).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    /// Center offset from the image center.
    pub cx: f64,
    pub cy: f64,
    /// Semi-axes in pixels (`a` along the rotated x axis).
    pub a: f64,
    pub b: f64,
    /// Rotation in radians.
    pub phi: f64,
    /// Additive contrast in stored-HU.
    pub contrast: f64,
    /// Whether this is the requested low-contrast lesion.
    pub lesion: bool,
}

impl Ellipse {
    /// True when the point (x, y) lies inside or on the ellipse boundary.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let (s, c) = self.phi.sin_cos();
        let xr = dx * c + dy * s;
        let yr = -dx * s + dy * c;
        let u = xr / self.a;
        let v = yr / self.b;
        u * u + v * v <= 1.0
    }

    /// Largest center distance from the image center at which the ellipse is
    /// still guaranteed inside a circle of radius `r` (conservative: uses the
    /// major semi-axis).
    fn max_center_radius(&self, r: f64) -> f64 {
        (r - self.a.max(self.b) - MARGIN_PX).max(0.0)
    }
}

fn sample_one(spec: &PhantomSpec, seed: u64, index: u64, lesion: bool) -> Ellipse {
    let mut rng = stream(seed, StreamTag::Phantom, index);
    let r_disk = spec.disk_radius();
    let (a, b, contrast) = if lesion {
        let a = rng.random_range(LESION_AXIS_FRAC.0..=LESION_AXIS_FRAC.1) * r_disk;
        let aspect = rng.random_range(0.6..=1.0);
        let contrast = rng.random_range(LESION_CONTRAST.0..=LESION_CONTRAST.1);
        (a, a * aspect, contrast)
    } else {
        let a = rng.random_range(AXIS_FRAC.0..=AXIS_FRAC.1) * r_disk;
        let b = rng.random_range(AXIS_FRAC.0..=AXIS_FRAC.1) * r_disk;
        let contrast = rng.random_range(spec.atten_lo..=spec.atten_hi);
        (a, b, contrast)
    };
    let phi = rng.random_range(0.0..std::f64::consts::PI);
    let mut e = Ellipse { cx: 0.0, cy: 0.0, a, b, phi, contrast, lesion };
    // Uniform center position over the disk of admissible centers.
    let r_max = e.max_center_radius(r_disk);
    let rho = rng.random_range(0.0_f64..=1.0).sqrt() * r_max;
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    e.cx = rho * theta.cos();
    e.cy = rho * theta.sin();
    e
}

/// Samples the ellipse list a phantom is built from (introspection hook:
/// `make_phantom` rasterizes exactly this list).
///
/// Regular ellipses come first; if the lesion flag is set, exactly one extra
/// lesion ellipse is appended.
pub fn sample_ellipses(spec: &PhantomSpec, seed: u64) -> Vec<Ellipse> {
    let mut out = Vec::with_capacity(spec.n_ellipses + usize::from(spec.lesion));
    for i in 0..spec.n_ellipses {
        out.push(sample_one(spec, seed, i as u64, false));
    }
    if spec.lesion {
        out.push(sample_one(spec, seed, spec.n_ellipses as u64, true));
    }
    out
}

/// Renders the phantom: a water disk (interior 1000, exterior 0 stored-HU)
/// plus the sampled constant-contrast ellipses, averaged over a 4x4
/// sub-pixel grid. Deterministic given (spec, seed).
pub fn make_phantom(spec: &PhantomSpec, seed: u64) -> ImageHU {
    let ellipses = sample_ellipses(spec, seed);
    let size = spec.size();
    let r_disk = spec.disk_radius();
    let r2 = r_disk * r_disk;
    let center = (size as f64 - 1.0) / 2.0;
    let inv_ss = 1.0 / SUPERSAMPLE as f64;
    let norm = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;

    let mut data = vec![0.0; size * size];
    for r in 0..size {
        for c in 0..size {
            let mut acc = 0.0;
            for sr in 0..SUPERSAMPLE {
                let y = r as f64 + (sr as f64 + 0.5) * inv_ss - 0.5 - center;
                for sc in 0..SUPERSAMPLE {
                    let x = c as f64 + (sc as f64 + 0.5) * inv_ss - 0.5 - center;
                    if x * x + y * y <= r2 {
                        let mut v = WATER_STORED_HU;
                        for e in &ellipses {
                            if e.contains(x, y) {
                                v += e.contrast;
                            }
                        }
                        acc += v;
                    }
                }
            }
            data[r * size + c] = acc * norm;
        }
    }
    ImageHU::new(size, size, data).expect("phantom rasterization produces finite values")
}
