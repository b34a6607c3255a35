//! Desk-scale paired-slice CT simulator.
//!
//! Produces paired low-dose / normal-dose / clean slices from random ellipse
//! phantoms: parallel-beam forward projection, dose-dependent Poisson noise in
//! the projection domain, and ramp-filtered backprojection. The pair carries
//! both noise fields (`target_noise` = NDCT − clean, `added_noise` =
//! LDCT − NDCT) so downstream analysis can decompose what a denoiser removes.
//!
//! Images use the stored-HU convention (HU + 1000: air ≈ 0, water ≈ 1000).

pub mod fbp;
pub mod noise;
pub mod phantom;
pub mod radon;
pub mod slice_io;

pub use fbp::fbp;
pub use noise::{insert_noise, make_ldct_from_ndct};
pub use phantom::{make_phantom, sample_ellipses, Ellipse, PhantomSpec};
pub use radon::radon;

use crate::error::{Error, Result};

/// Linear attenuation assigned to water, per pixel of path length.
///
/// Keeps line integrals of desk-sized phantoms in roughly `[0, 5]`, so
/// simulated photon counts stay well above zero at the default dose.
pub const MU_WATER_PER_PIXEL: f64 = 0.02;

/// Stored-HU value of water (the shifted scale stores HU + 1000).
pub const WATER_STORED_HU: f64 = 1000.0;

/// A 2-D slice in stored-HU units (HU shifted by +1000).
///
/// All values are finite by construction; `new` rejects NaN/infinity.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageHU {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl ImageHU {
    /// Builds an image from row-major data, validating size and finiteness.
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::Shape(format!("image dimensions must be positive, got {h}x{w}")));
        }
        if data.len() != h * w {
            return Err(Error::Shape(format!(
                "image data length {} does not match {h}x{w}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Shape(format!("image contains non-finite value {bad}")));
        }
        Ok(Self { h, w, data })
    }

    /// All-zero image (air everywhere).
    pub fn zeros(h: usize, w: usize) -> Result<Self> {
        Self::new(h, w, vec![0.0; h * w])
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Value at (row, col). Panics on out-of-bounds indices.
    pub fn at(&self, r: usize, c: usize) -> f64 {
        assert!(r < self.h && c < self.w, "pixel ({r},{c}) out of {}x{}", self.h, self.w);
        self.data[r * self.w + c]
    }

    fn same_shape(&self, other: &Self) -> Result<()> {
        if self.h != other.h || self.w != other.w {
            return Err(Error::Shape(format!(
                "image shapes differ: {}x{} vs {}x{}",
                self.h, other.h, self.w, other.w
            )));
        }
        Ok(())
    }

    /// Element-wise sum.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Self::new(self.h, self.w, data)
    }

    /// Element-wise difference (`self − other`).
    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Self::new(self.h, self.w, data)
    }
}

/// Parallel-beam sinogram: line integrals indexed by (angle, detector).
///
/// Angles are implicit and uniform over `[0, pi)`: `angle(i) = i*pi/n_angles`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    n_angles: usize,
    n_det: usize,
    data: Vec<f64>,
}

impl Sinogram {
    /// Builds a sinogram from row-major (angle-major) data.
    pub fn new(n_angles: usize, n_det: usize, data: Vec<f64>) -> Result<Self> {
        if n_angles == 0 || n_det == 0 {
            return Err(Error::Shape(format!(
                "sinogram dimensions must be positive, got {n_angles} angles x {n_det} detectors"
            )));
        }
        if data.len() != n_angles * n_det {
            return Err(Error::Shape(format!(
                "sinogram data length {} does not match {n_angles}x{n_det}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Shape(format!("sinogram contains non-finite value {bad}")));
        }
        Ok(Self { n_angles, n_det, data })
    }

    pub fn n_angles(&self) -> usize {
        self.n_angles
    }

    pub fn n_det(&self) -> usize {
        self.n_det
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Projection angle of row `i`, in radians.
    pub fn angle(&self, i: usize) -> f64 {
        assert!(i < self.n_angles, "angle index {i} out of {}", self.n_angles);
        i as f64 * std::f64::consts::PI / self.n_angles as f64
    }

    /// Line integral at (angle index, detector index). Panics out of bounds.
    pub fn at(&self, a: usize, d: usize) -> f64 {
        assert!(
            a < self.n_angles && d < self.n_det,
            "sample ({a},{d}) out of {}x{}",
            self.n_angles,
            self.n_det
        );
        self.data[a * self.n_det + d]
    }
}

/// Acquisition/noise parameters for pair generation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    /// Full-dose photon count per detector sample (unattenuated).
    pub i0: f64,
    /// Low-dose fraction in (0, 1); the normal-dose arm always uses 1.
    pub fraction: f64,
    /// Number of projection angles, uniform over `[0, pi)`.
    pub n_angles: usize,
    /// Number of detector elements (1-pixel spacing, centered).
    pub n_det: usize,
}

impl Default for SimConfig {
    /// Desk defaults for 64x64 slices: quarter dose at 1e5 counts, 90 angles,
    /// 96 detectors (1.5x the slice width, covering the diagonal).
    fn default() -> Self {
        Self { i0: 1e5, fraction: 0.25, n_angles: 90, n_det: 96 }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.i0.is_finite() || self.i0 <= 0.0 {
            return Err(Error::Config(format!("i0 must be positive, got {}", self.i0)));
        }
        if !self.fraction.is_finite() || self.fraction <= 0.0 || self.fraction >= 1.0 {
            return Err(Error::Config(format!(
                "dose fraction must lie in (0, 1), got {}",
                self.fraction
            )));
        }
        if self.n_angles == 0 || self.n_det == 0 {
            return Err(Error::Config(format!(
                "n_angles and n_det must be positive, got {} and {}",
                self.n_angles, self.n_det
            )));
        }
        Ok(())
    }
}

/// One paired training sample plus its noise decomposition.
///
/// The algebra holds bit-exactly by construction:
/// `ndct == clean + target_noise` and `ldct == ndct + added_noise`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    /// Low-dose reconstruction (network input).
    pub ldct: ImageHU,
    /// Normal-dose reconstruction (training target).
    pub ndct: ImageHU,
    /// Noiseless phantom.
    pub clean: ImageHU,
    /// `ldct − ndct`: the extra simulated low-dose noise.
    pub added_noise: ImageHU,
    /// `ndct − clean`: the noise inherited from the normal-dose scan.
    pub target_noise: ImageHU,
}

/// Generates one training pair from a phantom description.
///
/// Pipeline: phantom → forward projection → full-dose Poisson noise → FBP
/// (the NDCT arm); the LDCT sinogram adds the incremental low-dose noise on
/// top of the NDCT sinogram so the target-noise/added-noise decomposition is
/// exact. The noise-field images are derived by subtraction, and the stored
/// `ndct`/`ldct` are re-composed as `clean + target` / `ndct + added` so the
/// pair algebra holds bit-exactly.
///
/// All randomness derives from `seed` via per-sample streams, so generation
/// is deterministic and order-independent.
pub fn gen_pair(spec: &PhantomSpec, sim: &SimConfig, seed: u64) -> Result<TrainingPair> {
    sim.validate()?;
    let clean = make_phantom(spec, seed);
    let clean_sino = radon(&clean, sim.n_angles, sim.n_det)?;
    let ndct_sino = insert_noise(&clean_sino, sim.i0, 1.0, seed)?;
    let ndct_fbp = fbp(&ndct_sino, spec.size())?;
    let ldct_sino = make_ldct_from_ndct(&ndct_sino, &clean_sino, sim.i0, sim.fraction, seed)?;
    let ldct_fbp = fbp(&ldct_sino, spec.size())?;

    let target_noise = ndct_fbp.sub(&clean)?;
    let ndct = clean.add(&target_noise)?;
    let added_noise = ldct_fbp.sub(&ndct)?;
    let ldct = ndct.add(&added_noise)?;
    Ok(TrainingPair { ldct, ndct, clean, added_noise, target_noise })
}
