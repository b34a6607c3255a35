//! Fourier-domain decomposition of what a denoiser removed.
//!
//! The removed noise (`ldct − denoised`) is compared against the pair's added
//! and target noise fields on the high-frequency band: both axes' angular
//! frequencies run over `(-pi, pi]`, and a bin is kept when either axis
//! reaches the cutoff (Chebyshev band, default `150*pi/256`). Cosine
//! correlations, projection percentages, and the unexplained residual energy
//! are all evaluated on the band-filtered images.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fft::fft1_inplace;
use crate::sim::{ImageHU, TrainingPair};

/// 2-D spectrum, DC at index (0,0), unnormalized forward transform.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    h: usize,
    w: usize,
    data: Vec<Complex64>,
}

impl Spectrum {
    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    /// Coefficient at (row bin, column bin). Panics out of bounds.
    pub fn at(&self, kr: usize, kc: usize) -> Complex64 {
        assert!(kr < self.h && kc < self.w, "bin ({kr},{kc}) out of {}x{}", self.h, self.w);
        self.data[kr * self.w + kc]
    }
}

/// High-pass band description.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HighpassSpec {
    /// Angular cutoff in radians; bins with `max(|w_r|, |w_c|) >= cutoff`
    /// are kept.
    pub cutoff: f64,
}

impl Default for HighpassSpec {
    fn default() -> Self {
        Self { cutoff: 150.0 * std::f64::consts::PI / 256.0 }
    }
}

impl HighpassSpec {
    pub fn new(cutoff: f64) -> Result<Self> {
        if !cutoff.is_finite() || !(0.0..=std::f64::consts::PI).contains(&cutoff) {
            return Err(Error::Config(format!(
                "high-pass cutoff must lie in [0, pi], got {cutoff}"
            )));
        }
        Ok(Self { cutoff })
    }
}

fn require_power_of_two(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_power_of_two() || !w.is_power_of_two() {
        return Err(Error::Unsupported(format!(
            "2-D FFT supports power-of-two dimensions only, got {h}x{w}"
        )));
    }
    Ok(())
}

fn fft2_data(data: &mut [Complex64], h: usize, w: usize, inverse: bool) -> Result<()> {
    require_power_of_two(h, w)?;
    for row in data.chunks_mut(w) {
        fft1_inplace(row, inverse)?;
    }
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for c in 0..w {
        for r in 0..h {
            col[r] = data[r * w + c];
        }
        fft1_inplace(&mut col, inverse)?;
        for r in 0..h {
            data[r * w + c] = col[r];
        }
    }
    Ok(())
}

/// Unnormalized forward 2-D DFT (rows, then columns).
pub fn fft2(img: &ImageHU) -> Result<Spectrum> {
    let (h, w) = (img.h(), img.w());
    let mut data: Vec<Complex64> =
        img.data().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2_data(&mut data, h, w, false)?;
    Ok(Spectrum { h, w, data })
}

/// Inverse 2-D DFT with the `1/(h*w)` scaling; returns the complex image.
pub fn ifft2(spec: &Spectrum) -> Result<Vec<Complex64>> {
    let mut data = spec.data.clone();
    fft2_data(&mut data, spec.h, spec.w, true)?;
    Ok(data)
}

/// Signed frequency index: bins above `n/2` alias to negative frequencies.
fn signed_bin(k: usize, n: usize) -> i64 {
    if k <= n / 2 {
        k as i64
    } else {
        k as i64 - n as i64
    }
}

/// Binary keep-mask of the high-frequency band, row-major `h*w`.
///
/// Bin `(kr, kc)` carries angular frequencies `w = 2*pi*k_signed/n` per axis
/// and is kept when `max(|w_r|, |w_c|) >= cutoff`.
pub fn highpass_mask(h: usize, w: usize, spec: &HighpassSpec) -> Vec<bool> {
    let mut mask = vec![false; h * w];
    for kr in 0..h {
        let wr = 2.0 * std::f64::consts::PI * signed_bin(kr, h).abs() as f64 / h as f64;
        for kc in 0..w {
            let wc = 2.0 * std::f64::consts::PI * signed_bin(kc, w).abs() as f64 / w as f64;
            mask[kr * w + kc] = wr.max(wc) >= spec.cutoff;
        }
    }
    mask
}

/// Band-limits an image to the kept high-frequency bins:
/// `ifft2(mask * fft2(img))`, real part.
///
/// The mask is symmetric in frequency, so a real input stays real; the
/// imaginary residue is checked against `1e-9` of the signal norm.
pub fn highfreq_component(img: &ImageHU, spec: &HighpassSpec) -> Result<ImageHU> {
    let mut s = fft2(img)?;
    let mask = highpass_mask(s.h, s.w, spec);
    for (v, &keep) in s.data.iter_mut().zip(&mask) {
        if !keep {
            *v = Complex64::new(0.0, 0.0);
        }
    }
    let complex = ifft2(&s)?;
    let real_sq: f64 = complex.iter().map(|c| c.re * c.re).sum();
    let imag_sq: f64 = complex.iter().map(|c| c.im * c.im).sum();
    if imag_sq.sqrt() > 1e-9 * real_sq.sqrt() {
        return Err(Error::Contract(format!(
            "band-limited real image has imaginary residue {} vs real norm {}",
            imag_sq.sqrt(),
            real_sq.sqrt()
        )));
    }
    ImageHU::new(img.h(), img.w(), complex.into_iter().map(|c| c.re).collect())
}

fn dot(a: &ImageHU, b: &ImageHU) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn check_same_shape(a: &ImageHU, b: &ImageHU) -> Result<()> {
    if a.h() != b.h() || a.w() != b.w() {
        return Err(Error::Shape(format!(
            "images must share a shape, got {}x{} vs {}x{}",
            a.h(),
            a.w(),
            b.h(),
            b.w()
        )));
    }
    Ok(())
}

const NORM_FLOOR: f64 = 1e-12;

/// Cosine of the angle between two images' high-frequency components.
pub fn cosine_corr_highfreq(n1: &ImageHU, n2: &ImageHU, spec: &HighpassSpec) -> Result<f64> {
    check_same_shape(n1, n2)?;
    let h1 = highfreq_component(n1, spec)?;
    let h2 = highfreq_component(n2, spec)?;
    let norm1 = dot(&h1, &h1).sqrt();
    let norm2 = dot(&h2, &h2).sqrt();
    if norm1 < NORM_FLOOR || norm2 < NORM_FLOOR {
        return Err(Error::Degenerate(format!(
            "cosine correlation undefined: high-frequency norms {norm1} and {norm2}"
        )));
    }
    Ok(dot(&h1, &h2) / (norm1 * norm2))
}

/// Projection coefficient of `r` along `onto` (high-frequency components),
/// as a percentage: `100 * <h_r, h_onto> / <h_onto, h_onto>`.
///
/// This is the coefficient along the target vector, so `r == onto` gives
/// exactly 100 and values above 100 are possible.
pub fn projection_pct(r: &ImageHU, onto: &ImageHU, spec: &HighpassSpec) -> Result<f64> {
    check_same_shape(r, onto)?;
    let hr = highfreq_component(r, spec)?;
    let ho = highfreq_component(onto, spec)?;
    let denom = dot(&ho, &ho);
    if denom.sqrt() < NORM_FLOOR {
        return Err(Error::Degenerate(format!(
            "projection undefined: target high-frequency norm {}",
            denom.sqrt()
        )));
    }
    Ok(100.0 * dot(&hr, &ho) / denom)
}

/// Energy of `r` left unexplained after removing its projections onto `a`
/// and `t` separately, as a percentage of the energy of `r` (all on
/// high-frequency components).
pub fn residual_energy_pct(
    r: &ImageHU,
    a: &ImageHU,
    t: &ImageHU,
    spec: &HighpassSpec,
) -> Result<f64> {
    check_same_shape(r, a)?;
    check_same_shape(r, t)?;
    let hr = highfreq_component(r, spec)?;
    let ha = highfreq_component(a, spec)?;
    let ht = highfreq_component(t, spec)?;
    let rr = dot(&hr, &hr);
    let aa = dot(&ha, &ha);
    let tt = dot(&ht, &ht);
    if rr.sqrt() < NORM_FLOOR || aa.sqrt() < NORM_FLOOR || tt.sqrt() < NORM_FLOOR {
        return Err(Error::Degenerate(format!(
            "residual energy undefined: high-frequency norms {} / {} / {}",
            rr.sqrt(),
            aa.sqrt(),
            tt.sqrt()
        )));
    }
    let ca = dot(&hr, &ha) / aa;
    let ct = dot(&hr, &ht) / tt;
    let mut e_sq = 0.0;
    for ((&vr, &va), &vt) in hr.data().iter().zip(ha.data()).zip(ht.data()) {
        let e = vr - ca * va - ct * vt;
        e_sq += e * e;
    }
    Ok(100.0 * e_sq / rr)
}

/// The noise-structure summary of one denoised pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseReport {
    /// cos(removed, added)
    pub cos_ra: f64,
    /// cos(removed, target)
    pub cos_rt: f64,
    /// cos(target, added)
    pub cos_ta: f64,
    /// projection of removed onto added, percent
    pub proj_added_pct: f64,
    /// projection of removed onto target, percent
    pub proj_target_pct: f64,
    /// unexplained energy, percent of removed
    pub residual_pct: f64,
}

/// CSV header for serialized noise reports.
pub const CSV_HEADER: &str =
    "pair_id,cos_ra,cos_rt,cos_ta,proj_added_pct,proj_target_pct,residual_pct";

impl NoiseReport {
    /// One CSV line (without the id column handled by the caller context).
    pub fn csv_row(&self, id: &str) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            id,
            self.cos_ra,
            self.cos_rt,
            self.cos_ta,
            self.proj_added_pct,
            self.proj_target_pct,
            self.residual_pct
        )
    }

    /// Field-wise arithmetic mean of several reports.
    pub fn mean_of(reports: &[NoiseReport]) -> Result<NoiseReport> {
        if reports.is_empty() {
            return Err(Error::Config("cannot average zero noise reports".into()));
        }
        let n = reports.len() as f64;
        Ok(NoiseReport {
            cos_ra: reports.iter().map(|r| r.cos_ra).sum::<f64>() / n,
            cos_rt: reports.iter().map(|r| r.cos_rt).sum::<f64>() / n,
            cos_ta: reports.iter().map(|r| r.cos_ta).sum::<f64>() / n,
            proj_added_pct: reports.iter().map(|r| r.proj_added_pct).sum::<f64>() / n,
            proj_target_pct: reports.iter().map(|r| r.proj_target_pct).sum::<f64>() / n,
            residual_pct: reports.iter().map(|r| r.residual_pct).sum::<f64>() / n,
        })
    }
}

/// Analyzes one pair against its denoised output.
///
/// `removed = ldct − denoised`; every report field is computed on the
/// high-frequency band. Degenerate inputs (e.g. a denoiser that returned the
/// input unchanged, making `removed` zero) surface as errors.
pub fn analyze_pair(
    pair: &TrainingPair,
    denoised: &ImageHU,
    spec: &HighpassSpec,
) -> Result<NoiseReport> {
    let removed = pair.ldct.sub(denoised)?;
    Ok(NoiseReport {
        cos_ra: cosine_corr_highfreq(&removed, &pair.added_noise, spec)?,
        cos_rt: cosine_corr_highfreq(&removed, &pair.target_noise, spec)?,
        cos_ta: cosine_corr_highfreq(&pair.target_noise, &pair.added_noise, spec)?,
        proj_added_pct: projection_pct(&removed, &pair.added_noise, spec)?,
        proj_target_pct: projection_pct(&removed, &pair.target_noise, spec)?,
        residual_pct: residual_energy_pct(
            &removed,
            &pair.added_noise,
            &pair.target_noise,
            spec,
        )?,
    })
}
