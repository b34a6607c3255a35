//! Parallel-beam forward projection (Radon transform) of stored-HU slices.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::sim::{ImageHU, Sinogram, MU_WATER_PER_PIXEL, WATER_STORED_HU};

/// Integration step along each ray, in pixels.
const RAY_STEP: f64 = 0.5;

/// Converts stored-HU to linear attenuation per pixel of path length.
pub fn stored_to_mu(stored: f64) -> f64 {
    MU_WATER_PER_PIXEL * stored / WATER_STORED_HU
}

/// Converts linear attenuation per pixel back to stored-HU.
pub fn mu_to_stored(mu: f64) -> f64 {
    mu * WATER_STORED_HU / MU_WATER_PER_PIXEL
}

/// Bilinear sample of a row-major plane with zero extension outside the grid.
pub(crate) fn sample_zero_ext(data: &[f64], h: usize, w: usize, rc: f64, cc: f64) -> f64 {
    let r0 = rc.floor();
    let c0 = cc.floor();
    let fr = rc - r0;
    let fc = cc - c0;
    let r0 = r0 as isize;
    let c0 = c0 as isize;
    let mut acc = 0.0;
    for (dr, wr) in [(0isize, 1.0 - fr), (1, fr)] {
        let r = r0 + dr;
        if wr == 0.0 || r < 0 || r >= h as isize {
            continue;
        }
        for (dc, wc) in [(0isize, 1.0 - fc), (1, fc)] {
            let c = c0 + dc;
            if wc == 0.0 || c < 0 || c >= w as isize {
                continue;
            }
            acc += wr * wc * data[r as usize * w + c as usize];
        }
    }
    acc
}

/// Parallel-beam Radon transform.
///
/// Rays are parameterized by angle `theta_i = i*pi/n_angles` and detector
/// offset `t_j = j - (n_det-1)/2` (1-pixel detector spacing, centered on the
/// image center). The line integral of the attenuation map (stored-HU scaled
/// to attenuation per pixel) is accumulated with half-pixel steps and
/// bilinear sampling, zero outside the slice.
pub fn radon(img: &ImageHU, n_angles: usize, n_det: usize) -> Result<Sinogram> {
    if n_angles == 0 || n_det == 0 {
        return Err(Error::Config(format!(
            "n_angles and n_det must be positive, got {n_angles} and {n_det}"
        )));
    }
    let h = img.h();
    let w = img.w();
    let mu: Vec<f64> = img.data().iter().map(|&v| stored_to_mu(v)).collect();
    let center_r = (h as f64 - 1.0) / 2.0;
    let center_c = (w as f64 - 1.0) / 2.0;
    // Rays are traced over the full slice diagonal (plus margin) so every
    // in-slice contribution is integrated regardless of angle.
    let half_span = (h as f64).hypot(w as f64) / 2.0 + 1.0;
    let n_steps = (2.0 * half_span / RAY_STEP).ceil() as usize + 1;
    let det_center = (n_det as f64 - 1.0) / 2.0;

    let mut data = vec![0.0; n_angles * n_det];
    data.par_chunks_mut(n_det).enumerate().for_each(|(a, row)| {
        let theta = a as f64 * std::f64::consts::PI / n_angles as f64;
        let (sin_t, cos_t) = theta.sin_cos();
        for (j, out) in row.iter_mut().enumerate() {
            let t = j as f64 - det_center;
            // Ray point: (x, y) = t*(cos, sin) + u*(-sin, cos).
            let mut acc = 0.0;
            for k in 0..n_steps {
                let u = -half_span + k as f64 * RAY_STEP;
                let x = t * cos_t - u * sin_t;
                let y = t * sin_t + u * cos_t;
                acc += sample_zero_ext(&mu, h, w, y + center_r, x + center_c);
            }
            *out = acc * RAY_STEP;
        }
    });
    Sinogram::new(n_angles, n_det, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::phantom::{make_phantom, PhantomSpec};

    #[test]
    fn zero_image_gives_zero_sinogram() {
        let img = ImageHU::zeros(40, 40).unwrap();
        let sino = radon(&img, 10, 48).unwrap();
        assert!(sino.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_empty_geometry() {
        let img = ImageHU::zeros(40, 40).unwrap();
        assert!(matches!(radon(&img, 0, 48), Err(Error::Config(_))));
        assert!(matches!(radon(&img, 10, 0), Err(Error::Config(_))));
    }

    #[test]
    fn central_ray_matches_analytic_chord() {
        // Water disk of radius R: the central ray crosses a chord of length
        // 2R, so its line integral is 2*R*mu_water.
        for size in [32usize, 64, 128] {
            let spec = PhantomSpec::new(0, (0.0, 0.0), size, false).unwrap();
            let img = make_phantom(&spec, 0);
            let r_disk = spec.disk_radius();
            let n_det = 2 * size + 1; // odd: detector (n_det-1)/2 sits at t=0
            let sino = radon(&img, 4, n_det).unwrap();
            let central = sino.at(0, (n_det - 1) / 2);
            let expected = 2.0 * r_disk * MU_WATER_PER_PIXEL;
            let rel = (central - expected).abs() / expected;
            assert!(
                rel < 0.01,
                "size {size}: central ray {central} vs analytic {expected} (rel {rel})"
            );
        }
    }

    #[test]
    fn disk_projections_are_rotationally_symmetric() {
        // A centered disk projects identically at every angle; the RMS
        // deviation between angles is bounded as a fraction of the
        // projection's dynamic range (the same normalization the
        // reconstruction roundtrip bound uses).
        let spec = PhantomSpec::new(0, (0.0, 0.0), 64, false).unwrap();
        let img = make_phantom(&spec, 0);
        let n_angles = 24;
        let n_det = 96;
        let sino = radon(&img, n_angles, n_det).unwrap();
        let reference: Vec<f64> = (0..n_det).map(|d| sino.at(0, d)).collect();
        let range = reference.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        for a in 1..n_angles {
            let mut sq = 0.0;
            for d in 0..n_det {
                let diff = sino.at(a, d) - reference[d];
                sq += diff * diff;
            }
            let rms = (sq / n_det as f64).sqrt();
            assert!(
                rms < 0.005 * range,
                "angle {a}: projection deviates {rms} RMS (projection range {range})"
            );
        }
    }

    #[test]
    fn projection_mass_is_angle_invariant() {
        // The integral of a projection equals the integral of the attenuation
        // map at every angle (all rays together see the whole object).
        let spec = PhantomSpec::new(3, (-200.0, 200.0), 64, false).unwrap();
        let img = make_phantom(&spec, 21);
        let sino = radon(&img, 12, 96).unwrap();
        let masses: Vec<f64> =
            (0..12).map(|a| (0..96).map(|d| sino.at(a, d)).sum::<f64>()).collect();
        let mean = masses.iter().sum::<f64>() / masses.len() as f64;
        for (a, m) in masses.iter().enumerate() {
            assert!(
                (m - mean).abs() < 0.002 * mean.abs(),
                "angle {a}: mass {m} deviates from mean {mean}"
            );
        }
    }
}
