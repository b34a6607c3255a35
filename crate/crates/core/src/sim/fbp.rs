//! Filtered backprojection (FBP) with the Ram-Lak ramp filter.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fft::fft1_inplace;
use crate::sim::radon::mu_to_stored;
use crate::sim::{ImageHU, Sinogram};

/// Frequency response of the band-limited ramp filter, evaluated by
/// transforming the discrete spatial kernel (detector spacing 1 pixel):
/// `h[0] = 1/4`, `h[n] = -1/(pi*n)^2` for odd `n`, `0` for even `n`.
///
/// The kernel is laid out on a circular buffer of power-of-two length
/// `m >= 2*n_det`, so multiplying padded projections by this response
/// performs the exact linear convolution.
fn ramp_response(n_det: usize, m: usize) -> Vec<f64> {
    let mut kernel = vec![Complex64::new(0.0, 0.0); m];
    kernel[0] = Complex64::new(0.25, 0.0);
    for n in (1..n_det).step_by(2) {
        let v = -1.0 / (std::f64::consts::PI * n as f64).powi(2);
        kernel[n] = Complex64::new(v, 0.0);
        kernel[m - n] = Complex64::new(v, 0.0);
    }
    fft1_inplace(&mut kernel, false).expect("padded length is a power of two");
    // The response of an even real kernel is real; keep the exact symmetry.
    kernel.into_iter().map(|c| c.re).collect()
}

/// Ramp-filters every projection row via FFT along the detector axis.
fn filter_rows(sino: &Sinogram) -> Vec<f64> {
    let n_det = sino.n_det();
    let m = (2 * n_det).next_power_of_two();
    let response = ramp_response(n_det, m);
    let mut filtered = vec![0.0; sino.n_angles() * n_det];
    filtered
        .par_chunks_mut(n_det)
        .enumerate()
        .for_each(|(a, out_row)| {
            let row = &sino.data()[a * n_det..(a + 1) * n_det];
            let mut buf = vec![Complex64::new(0.0, 0.0); m];
            for (b, &p) in buf.iter_mut().zip(row) {
                *b = Complex64::new(p, 0.0);
            }
            fft1_inplace(&mut buf, false).expect("power-of-two length");
            for (b, &h) in buf.iter_mut().zip(&response) {
                *b *= h;
            }
            fft1_inplace(&mut buf, true).expect("power-of-two length");
            for (o, b) in out_row.iter_mut().zip(&buf) {
                *o = b.re;
            }
        });
    filtered
}

/// Filtered backprojection of a parallel-beam sinogram.
///
/// Each projection row is ramp-filtered (Ram-Lak, band-limited discrete
/// kernel) via FFT, then smeared back over the output grid with linear
/// interpolation along the detector axis; the sum is scaled by
/// `pi/n_angles` and converted from attenuation back to stored-HU.
///
/// The detector row must cover the slice (`n_det >= out_size`).
pub fn fbp(sino: &Sinogram, out_size: usize) -> Result<ImageHU> {
    if out_size == 0 {
        return Err(Error::Config("output size must be positive".into()));
    }
    if sino.n_det() < out_size {
        return Err(Error::Config(format!(
            "detector row ({} elements) cannot reconstruct a {out_size}-pixel slice; \
             need n_det >= out_size",
            sino.n_det()
        )));
    }
    let n_angles = sino.n_angles();
    let n_det = sino.n_det();
    let filtered = filter_rows(sino);
    let center = (out_size as f64 - 1.0) / 2.0;
    let det_center = (n_det as f64 - 1.0) / 2.0;
    let scale = std::f64::consts::PI / n_angles as f64;

    let mut data = vec![0.0; out_size * out_size];
    data.par_chunks_mut(out_size).enumerate().for_each(|(r, row)| {
        let y = r as f64 - center;
        for (c, out) in row.iter_mut().enumerate() {
            let x = c as f64 - center;
            let mut acc = 0.0;
            for a in 0..n_angles {
                let theta = a as f64 * std::f64::consts::PI / n_angles as f64;
                let (sin_t, cos_t) = theta.sin_cos();
                let t = x * cos_t + y * sin_t;
                let jf = t + det_center;
                let j0 = jf.floor();
                let frac = jf - j0;
                let j0 = j0 as isize;
                let q = &filtered[a * n_det..(a + 1) * n_det];
                if j0 >= 0 && (j0 as usize) < n_det {
                    acc += (1.0 - frac) * q[j0 as usize];
                }
                let j1 = j0 + 1;
                if frac != 0.0 && j1 >= 0 && (j1 as usize) < n_det {
                    acc += frac * q[j1 as usize];
                }
            }
            *out = mu_to_stored(acc * scale);
        }
    });
    ImageHU::new(out_size, out_size, data)
}
