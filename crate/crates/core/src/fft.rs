//! Minimal radix-2 complex FFT.
//!
//! Shared by the reconstruction ramp filter (1-D transforms along the
//! detector axis) and the spectral noise analysis (2-D transforms built from
//! row/column passes). Only power-of-two lengths are supported; callers that
//! need other sizes must pad.

use num_complex::Complex64;

use crate::error::{Error, Result};

/// In-place radix-2 decimation-in-time FFT.
///
/// The forward transform is unnormalized (`X[k] = sum_n x[n] e^{-2*pi*i*nk/N}`);
/// the inverse uses the conjugate kernel and applies the `1/N` scaling, so a
/// forward/inverse pair is the identity up to rounding. Length 1 is allowed
/// and is the identity.
pub fn fft1_inplace(buf: &mut [Complex64], inverse: bool) -> Result<()> {
    let n = buf.len();
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::Unsupported(format!(
            "radix-2 FFT requires a power-of-two length, got {n}"
        )));
    }
    if n > 1 {
        let shift = usize::BITS - n.trailing_zeros();
        for i in 0..n {
            let j = i.reverse_bits() >> shift;
            if j > i {
                buf.swap(i, j);
            }
        }
        let sign = if inverse { 1.0 } else { -1.0 };
        let mut m = 2usize;
        while m <= n {
            let w_m = Complex64::from_polar(1.0, sign * 2.0 * std::f64::consts::PI / m as f64);
            let half = m / 2;
            for start in (0..n).step_by(m) {
                let mut w = Complex64::new(1.0, 0.0);
                for k in 0..half {
                    let t = w * buf[start + k + half];
                    let u = buf[start + k];
                    buf[start + k] = u + t;
                    buf[start + k + half] = u - t;
                    w *= w_m;
                }
            }
            m <<= 1;
        }
    }
    if inverse {
        let scale = 1.0 / n as f64;
        for v in buf.iter_mut() {
            *v *= scale;
        }
    }
    Ok(())
}
