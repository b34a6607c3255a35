//! Bilinear resampling with half-pixel-center alignment.
//!
//! Output pixel `o` samples the input at `(o + 0.5) * in/out - 0.5`; edge
//! pixels replicate. The backward pass scatters with the same weights, so it
//! is the exact adjoint of the forward map — a property the tests verify via
//! the inner-product identity.

use super::LayerGradients;
use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor};

/// Per-output-index sampling plan along one axis: indices of the two source
/// taps (already clamped) and the weight of the second one.
fn axis_plan(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let i0 = src.floor();
            let frac = src - i0;
            let lo = (i0.max(0.0) as usize).min(n_in - 1);
            let hi = ((i0 + 1.0).max(0.0) as usize).min(n_in - 1);
            (lo, hi, frac)
        })
        .collect()
}

fn check_dims(out_h: usize, out_w: usize) -> Result<()> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Shape(format!(
            "bilinear resize target must be positive, got {out_h}x{out_w}"
        )));
    }
    Ok(())
}

/// Resample `x` to `(out_h, out_w)`. When the target equals the source size
/// the input is returned unchanged (bit-exact identity).
pub fn bilinear_upsample(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    check_dims(out_h, out_w)?;
    let sh = x.shape();
    if out_h == sh.h && out_w == sh.w {
        return Ok(x.clone());
    }
    let rows = axis_plan(sh.h, out_h);
    let cols = axis_plan(sh.w, out_w);
    let out_shape = Shape4::new(sh.n, sh.c, out_h, out_w);
    let xv = x.to_f64_vec();
    let mut out = vec![0.0f64; out_shape.len()];
    let in_plane = sh.h * sh.w;
    let out_plane = out_h * out_w;
    for p in 0..sh.n * sh.c {
        let src = &xv[p * in_plane..(p + 1) * in_plane];
        let dst = &mut out[p * out_plane..(p + 1) * out_plane];
        for (oy, &(y0, y1, wy)) in rows.iter().enumerate() {
            let r0 = &src[y0 * sh.w..(y0 + 1) * sh.w];
            let r1 = &src[y1 * sh.w..(y1 + 1) * sh.w];
            let drow = &mut dst[oy * out_w..(oy + 1) * out_w];
            for (de, &(x0, x1, wx)) in drow.iter_mut().zip(&cols) {
                let top = (1.0 - wx) * r0[x0] + wx * r0[x1];
                let bot = (1.0 - wx) * r1[x0] + wx * r1[x1];
                *de = (1.0 - wy) * top + wy * bot;
            }
        }
    }
    Ok(Tensor::from_vec(out_shape, out)?.cast(x.dtype()))
}

/// Adjoint of [`bilinear_upsample`]: scatter `grad_out` back onto a grid of
/// size `(in_h, in_w)` with the same interpolation weights.
pub fn bilinear_upsample_backward(
    grad_out: &Tensor,
    in_h: usize,
    in_w: usize,
) -> Result<LayerGradients> {
    check_dims(in_h, in_w)?;
    let osh = grad_out.shape();
    if osh.h == in_h && osh.w == in_w {
        return Ok(LayerGradients {
            grad_input: grad_out.clone(),
            grad_params: vec![],
        });
    }
    let rows = axis_plan(in_h, osh.h);
    let cols = axis_plan(in_w, osh.w);
    let in_shape = Shape4::new(osh.n, osh.c, in_h, in_w);
    let gov = grad_out.to_f64_vec();
    let mut gx = vec![0.0f64; in_shape.len()];
    let in_plane = in_h * in_w;
    let out_plane = osh.h * osh.w;
    for p in 0..osh.n * osh.c {
        let src = &gov[p * out_plane..(p + 1) * out_plane];
        let dst = &mut gx[p * in_plane..(p + 1) * in_plane];
        for (oy, &(y0, y1, wy)) in rows.iter().enumerate() {
            let grow = &src[oy * osh.w..(oy + 1) * osh.w];
            for (&g, &(x0, x1, wx)) in grow.iter().zip(&cols) {
                dst[y0 * in_w + x0] += (1.0 - wy) * (1.0 - wx) * g;
                dst[y0 * in_w + x1] += (1.0 - wy) * wx * g;
                dst[y1 * in_w + x0] += wy * (1.0 - wx) * g;
                dst[y1 * in_w + x1] += wy * wx * g;
            }
        }
    }
    Ok(LayerGradients {
        grad_input: Tensor::from_vec(in_shape, gx)?.cast(grad_out.dtype()),
        grad_params: vec![],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DType;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn same_size_is_bit_exact_identity() {
        let x = Tensor::from_vec((1, 1, 2, 2), vec![1.0f64, -0.0, 3.5, f64::MIN_POSITIVE])
            .unwrap();
        let y = bilinear_upsample(&x, 2, 2).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn doubles_a_two_by_two_plane() {
        let x = Tensor::from_vec((1, 1, 2, 2), vec![0.0f64, 1.0, 2.0, 3.0]).unwrap();
        let y = bilinear_upsample(&x, 4, 4).unwrap();
        // Half-pixel centers with edge replication.
        let want = [
            0.0, 0.25, 0.75, 1.0, //
            0.5, 0.75, 1.25, 1.5, //
            1.5, 1.75, 2.25, 2.5, //
            2.0, 2.25, 2.75, 3.0,
        ];
        for (got, want) in y.to_f64_vec().iter().zip(want) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn constant_plane_stays_constant() {
        let x = Tensor::filled((1, 2, 3, 3), 4.25, DType::F64).unwrap();
        let y = bilinear_upsample(&x, 12, 6).unwrap();
        assert!(y.to_f64_vec().iter().all(|&v| (v - 4.25).abs() < 1e-12));
    }

    #[test]
    fn backward_is_exact_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(ih, iw, oh, ow) in &[(4usize, 4usize, 8usize, 8usize), (3, 5, 12, 10), (6, 6, 7, 9)] {
            let xd: Vec<f64> = (0..2 * ih * iw).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = Tensor::from_vec((1, 2, ih, iw), xd).unwrap();
            let y = bilinear_upsample(&x, oh, ow).unwrap();
            let ud: Vec<f64> = (0..y.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let u = Tensor::from_vec(y.shape(), ud).unwrap();
            let gx = bilinear_upsample_backward(&u, ih, iw).unwrap().grad_input;
            let lhs = y.flat_dot(&u).unwrap();
            let rhs = x.flat_dot(&gx).unwrap();
            let scale = lhs.abs().max(rhs.abs()).max(1.0);
            assert!(
                ((lhs - rhs) / scale).abs() < 1e-10,
                "adjoint violated for {ih}x{iw} -> {oh}x{ow}: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn zero_target_dims_rejected() {
        let x = Tensor::zeros((1, 1, 2, 2), DType::F64).unwrap();
        assert!(matches!(
            bilinear_upsample(&x, 0, 4).unwrap_err(),
            Error::Shape(_)
        ));
    }
}
