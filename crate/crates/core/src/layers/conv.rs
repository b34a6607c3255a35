//! 2-D convolution with zero padding, square kernels, and manual backprop.
//!
//! Two forward implementations exist. [`conv2d_forward_reference`] is the
//! plainest possible six-nested-loop version and serves as the permanent
//! oracle. [`conv2d_forward`] reorders the loops for cache locality and
//! autovectorization but accumulates each output element in exactly the same
//! (channel, kernel-row, kernel-column) order starting from the bias, so the
//! two are **bitwise identical** — a property the tests pin down.
//!
//! Determinism: all loops have fixed iteration order, parallelism (rayon) is
//! only over independent output planes, and no FMA contraction is used, so
//! results are byte-stable across runs and thread counts.

use rayon::prelude::*;

use super::LayerGradients;
use crate::error::{Error, Result};
use crate::tensor::{Element, Shape4, Tensor};

/// Minimum number of multiply-adds before a conv call bothers with rayon.
const PAR_THRESHOLD: usize = 1 << 16;

/// Validate shapes/dtypes and compute the output shape:
/// `out = (in + 2*pad - k) / stride + 1` (floor division) per spatial axis.
pub fn conv_output_shape(
    x: Shape4,
    weight: Shape4,
    stride: usize,
    pad: usize,
) -> Result<Shape4> {
    if stride == 0 {
        return Err(Error::Config("conv stride must be >= 1".into()));
    }
    let k = weight.h;
    if weight.w != k {
        return Err(Error::Shape(format!(
            "conv kernel must be square, got {}x{}",
            weight.h, weight.w
        )));
    }
    if weight.c != x.c {
        return Err(Error::Shape(format!(
            "conv weight expects {} input channels but input {} has {}",
            weight.c, x, x.c
        )));
    }
    if x.h + 2 * pad < k || x.w + 2 * pad < k {
        return Err(Error::Shape(format!(
            "kernel {k}x{k} does not fit padded input {}x{} (pad {pad})",
            x.h, x.w
        )));
    }
    Ok(Shape4::new(
        x.n,
        weight.n,
        (x.h + 2 * pad - k) / stride + 1,
        (x.w + 2 * pad - k) / stride + 1,
    ))
}

fn check_conv_args(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<()> {
    if let Some(b) = bias {
        let expect = Shape4::new(1, weight.shape().n, 1, 1);
        if b.shape() != expect {
            return Err(Error::Shape(format!(
                "conv bias must have shape {expect}, got {}",
                b.shape()
            )));
        }
        if b.dtype() != x.dtype() {
            return Err(Error::Dtype(format!(
                "conv bias is {} but input is {}",
                b.dtype(),
                x.dtype()
            )));
        }
    }
    if weight.dtype() != x.dtype() {
        return Err(Error::Dtype(format!(
            "conv weight is {} but input is {}",
            weight.dtype(),
            x.dtype()
        )));
    }
    Ok(())
}

/// Range of output indices `o` for which `o*stride + k - pad` lands inside
/// `[0, len_in)`, clipped to `[0, len_out)`. Returned as `(lo, hi)` with
/// `lo <= hi`; an empty range means the kernel tap only ever hits padding.
#[inline]
fn valid_range(len_in: usize, len_out: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let (len_in, len_out) = (len_in as isize, len_out as isize);
    let (k, stride, pad) = (k as isize, stride as isize, pad as isize);
    // o >= ceil((pad - k) / stride)
    let lo = (pad - k + stride - 1).div_euclid(stride).clamp(0, len_out);
    // o <= floor((len_in - 1 + pad - k) / stride)
    let hi = ((len_in - 1 + pad - k).div_euclid(stride) + 1).clamp(lo, len_out);
    (lo as usize, hi as usize)
}

/// Naive direct convolution: the oracle. Never optimized, never parallel.
pub fn conv2d_forward_reference(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    check_conv_args(x, weight, Some(bias))?;
    let out_shape = conv_output_shape(x.shape(), weight.shape(), stride, pad)?;
    match x.dtype() {
        crate::tensor::DType::F32 => reference_impl::<f32>(x, weight, bias, stride, pad, out_shape),
        crate::tensor::DType::F64 => reference_impl::<f64>(x, weight, bias, stride, pad, out_shape),
    }
}

fn reference_impl<E: Element>(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
    out_shape: Shape4,
) -> Result<Tensor> {
    let xs = x.try_slice::<E>("conv input")?;
    let ws = weight.try_slice::<E>("conv weight")?;
    let bs = bias.try_slice::<E>("conv bias")?;
    let (xsh, wsh) = (x.shape(), weight.shape());
    let k = wsh.h;
    let mut out = vec![E::ZERO; out_shape.len()];
    for n in 0..out_shape.n {
        for o in 0..out_shape.c {
            for i in 0..out_shape.h {
                for j in 0..out_shape.w {
                    let mut acc = bs[o];
                    for c in 0..xsh.c {
                        for u in 0..k {
                            for v in 0..k {
                                let yy = (i * stride + u) as isize - pad as isize;
                                let xx = (j * stride + v) as isize - pad as isize;
                                if yy >= 0
                                    && (yy as usize) < xsh.h
                                    && xx >= 0
                                    && (xx as usize) < xsh.w
                                {
                                    let xe = xs[xsh.index(n, c, yy as usize, xx as usize)];
                                    let we = ws[wsh.index(o, c, u, v)];
                                    acc = we.madd(xe, acc);
                                }
                            }
                        }
                    }
                    out[out_shape.index(n, o, i, j)] = acc;
                }
            }
        }
    }
    Tensor::from_vec(out_shape, out)
}

/// Fast direct convolution; bitwise identical to the reference.
pub fn conv2d_forward(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    check_conv_args(x, weight, Some(bias))?;
    let out_shape = conv_output_shape(x.shape(), weight.shape(), stride, pad)?;
    match x.dtype() {
        crate::tensor::DType::F32 => fast_impl::<f32>(x, weight, bias, stride, pad, out_shape),
        crate::tensor::DType::F64 => fast_impl::<f64>(x, weight, bias, stride, pad, out_shape),
    }
}

fn fast_impl<E: Element>(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
    out_shape: Shape4,
) -> Result<Tensor> {
    let xs = x.try_slice::<E>("conv input")?;
    let ws = weight.try_slice::<E>("conv weight")?;
    let bs = bias.try_slice::<E>("conv bias")?;
    let (xsh, wsh) = (x.shape(), weight.shape());
    let k = wsh.h;
    let (ih, iw) = (xsh.h, xsh.w);
    let (oh, ow) = (out_shape.h, out_shape.w);
    let plane = oh * ow;
    let mut out = vec![E::ZERO; out_shape.len()];

    // One output plane per (batch, out-channel) pair; planes are independent.
    let work_per_plane = plane * xsh.c * k * k;
    let compute_plane = |p: usize, plane_buf: &mut [E]| {
        let (n, o) = (p / out_shape.c, p % out_shape.c);
        plane_buf.fill(bs[o]);
        for c in 0..xsh.c {
            let x_chan = &xs[xsh.index(n, c, 0, 0)..][..ih * iw];
            for u in 0..k {
                let (i_lo, i_hi) = valid_range(ih, oh, u, stride, pad);
                for v in 0..k {
                    let w_s = ws[wsh.index(o, c, u, v)];
                    let (j_lo, j_hi) = valid_range(iw, ow, v, stride, pad);
                    if j_lo >= j_hi {
                        continue;
                    }
                    for i in i_lo..i_hi {
                        let yy = i * stride + u - pad;
                        let x_row = &x_chan[yy * iw..][..iw];
                        let o_row = &mut plane_buf[i * ow + j_lo..i * ow + j_hi];
                        let x_start = j_lo * stride + v - pad;
                        if stride == 1 {
                            let x_sub = &x_row[x_start..x_start + (j_hi - j_lo)];
                            for (oe, &xe) in o_row.iter_mut().zip(x_sub) {
                                *oe = w_s.madd(xe, *oe);
                            }
                        } else {
                            for (d, oe) in o_row.iter_mut().enumerate() {
                                let xe = x_row[x_start + d * stride];
                                *oe = w_s.madd(xe, *oe);
                            }
                        }
                    }
                }
            }
        }
    };

    if out_shape.n * out_shape.c > 1 && work_per_plane * out_shape.n * out_shape.c >= PAR_THRESHOLD
    {
        out.par_chunks_mut(plane)
            .enumerate()
            .for_each(|(p, buf)| compute_plane(p, buf));
    } else {
        for (p, buf) in out.chunks_mut(plane).enumerate() {
            compute_plane(p, buf);
        }
    }
    Tensor::from_vec(out_shape, out)
}

/// Fixed-pattern dot product: eight independent accumulators over the bulk,
/// then a scalar tail, then a left-to-right combine. Deterministic for a given
/// length and friendly to autovectorization.
#[inline]
fn dot8<E: Element>(a: &[E], b: &[E]) -> E {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [E::ZERO; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        for l in 0..8 {
            let idx = i * 8 + l;
            lanes[l] = a[idx].madd(b[idx], lanes[l]);
        }
    }
    let mut tail = E::ZERO;
    for idx in chunks * 8..a.len() {
        tail = a[idx].madd(b[idx], tail);
    }
    let mut total = E::ZERO;
    for l in lanes {
        total = E::from_f64(total.to_f64() + l.to_f64());
    }
    E::from_f64(total.to_f64() + tail.to_f64())
}

/// Gradients of a convolution with respect to input, weight, and bias.
///
/// `grad_out` must have the shape the forward pass produced. The bias
/// gradient is the per-channel sum of `grad_out`; it is returned under the
/// name `"bias"`, the weight gradient under `"weight"`.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    stride: usize,
    pad: usize,
    grad_out: &Tensor,
) -> Result<LayerGradients> {
    check_conv_args(x, weight, None)?;
    let out_shape = conv_output_shape(x.shape(), weight.shape(), stride, pad)?;
    if grad_out.shape() != out_shape {
        return Err(Error::Shape(format!(
            "conv backward: expected upstream gradient of shape {out_shape}, got {}",
            grad_out.shape()
        )));
    }
    if grad_out.dtype() != x.dtype() {
        return Err(Error::Dtype(format!(
            "conv backward: input is {} but gradient is {}",
            x.dtype(),
            grad_out.dtype()
        )));
    }
    match x.dtype() {
        crate::tensor::DType::F32 => backward_impl::<f32>(x, weight, stride, pad, grad_out),
        crate::tensor::DType::F64 => backward_impl::<f64>(x, weight, stride, pad, grad_out),
    }
}

fn backward_impl<E: Element>(
    x: &Tensor,
    weight: &Tensor,
    stride: usize,
    pad: usize,
    grad_out: &Tensor,
) -> Result<LayerGradients> {
    let xs = x.try_slice::<E>("conv input")?;
    let ws = weight.try_slice::<E>("conv weight")?;
    let gos = grad_out.try_slice::<E>("conv upstream gradient")?;
    let (xsh, wsh, osh) = (x.shape(), weight.shape(), grad_out.shape());
    let k = wsh.h;
    let (ih, iw, oh, ow) = (xsh.h, xsh.w, osh.h, osh.w);

    // Bias gradient: per-output-channel sum of the upstream gradient.
    let mut gb = vec![E::ZERO; osh.c];
    for n in 0..osh.n {
        for o in 0..osh.c {
            let go_plane = &gos[osh.index(n, o, 0, 0)..][..oh * ow];
            let mut acc = 0.0f64;
            for &g in go_plane {
                acc += g.to_f64();
            }
            gb[o] = E::from_f64(gb[o].to_f64() + acc);
        }
    }

    // Weight gradient: gw[o,c,u,v] = sum over (n,i,j) of go * x at the tap.
    let mut gw = vec![E::ZERO; wsh.len()];
    let tap_work = osh.n * oh * ow;
    let compute_gw_tap = |t: usize, slot: &mut E| {
        let v = t % k;
        let u = (t / k) % k;
        let c = (t / (k * k)) % wsh.c;
        let o = t / (k * k * wsh.c);
        let (i_lo, i_hi) = valid_range(ih, oh, u, stride, pad);
        let (j_lo, j_hi) = valid_range(iw, ow, v, stride, pad);
        if j_lo >= j_hi {
            return;
        }
        let mut acc = E::ZERO;
        for n in 0..osh.n {
            let go_plane = &gos[osh.index(n, o, 0, 0)..][..oh * ow];
            let x_chan = &xs[xsh.index(n, c, 0, 0)..][..ih * iw];
            for i in i_lo..i_hi {
                let yy = i * stride + u - pad;
                let go_row = &go_plane[i * ow + j_lo..i * ow + j_hi];
                let x_start = j_lo * stride + v - pad;
                if stride == 1 {
                    let x_sub = &x_chan[yy * iw + x_start..][..j_hi - j_lo];
                    acc = E::from_f64(acc.to_f64() + dot8(go_row, x_sub).to_f64());
                } else {
                    let x_row = &x_chan[yy * iw..][..iw];
                    let mut s = E::ZERO;
                    for (d, &g) in go_row.iter().enumerate() {
                        s = g.madd(x_row[x_start + d * stride], s);
                    }
                    acc = E::from_f64(acc.to_f64() + s.to_f64());
                }
            }
        }
        *slot = acc;
    };
    if wsh.len() > 1 && tap_work * wsh.len() >= PAR_THRESHOLD {
        gw.par_iter_mut()
            .enumerate()
            .for_each(|(t, slot)| compute_gw_tap(t, slot));
    } else {
        for (t, slot) in gw.iter_mut().enumerate() {
            compute_gw_tap(t, slot);
        }
    }

    // Input gradient: scatter each upstream element through the kernel.
    // Channel planes of gx are independent, so parallelism goes over (n, c).
    let mut gx = vec![E::ZERO; xsh.len()];
    let compute_gx_plane = |p: usize, gx_chan: &mut [E]| {
        let (n, c) = (p / xsh.c, p % xsh.c);
        for o in 0..osh.c {
            let go_plane = &gos[osh.index(n, o, 0, 0)..][..oh * ow];
            for u in 0..k {
                let (i_lo, i_hi) = valid_range(ih, oh, u, stride, pad);
                for v in 0..k {
                    let w_s = ws[wsh.index(o, c, u, v)];
                    let (j_lo, j_hi) = valid_range(iw, ow, v, stride, pad);
                    if j_lo >= j_hi {
                        continue;
                    }
                    for i in i_lo..i_hi {
                        let yy = i * stride + u - pad;
                        let go_row = &go_plane[i * ow + j_lo..i * ow + j_hi];
                        let x_start = j_lo * stride + v - pad;
                        if stride == 1 {
                            let gx_sub = &mut gx_chan[yy * iw + x_start..][..j_hi - j_lo];
                            for (ge, &g) in gx_sub.iter_mut().zip(go_row) {
                                *ge = w_s.madd(g, *ge);
                            }
                        } else {
                            let gx_row = &mut gx_chan[yy * iw..][..iw];
                            for (d, &g) in go_row.iter().enumerate() {
                                let xe = &mut gx_row[x_start + d * stride];
                                *xe = w_s.madd(g, *xe);
                            }
                        }
                    }
                }
            }
        }
    };
    if xsh.n * xsh.c > 1 && tap_work * wsh.c * k * k >= PAR_THRESHOLD {
        gx.par_chunks_mut(ih * iw)
            .enumerate()
            .for_each(|(p, buf)| compute_gx_plane(p, buf));
    } else {
        for (p, buf) in gx.chunks_mut(ih * iw).enumerate() {
            compute_gx_plane(p, buf);
        }
    }

    Ok(LayerGradients {
        grad_input: Tensor::from_vec(xsh, gx)?,
        grad_params: vec![
            ("weight", Tensor::from_vec(wsh, gw)?),
            (
                "bias",
                Tensor::from_vec(Shape4::new(1, osh.c, 1, 1), gb)?,
            ),
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DType;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: impl Into<Shape4>, dtype: DType, rng: &mut ChaCha8Rng) -> Tensor {
        let shape = shape.into();
        let data: Vec<f64> = (0..shape.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap().cast(dtype)
    }

    #[test]
    fn scalar_conv_forward_and_backward() {
        // 1x1 input, 1x1 kernel: y = w*x + b = 2*3 + 1 = 7.
        let x = Tensor::from_vec((1, 1, 1, 1), vec![3.0f64]).unwrap();
        let w = Tensor::from_vec((1, 1, 1, 1), vec![2.0f64]).unwrap();
        let b = Tensor::from_vec((1, 1, 1, 1), vec![1.0f64]).unwrap();
        let y = conv2d_forward(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.to_f64_vec(), vec![7.0]);

        let go = Tensor::filled((1, 1, 1, 1), 1.0, DType::F64).unwrap();
        let grads = conv2d_backward(&x, &w, 1, 0, &go).unwrap();
        assert_eq!(grads.grad_input.to_f64_vec(), vec![2.0]); // dy/dx = w
        assert_eq!(grads.grad_params[0].1.to_f64_vec(), vec![3.0]); // dy/dw = x
        assert_eq!(grads.grad_params[1].1.to_f64_vec(), vec![1.0]); // dy/db = 1
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor((1, 1, 5, 7), DType::F64, &mut rng);
        // 3x3 kernel with a single 1 at the center, pad 1.
        let mut w = Tensor::zeros((1, 1, 3, 3), DType::F64).unwrap();
        w.set(0, 0, 1, 1, 1.0);
        let b = Tensor::zeros((1, 1, 1, 1), DType::F64).unwrap();
        let y = conv2d_forward(&x, &w, &b, 1, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn output_shapes_for_stride_one_and_two() {
        let x = Shape4::new(1, 3, 8, 8);
        let w = Shape4::new(4, 3, 3, 3);
        assert_eq!(
            conv_output_shape(x, w, 1, 1).unwrap(),
            Shape4::new(1, 4, 8, 8)
        );
        assert_eq!(
            conv_output_shape(x, w, 2, 1).unwrap(),
            Shape4::new(1, 4, 4, 4)
        );
    }

    #[test]
    fn rejects_bad_arguments() {
        let x = Tensor::zeros((1, 3, 8, 8), DType::F32).unwrap();
        let w = Tensor::zeros((4, 2, 3, 3), DType::F32).unwrap(); // wrong c_in
        let b = Tensor::zeros((1, 4, 1, 1), DType::F32).unwrap();
        assert!(matches!(
            conv2d_forward(&x, &w, &b, 1, 1).unwrap_err(),
            Error::Shape(_)
        ));

        let w = Tensor::zeros((4, 3, 3, 3), DType::F64).unwrap(); // dtype mix
        assert!(matches!(
            conv2d_forward(&x, &w, &b, 1, 1).unwrap_err(),
            Error::Dtype(_)
        ));

        let w = Tensor::zeros((4, 3, 3, 3), DType::F32).unwrap();
        assert!(matches!(
            conv2d_forward(&x, &w, &b, 0, 1).unwrap_err(), // stride 0
            Error::Config(_)
        ));

        let tiny = Tensor::zeros((1, 3, 2, 2), DType::F32).unwrap();
        let w5 = Tensor::zeros((4, 3, 5, 5), DType::F32).unwrap();
        assert!(matches!(
            conv2d_forward(&tiny, &w5, &b, 1, 0).unwrap_err(), // kernel too big
            Error::Shape(_)
        ));
    }

    #[test]
    fn fast_path_matches_reference_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for dtype in [DType::F32, DType::F64] {
            for &(ih, iw, ic, oc, k, stride, pad) in &[
                (8usize, 8usize, 3usize, 4usize, 3usize, 1usize, 1usize),
                (9, 7, 2, 5, 3, 2, 1),
                (6, 6, 1, 1, 1, 1, 0),
                (10, 10, 4, 3, 5, 2, 2),
                (5, 5, 2, 2, 3, 1, 0),
                (16, 16, 3, 8, 3, 2, 0),
            ] {
                let x = random_tensor((2, ic, ih, iw), dtype, &mut rng);
                let w = random_tensor((oc, ic, k, k), dtype, &mut rng);
                let b = random_tensor((1, oc, 1, 1), dtype, &mut rng);
                let fast = conv2d_forward(&x, &w, &b, stride, pad).unwrap();
                let slow = conv2d_forward_reference(&x, &w, &b, stride, pad).unwrap();
                assert_eq!(
                    fast, slow,
                    "mismatch for {dtype} ih={ih} iw={iw} ic={ic} oc={oc} k={k} s={stride} p={pad}"
                );
            }
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // With zero bias the conv is linear in x: <A x, u> must equal
        // <x, A^T u> where A^T u is the input gradient.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for &(stride, pad) in &[(1usize, 1usize), (2, 1), (1, 0)] {
            let x = random_tensor((1, 3, 8, 8), DType::F64, &mut rng);
            let w = random_tensor((4, 3, 3, 3), DType::F64, &mut rng);
            let b = Tensor::zeros((1, 4, 1, 1), DType::F64).unwrap();
            let y = conv2d_forward(&x, &w, &b, stride, pad).unwrap();
            let u = random_tensor(y.shape(), DType::F64, &mut rng);
            let grads = conv2d_backward(&x, &w, stride, pad, &u).unwrap();
            let lhs = y.flat_dot(&u).unwrap();
            let rhs = x.flat_dot(&grads.grad_input).unwrap();
            let scale = lhs.abs().max(rhs.abs()).max(1.0);
            assert!(
                ((lhs - rhs) / scale).abs() < 1e-10,
                "adjoint identity violated: {lhs} vs {rhs} (s={stride}, p={pad})"
            );
        }
    }

    #[test]
    fn backward_rejects_wrong_gradient_shape() {
        let x = Tensor::zeros((1, 1, 8, 8), DType::F64).unwrap();
        let w = Tensor::zeros((2, 1, 3, 3), DType::F64).unwrap();
        let go = Tensor::zeros((1, 2, 7, 7), DType::F64).unwrap(); // should be 8x8
        assert!(matches!(
            conv2d_backward(&x, &w, 1, 1, &go).unwrap_err(),
            Error::Shape(_)
        ));
    }

    #[test]
    fn valid_range_clips_to_interior() {
        // ih=4, k tap u, stride 1, pad 1: tap u=0 needs i >= 1.
        assert_eq!(valid_range(4, 4, 0, 1, 1), (1, 4));
        assert_eq!(valid_range(4, 4, 1, 1, 1), (0, 4));
        assert_eq!(valid_range(4, 4, 2, 1, 1), (0, 3));
        // Stride 2: ih=4 -> oh=2, u=0 valid only at i=1 (row 1).
        assert_eq!(valid_range(4, 2, 0, 2, 1), (1, 2));
        // A tap that never lands in bounds yields an empty range.
        assert_eq!(valid_range(1, 1, 2, 1, 0), (0, 0));
    }
}
