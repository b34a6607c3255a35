//! Instance normalization with learnable per-channel affine parameters.
//!
//! Each (batch, channel) plane is normalized independently:
//! `y = gamma * (x - mean) / sqrt(var + eps) + beta`, where `mean` and `var`
//! are the plane's sample mean and *biased* variance. The backward pass
//! implements the full Jacobian — the dependence of mean and variance on the
//! input is differentiated through, not treated as constant.
//!
//! Statistics are computed and applied in f64 regardless of the tensor dtype;
//! only the final elementwise result is rounded back.

use super::LayerGradients;
use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor};

/// Per-plane statistics saved by the forward pass for reuse in the backward
/// pass. Tied to the input shape so a mismatched pairing is caught.
#[derive(Debug, Clone)]
pub struct InstanceNormStats {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    shape: Shape4,
}

impl InstanceNormStats {
    /// Mean of plane (n, c).
    pub fn mean(&self, n: usize, c: usize) -> f64 {
        self.mean[n * self.shape.c + c]
    }

    /// `1 / sqrt(var + eps)` of plane (n, c).
    pub fn inv_std(&self, n: usize, c: usize) -> f64 {
        self.inv_std[n * self.shape.c + c]
    }
}

fn check_affine_params(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<()> {
    let expect = Shape4::new(1, x.shape().c, 1, 1);
    for (name, t) in [("gamma", gamma), ("beta", beta)] {
        if t.shape() != expect {
            return Err(Error::Shape(format!(
                "instance norm {name} must have shape {expect}, got {}",
                t.shape()
            )));
        }
        if t.dtype() != x.dtype() {
            return Err(Error::Dtype(format!(
                "instance norm {name} is {} but input is {}",
                t.dtype(),
                x.dtype()
            )));
        }
    }
    if !eps.is_finite() || eps < 0.0 {
        return Err(Error::Config(format!(
            "instance norm eps must be finite and >= 0, got {eps}"
        )));
    }
    Ok(())
}

/// Normalize each (batch, channel) plane and apply the affine transform.
///
/// Fails with a degenerate-input error if some plane is constant and
/// `eps == 0` (the normalization is undefined there).
pub fn instance_norm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, InstanceNormStats)> {
    check_affine_params(x, gamma, beta, eps)?;
    let sh = x.shape();
    let plane = sh.h * sh.w;
    let xv = x.to_f64_vec();
    let gv = gamma.to_f64_vec();
    let bv = beta.to_f64_vec();

    let mut mean = Vec::with_capacity(sh.n * sh.c);
    let mut inv_std = Vec::with_capacity(sh.n * sh.c);
    let mut out = vec![0.0f64; sh.len()];
    for p in 0..sh.n * sh.c {
        let c = p % sh.c;
        let xp = &xv[p * plane..(p + 1) * plane];
        let mu = xp.iter().sum::<f64>() / plane as f64;
        let var = xp.iter().map(|&e| (e - mu) * (e - mu)).sum::<f64>() / plane as f64;
        if var + eps == 0.0 {
            return Err(Error::Degenerate(format!(
                "instance norm: plane (n={}, c={c}) is constant and eps is 0",
                p / sh.c
            )));
        }
        let istd = 1.0 / (var + eps).sqrt();
        mean.push(mu);
        inv_std.push(istd);
        let op = &mut out[p * plane..(p + 1) * plane];
        for (oe, &xe) in op.iter_mut().zip(xp) {
            *oe = gv[c] * (xe - mu) * istd + bv[c];
        }
    }
    let y = Tensor::from_vec(sh, out)?.cast(x.dtype());
    Ok((
        y,
        InstanceNormStats {
            mean,
            inv_std,
            shape: sh,
        },
    ))
}

/// Backward pass. `x` and `stats` must come from the matching forward call;
/// a stats/input shape mismatch is a contract violation.
///
/// Per plane, with `xh = (x - mean) * inv_std` and `m = h*w`:
/// `dL/dx = gamma * inv_std * (g - mean(g) - xh * mean(g * xh))`,
/// `dL/dgamma = sum(g * xh)`, `dL/dbeta = sum(g)`.
pub fn instance_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    stats: &InstanceNormStats,
    grad_out: &Tensor,
) -> Result<LayerGradients> {
    if stats.shape != x.shape() {
        return Err(Error::Contract(format!(
            "instance norm backward: saved stats are for shape {} but input is {}",
            stats.shape,
            x.shape()
        )));
    }
    if grad_out.shape() != x.shape() {
        return Err(Error::Shape(format!(
            "instance norm backward: input shape {} but gradient shape {}",
            x.shape(),
            grad_out.shape()
        )));
    }
    if grad_out.dtype() != x.dtype() {
        return Err(Error::Dtype(format!(
            "instance norm backward: input is {} but gradient is {}",
            x.dtype(),
            grad_out.dtype()
        )));
    }
    let sh = x.shape();
    let plane = sh.h * sh.w;
    let xv = x.to_f64_vec();
    let gv = gamma.to_f64_vec();
    let gov = grad_out.to_f64_vec();

    let mut gx = vec![0.0f64; sh.len()];
    let mut ggamma = vec![0.0f64; sh.c];
    let mut gbeta = vec![0.0f64; sh.c];
    for p in 0..sh.n * sh.c {
        let c = p % sh.c;
        let mu = stats.mean[p];
        let istd = stats.inv_std[p];
        let xp = &xv[p * plane..(p + 1) * plane];
        let gop = &gov[p * plane..(p + 1) * plane];

        let mut sum_g = 0.0;
        let mut sum_gxh = 0.0;
        for (&g, &xe) in gop.iter().zip(xp) {
            sum_g += g;
            sum_gxh += g * (xe - mu) * istd;
        }
        ggamma[c] += sum_gxh;
        gbeta[c] += sum_g;

        let mean_g = sum_g / plane as f64;
        let mean_gxh = sum_gxh / plane as f64;
        let gxp = &mut gx[p * plane..(p + 1) * plane];
        for (ge, (&g, &xe)) in gxp.iter_mut().zip(gop.iter().zip(xp)) {
            let xh = (xe - mu) * istd;
            *ge = gv[c] * istd * (g - mean_g - xh * mean_gxh);
        }
    }

    let dtype = x.dtype();
    let param_shape = Shape4::new(1, sh.c, 1, 1);
    Ok(LayerGradients {
        grad_input: Tensor::from_vec(sh, gx)?.cast(dtype),
        grad_params: vec![
            (
                "gamma",
                Tensor::from_vec(param_shape, ggamma)?.cast(dtype),
            ),
            ("beta", Tensor::from_vec(param_shape, gbeta)?.cast(dtype)),
        ],
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

    fn unit_affine(c: usize) -> (Tensor, Tensor) {
        (
            Tensor::filled((1, c, 1, 1), 1.0, DType::F64).unwrap(),
            Tensor::zeros((1, c, 1, 1), DType::F64).unwrap(),
        )
    }

    #[test]
    fn normalizes_known_plane() {
        let x = Tensor::from_vec((1, 1, 2, 2), vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let (g, b) = unit_affine(1);
        let (y, stats) = instance_norm_forward(&x, &g, &b, 0.0).unwrap();
        let want = [-1.34164, -0.44721, 0.44721, 1.34164];
        for (got, want) in y.to_f64_vec().iter().zip(want) {
            assert_abs_diff_eq!(got, &want, epsilon = 1e-5);
        }
        assert_abs_diff_eq!(stats.mean(0, 0), 2.5);
        assert_abs_diff_eq!(stats.inv_std(0, 0), 1.0 / 1.25f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn output_planes_have_zero_mean_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..2 * 3 * 8 * 8).map(|_| rng.random_range(-5.0..5.0)).collect();
        let x = Tensor::from_vec((2, 3, 8, 8), data).unwrap();
        let (g, b) = unit_affine(3);
        let (y, _) = instance_norm_forward(&x, &g, &b, 0.0).unwrap();
        let yv = y.to_f64_vec();
        for p in 0..6 {
            let plane = &yv[p * 64..(p + 1) * 64];
            let mu = plane.iter().sum::<f64>() / 64.0;
            let var = plane.iter().map(|&e| (e - mu) * (e - mu)).sum::<f64>() / 64.0;
            assert_abs_diff_eq!(mu, 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(var, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn affine_parameters_scale_and_shift() {
        let x = Tensor::from_vec((1, 1, 1, 4), vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let (g1, b0) = unit_affine(1);
        let (base, _) = instance_norm_forward(&x, &g1, &b0, 0.0).unwrap();
        let g = Tensor::filled((1, 1, 1, 1), 2.0, DType::F64).unwrap();
        let b = Tensor::filled((1, 1, 1, 1), 3.0, DType::F64).unwrap();
        let (y, _) = instance_norm_forward(&x, &g, &b, 0.0).unwrap();
        for (ye, be) in y.to_f64_vec().iter().zip(base.to_f64_vec()) {
            assert_abs_diff_eq!(*ye, 2.0 * be + 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn constant_plane_with_zero_eps_is_degenerate() {
        let x = Tensor::filled((1, 1, 2, 2), 5.0, DType::F64).unwrap();
        let (g, b) = unit_affine(1);
        let err = instance_norm_forward(&x, &g, &b, 0.0).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)), "got {err:?}");
        // With eps > 0 the same input is fine (output is all beta).
        let (y, _) = instance_norm_forward(&x, &g, &b, 1e-5).unwrap();
        assert_eq!(y.to_f64_vec(), vec![0.0; 4]);
    }

    #[test]
    fn negative_eps_rejected() {
        let x = Tensor::zeros((1, 1, 2, 2), DType::F64).unwrap();
        let (g, b) = unit_affine(1);
        assert!(matches!(
            instance_norm_forward(&x, &g, &b, -1e-3).unwrap_err(),
            Error::Config(_)
        ));
    }

    #[test]
    fn backward_grad_input_sums_to_zero_per_plane() {
        // Mean subtraction kills the constant direction, so the input
        // gradient of each plane must sum to (numerically) zero.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f64> = (0..2 * 2 * 6 * 6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x = Tensor::from_vec((2, 2, 6, 6), data).unwrap();
        let g = Tensor::from_vec((1, 2, 1, 1), vec![1.7f64, -0.3]).unwrap();
        let b = Tensor::from_vec((1, 2, 1, 1), vec![0.5f64, 2.0]).unwrap();
        let (_, stats) = instance_norm_forward(&x, &g, &b, 1e-5).unwrap();
        let gov: Vec<f64> = (0..x.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let go = Tensor::from_vec(x.shape(), gov).unwrap();
        let grads = instance_norm_backward(&x, &g, &stats, &go).unwrap();
        let gxv = grads.grad_input.to_f64_vec();
        for p in 0..4 {
            let s: f64 = gxv[p * 36..(p + 1) * 36].iter().sum();
            assert_abs_diff_eq!(s, 0.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn backward_rejects_mismatched_stats() {
        let x = Tensor::zeros((1, 1, 4, 4), DType::F64).unwrap();
        let (g, b) = unit_affine(1);
        let (_, stats) = instance_norm_forward(&x, &g, &b, 1e-5).unwrap();
        let other = Tensor::zeros((1, 1, 5, 5), DType::F64).unwrap();
        let go = Tensor::zeros((1, 1, 5, 5), DType::F64).unwrap();
        let err = instance_norm_backward(&other, &g, &stats, &go).unwrap_err();
        assert!(matches!(err, Error::Contract(_)), "got {err:?}");
    }
}
