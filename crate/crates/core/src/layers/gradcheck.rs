//! Finite-difference gradient checking for layers and layer stacks.
//!
//! [`grad_check`] compares the analytic gradients (manual backprop) of a
//! scalar probe loss against central finite differences, for the input and
//! every learnable parameter, and reports the worst relative error. The probe
//! loss is `L = sum(r * y)` with a fixed random projection `r`, which makes
//! `dL/dy = r` and exercises every output element.
//!
//! Everything must be f64: finite differences in f32 are dominated by
//! rounding noise and would check nothing.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    bilinear_upsample, bilinear_upsample_backward, conv2d_backward, conv2d_forward,
    instance_norm_backward, instance_norm_forward, relu_backward, relu_forward,
};
use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

/// A layer description for gradient checking. `Stack` composes layers in
/// order (the output of one feeds the next).
#[derive(Debug, Clone)]
pub enum LayerSpec {
    Conv {
        weight: Tensor,
        bias: Tensor,
        stride: usize,
        pad: usize,
    },
    InstanceNorm {
        gamma: Tensor,
        beta: Tensor,
        eps: f64,
    },
    Relu,
    Upsample {
        out_h: usize,
        out_w: usize,
    },
    Stack(Vec<LayerSpec>),
}

/// Flattened working form: op descriptor plus owned, perturbable parameters.
enum FlatOp {
    Conv { stride: usize, pad: usize },
    InstanceNorm { eps: f64 },
    Relu,
    Upsample { out_h: usize, out_w: usize },
}

struct FlatLayer {
    op: FlatOp,
    params: Vec<Tensor>, // Conv: [weight, bias]; InstanceNorm: [gamma, beta]
}

fn flatten(spec: &LayerSpec, out: &mut Vec<FlatLayer>) -> Result<()> {
    match spec {
        LayerSpec::Conv {
            weight,
            bias,
            stride,
            pad,
        } => {
            for t in [weight, bias] {
                if t.dtype() != DType::F64 {
                    return Err(Error::Contract(
                        "grad_check requires f64 parameters".into(),
                    ));
                }
            }
            out.push(FlatLayer {
                op: FlatOp::Conv {
                    stride: *stride,
                    pad: *pad,
                },
                params: vec![weight.clone(), bias.clone()],
            });
        }
        LayerSpec::InstanceNorm { gamma, beta, eps } => {
            for t in [gamma, beta] {
                if t.dtype() != DType::F64 {
                    return Err(Error::Contract(
                        "grad_check requires f64 parameters".into(),
                    ));
                }
            }
            out.push(FlatLayer {
                op: FlatOp::InstanceNorm { eps: *eps },
                params: vec![gamma.clone(), beta.clone()],
            });
        }
        LayerSpec::Relu => out.push(FlatLayer {
            op: FlatOp::Relu,
            params: vec![],
        }),
        LayerSpec::Upsample { out_h, out_w } => out.push(FlatLayer {
            op: FlatOp::Upsample {
                out_h: *out_h,
                out_w: *out_w,
            },
            params: vec![],
        }),
        LayerSpec::Stack(list) => {
            for l in list {
                flatten(l, out)?;
            }
        }
    }
    Ok(())
}

/// Run the stack forward, returning the per-layer inputs and the final output.
fn forward_stack(layers: &[FlatLayer], x: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
    let mut inputs = Vec::with_capacity(layers.len());
    let mut cur = x.clone();
    for l in layers {
        inputs.push(cur.clone());
        cur = match &l.op {
            FlatOp::Conv { stride, pad } => {
                conv2d_forward(&cur, &l.params[0], &l.params[1], *stride, *pad)?
            }
            FlatOp::InstanceNorm { eps } => {
                instance_norm_forward(&cur, &l.params[0], &l.params[1], *eps)?.0
            }
            FlatOp::Relu => relu_forward(&cur),
            FlatOp::Upsample { out_h, out_w } => bilinear_upsample(&cur, *out_h, *out_w)?,
        };
    }
    Ok((inputs, cur))
}

/// Probe loss `sum(r * y)` for the fixed projection `r`.
fn probe_loss(y: &Tensor, r: &Tensor) -> f64 {
    y.flat_dot(r).expect("projection matches output shape")
}

fn projection_for(y: &Tensor) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let data: Vec<f64> = (0..y.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(y.shape(), data).expect("projection shape")
}

/// Maximum relative error between analytic and finite-difference gradients
/// over the input and all parameters. `step` is the central-difference step.
///
/// Relative error per element is `|a - n| / max(|a|, |n|, 1)`, so for
/// gradients of order one it behaves like a relative measure while staying
/// meaningful near zero.
pub fn grad_check(spec: &LayerSpec, x: &Tensor, step: f64) -> Result<f64> {
    if x.dtype() != DType::F64 {
        return Err(Error::Contract("grad_check requires an f64 input".into()));
    }
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::Contract(format!(
            "grad_check step must be positive and finite, got {step}"
        )));
    }
    let mut layers = Vec::new();
    flatten(spec, &mut layers)?;

    let (inputs, y) = forward_stack(&layers, x)?;
    let r = projection_for(&y);

    // Analytic gradients by backprop through the stack.
    let mut grad = r.clone();
    let mut param_grads: Vec<Vec<Tensor>> = layers.iter().map(|_| Vec::new()).collect();
    for (li, l) in layers.iter().enumerate().rev() {
        let input = &inputs[li];
        match &l.op {
            FlatOp::Conv { stride, pad } => {
                let g = conv2d_backward(input, &l.params[0], *stride, *pad, &grad)?;
                param_grads[li] = g.grad_params.into_iter().map(|(_, t)| t).collect();
                grad = g.grad_input;
            }
            FlatOp::InstanceNorm { eps } => {
                let (_, stats) = instance_norm_forward(input, &l.params[0], &l.params[1], *eps)?;
                let g = instance_norm_backward(input, &l.params[0], &stats, &grad)?;
                param_grads[li] = g.grad_params.into_iter().map(|(_, t)| t).collect();
                grad = g.grad_input;
            }
            FlatOp::Relu => grad = relu_backward(input, &grad)?,
            FlatOp::Upsample { .. } => {
                let insh = input.shape();
                grad = bilinear_upsample_backward(&grad, insh.h, insh.w)?.grad_input;
            }
        }
    }
    let analytic_input = grad;

    // Finite differences over every leaf: the input tensor and each
    // parameter tensor of each layer.
    let mut layers = layers;
    let mut x_work = x.clone();
    let mut max_err = fd_check_leaf(&mut layers, &mut x_work, Leaf::Input, &analytic_input, &r, step)?;
    for li in 0..layers.len() {
        for pi in 0..layers[li].params.len() {
            let analytic = param_grads[li][pi].clone();
            let err = fd_check_leaf(
                &mut layers,
                &mut x_work,
                Leaf::Param(li, pi),
                &analytic,
                &r,
                step,
            )?;
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}

#[derive(Clone, Copy)]
enum Leaf {
    Input,
    Param(usize, usize),
}

fn leaf_elem<'a>(
    layers: &'a mut [FlatLayer],
    x_work: &'a mut Tensor,
    leaf: Leaf,
    e: usize,
) -> &'a mut f64 {
    let t = match leaf {
        Leaf::Input => x_work,
        Leaf::Param(li, pi) => &mut layers[li].params[pi],
    };
    &mut t.as_mut_slice::<f64>().expect("f64 enforced on entry")[e]
}

/// Compare analytic vs central-difference gradients over one leaf tensor;
/// returns the leaf's maximum relative error.
fn fd_check_leaf(
    layers: &mut [FlatLayer],
    x_work: &mut Tensor,
    leaf: Leaf,
    analytic: &Tensor,
    r: &Tensor,
    step: f64,
) -> Result<f64> {
    let len = analytic.len();
    let mut max_err = 0.0f64;
    for e in 0..len {
        let orig = *leaf_elem(layers, x_work, leaf, e);
        *leaf_elem(layers, x_work, leaf, e) = orig + step;
        let plus = probe_loss(&forward_stack(layers, x_work)?.1, r);
        *leaf_elem(layers, x_work, leaf, e) = orig - step;
        let minus = probe_loss(&forward_stack(layers, x_work)?.1, r);
        *leaf_elem(layers, x_work, leaf, e) = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.as_slice::<f64>().expect("f64 enforced on entry")[e];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}
