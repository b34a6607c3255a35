//! Neural-network layers with hand-written forward and backward passes.
//!
//! Every layer follows the same convention: the forward function returns the
//! output (plus whatever saved state the backward pass needs), and the
//! backward function maps the upstream gradient to a [`LayerGradients`]
//! holding the gradient with respect to the input and one named gradient per
//! learnable parameter.

pub mod conv;
pub mod gradcheck;
pub mod inorm;
pub mod resize;

pub use conv::{conv2d_backward, conv2d_forward, conv2d_forward_reference, conv_output_shape};
pub use gradcheck::{grad_check, LayerSpec};
pub use inorm::{instance_norm_backward, instance_norm_forward, InstanceNormStats};
pub use resize::{bilinear_upsample, bilinear_upsample_backward};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gradients produced by a layer's backward pass.
#[derive(Debug)]
pub struct LayerGradients {
    /// Gradient of the loss with respect to the layer input.
    pub grad_input: Tensor,
    /// Gradient per learnable parameter, e.g. `("weight", ...)`, `("bias", ...)`.
    pub grad_params: Vec<(&'static str, Tensor)>,
}

/// Rectified linear unit: `max(x, 0)` elementwise.
///
/// Only strictly negative values are zeroed, so NaN passes through instead
/// of being silently replaced by 0 (`f64::max` would do the latter, masking
/// numerical blow-ups that divergence detection must see).
pub fn relu_forward(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    match y.as_mut_slice::<f32>() {
        Some(v) => v.iter_mut().for_each(|e| {
            if *e < 0.0 {
                *e = 0.0;
            }
        }),
        None => y
            .as_mut_slice::<f64>()
            .expect("tensor is f32 or f64")
            .iter_mut()
            .for_each(|e| {
                if *e < 0.0 {
                    *e = 0.0;
                }
            }),
    }
    y
}

/// Backward pass of ReLU. The subgradient at exactly zero is taken as zero:
/// the upstream gradient passes through only where the *input* was strictly
/// positive.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if x.shape() != grad_out.shape() {
        return Err(Error::Shape(format!(
            "relu backward: input shape {} but gradient shape {}",
            x.shape(),
            grad_out.shape()
        )));
    }
    if x.dtype() != grad_out.dtype() {
        return Err(Error::Dtype(format!(
            "relu backward: input is {} but gradient is {}",
            x.dtype(),
            grad_out.dtype()
        )));
    }
    let mut gx = grad_out.clone();
    match (gx.as_mut_slice::<f32>(), x.as_slice::<f32>()) {
        (Some(g), Some(xv)) => {
            for (ge, &xe) in g.iter_mut().zip(xv) {
                if xe <= 0.0 {
                    *ge = 0.0;
                }
            }
        }
        _ => {
            let g = gx.as_mut_slice::<f64>().expect("dtypes already matched");
            let xv = x.as_slice::<f64>().expect("dtypes already matched");
            for (ge, &xe) in g.iter_mut().zip(xv) {
                if xe <= 0.0 {
                    *ge = 0.0;
                }
            }
        }
    }
    Ok(gx)
}
