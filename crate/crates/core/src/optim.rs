//! Loss, optimizer, and learning-rate schedule.
//!
//! Adam keeps its moment estimates in f64 even when the parameters are f32:
//! the moment buffers are tiny compared to activations, and f64 removes any
//! worry about accumulated rounding drift over long runs. Updates are computed
//! in f64 and rounded once into the parameter dtype, which keeps the whole
//! optimizer deterministic across runs.

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor};

/// Mean-squared-error loss and its gradient with respect to `pred`.
///
/// `loss = mean((pred - target)^2)`, `grad = (2/N) * (pred - target)` where
/// `N` is the total element count.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "mse_loss: prediction shape {} but target shape {}",
            pred.shape(),
            target.shape()
        )));
    }
    if pred.dtype() != target.dtype() {
        return Err(Error::Dtype(format!(
            "mse_loss: prediction is {} but target is {}",
            pred.dtype(),
            target.dtype()
        )));
    }
    let n = pred.len() as f64;
    let diff = pred.sub(target)?;
    let loss = {
        let d = diff.to_f64_vec();
        d.iter().map(|&e| e * e).sum::<f64>() / n
    };
    let grad = diff.scale(2.0 / n);
    Ok((loss, grad))
}

/// Adam hyperparameters. Constructed through [`AdamHyper::new`], which
/// validates the ranges once so the step function never has to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    /// Validated constructor. `eps == 0` is allowed: with bias correction the
    /// denominator `sqrt(v_hat)` is zero only when every gradient so far was
    /// zero, and the step is skipped for exactly-zero gradients anyway via
    /// `0/0 -> 0` never arising (m is also zero only in that case, handled
    /// below). Negative or non-finite values are rejected.
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<AdamHyper> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::Config(format!("adam lr must be positive, got {lr}")));
        }
        for (name, b) in [("beta1", beta1), ("beta2", beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!(
                    "adam {name} must lie in [0, 1), got {b}"
                )));
            }
        }
        if !(eps >= 0.0) || !eps.is_finite() {
            return Err(Error::Config(format!(
                "adam eps must be finite and >= 0, got {eps}"
            )));
        }
        Ok(AdamHyper {
            lr,
            beta1,
            beta2,
            eps,
        })
    }

    /// The training recipe's defaults with a caller-chosen learning rate:
    /// `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`.
    pub fn with_lr(lr: f64) -> Result<AdamHyper> {
        AdamHyper::new(lr, 0.9, 0.999, 1e-8)
    }

    /// Copy with a different learning rate (for schedules).
    pub fn at_lr(mut self, lr: f64) -> Result<AdamHyper> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::Config(format!("adam lr must be positive, got {lr}")));
        }
        self.lr = lr;
        Ok(self)
    }
}

/// Adam moment estimates. One (m, v) pair of f64 buffers per parameter
/// tensor, plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    shapes: Vec<Shape4>,
    t: u64,
}

impl AdamState {
    /// Fresh state (all moments zero, t = 0) mirroring `params`.
    pub fn new(params: &[Tensor]) -> AdamState {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            shapes: params.iter().map(|p| p.shape()).collect(),
            t: 0,
        }
    }

    /// Number of steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Serialization access: (m, v, t). Buffers are ordered like the params
    /// the state was created for.
    pub fn raw(&self) -> (&[Vec<f64>], &[Vec<f64>], u64) {
        (&self.m, &self.v, self.t)
    }

    /// Rebuild a state from serialized buffers. Lengths must mirror `params`.
    pub fn from_raw(params: &[Tensor], m: Vec<Vec<f64>>, v: Vec<Vec<f64>>, t: u64) -> Result<AdamState> {
        if m.len() != params.len() || v.len() != params.len() {
            return Err(Error::Contract(format!(
                "adam state holds {} tensors but {} params were given",
                m.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if m[i].len() != p.len() || v[i].len() != p.len() {
                return Err(Error::Contract(format!(
                    "adam state tensor {i} has {} elements but param has {}",
                    m[i].len(),
                    p.len()
                )));
            }
        }
        Ok(AdamState {
            m,
            v,
            shapes: params.iter().map(|p| p.shape()).collect(),
            t,
        })
    }
}

/// One Adam update over a parameter list, in place.
///
/// Standard update with bias correction:
/// `m = b1*m + (1-b1)*g`, `v = b2*v + (1-b2)*g^2`,
/// `p -= lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)`.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<()> {
    if params.len() != state.shapes.len() {
        return Err(Error::Contract(format!(
            "adam state was created for {} params, got {}",
            state.shapes.len(),
            params.len()
        )));
    }
    if grads.len() != params.len() {
        return Err(Error::Shape(format!(
            "adam_step: {} params but {} grads",
            params.len(),
            grads.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != state.shapes[i] {
            return Err(Error::Contract(format!(
                "adam state tensor {i} is for shape {} but param has {}",
                state.shapes[i],
                p.shape()
            )));
        }
        if g.shape() != p.shape() {
            return Err(Error::Shape(format!(
                "adam_step: param {i} has shape {} but grad has {}",
                p.shape(),
                g.shape()
            )));
        }
        if g.dtype() != p.dtype() {
            return Err(Error::Dtype(format!(
                "adam_step: param {i} is {} but grad is {}",
                p.dtype(),
                g.dtype()
            )));
        }
    }

    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].to_f64_vec();
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let update_one = |idx: usize, m: &mut [f64], v: &mut [f64]| -> f64 {
            let ge = g[idx];
            m[idx] = hyper.beta1 * m[idx] + (1.0 - hyper.beta1) * ge;
            v[idx] = hyper.beta2 * v[idx] + (1.0 - hyper.beta2) * ge * ge;
            let m_hat = m[idx] / bc1;
            let v_hat = v[idx] / bc2;
            let denom = v_hat.sqrt() + hyper.eps;
            if denom == 0.0 {
                // Only possible when every gradient so far was exactly zero
                // (then m_hat is zero too); leave the parameter untouched.
                0.0
            } else {
                hyper.lr * m_hat / denom
            }
        };
        match p.as_mut_slice::<f32>() {
            Some(pv) => {
                for (idx, pe) in pv.iter_mut().enumerate() {
                    *pe = (*pe as f64 - update_one(idx, m, v)) as f32;
                }
            }
            None => {
                let pv = p.as_mut_slice::<f64>().expect("tensor is f32 or f64");
                for (idx, pe) in pv.iter_mut().enumerate() {
                    *pe -= update_one(idx, m, v);
                }
            }
        }
    }
    Ok(())
}

/// Piecewise-constant learning-rate schedule: a list of
/// `(start_iteration, lr)` milestones; the rate at iteration `i` is the one
/// of the last milestone whose start is `<= i`.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    milestones: Vec<(u64, f64)>,
}

impl LrSchedule {
    /// Milestones must start at iteration 0, be strictly increasing, and
    /// carry positive finite rates.
    pub fn new(milestones: Vec<(u64, f64)>) -> Result<LrSchedule> {
        match milestones.first() {
            None => return Err(Error::Config("lr schedule needs at least one milestone".into())),
            Some((start, _)) if *start != 0 => {
                return Err(Error::Config(format!(
                    "lr schedule must start at iteration 0, got {start}"
                )))
            }
            _ => {}
        }
        for w in milestones.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::Config(format!(
                    "lr schedule milestones must be strictly increasing, got {} then {}",
                    w[0].0, w[1].0
                )));
            }
        }
        for &(it, lr) in &milestones {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::Config(format!(
                    "lr schedule rate at iteration {it} must be positive, got {lr}"
                )));
            }
        }
        Ok(LrSchedule { milestones })
    }

    /// Learning rate in effect at `iteration`.
    pub fn lr_at(&self, iteration: u64) -> f64 {
        let idx = self
            .milestones
            .partition_point(|&(start, _)| start <= iteration);
        self.milestones[idx - 1].1
    }

    pub fn milestones(&self) -> &[(u64, f64)] {
        &self.milestones
    }
}
