//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// First and second moment estimates plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }
}

/// One AdamW update. A `None` gradient leaves that parameter and its moments
/// untouched (frozen); `Some(zeros)` still applies weight decay.
///
/// `p ← p·(1 − lr·wd) − lr · m̂ / (√v̂ + eps)`
pub fn adamw_step<T: Real>(
    params: &mut [Tensor<T>],
    names: &[String],
    grads: &[Option<Tensor<T>>],
    state: &mut AdamState<T>,
    opt: &AdamW,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != names.len() {
        return Err(Error::invalid(format!(
            "adamw_step: {} params, {} names, {} grads, {} moment slots",
            params.len(),
            names.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), name) in params.iter().zip(grads).zip(names) {
        if let Some(g) = g {
            if g.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adamw_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
    }

    state.t += 1;
    let t = state.t as i32;
    let b1 = T::of(opt.beta1);
    let b2 = T::of(opt.beta2);
    let c1 = T::of(1.0 - opt.beta1);
    let c2 = T::of(1.0 - opt.beta2);
    let bias1 = T::of(1.0 - opt.beta1.powi(t));
    let bias2 = T::of(1.0 - opt.beta2.powi(t));
    let lr = T::of(opt.lr);
    let eps = T::of(opt.eps);
    let shrink = T::of(1.0 - opt.lr * opt.weight_decay);

    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        let p = params[i].data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for j in 0..p.len() {
            let gj = g.data()[j];
            m[j] = b1 * m[j] + c1 * gj;
            v[j] = b2 * v[j] + c2 * gj * gj;
            let m_hat = m[j] / bias1;
            let v_hat = v[j] / bias2;
            p[j] = p[j] * shrink - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|x| x.f64() * x.f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}
