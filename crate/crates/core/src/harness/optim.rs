//! AdamW with decoupled weight decay, warmup + cosine schedule, and global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-3,
        }
    }
}

/// First and second moments per parameter, zero-initialised.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = |id: ParamId| vec![0.0; store.get(id).len()];
        Self {
            step: 0,
            m: store.ids().map(zeros).collect(),
            v: store.ids().map(zeros).collect(),
        }
    }
}

/// One update of every parameter in `grads`.
///
/// `p ← p − lr·wd·p`, then the bias-corrected Adam step
/// `p ← p − lr·m̂/(√v̂ + ε)`.
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &[(ParamId, Tensor)],
    state: &mut AdamState,
    lr: f64,
    opt: &AdamW,
) -> Result<()> {
    for (id, g) in grads {
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(store.name(*id).to_string()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    for (id, g) in grads {
        let i = id.index();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let p = store.get_mut(*id).data_mut();
        for (j, &gj) in g.data().iter().enumerate() {
            p[j] -= lr * opt.weight_decay * p[j];
            m[j] = opt.beta1 * m[j] + (1.0 - opt.beta1) * gj;
            v[j] = opt.beta2 * v[j] + (1.0 - opt.beta2) * gj * gj;
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            p[j] -= lr * mh / (vh.sqrt() + opt.eps);
        }
    }
    Ok(())
}

/// Linear warmup over `warmup` iterations, then cosine decay to 0 at `total`.
pub fn learning_rate(iter: usize, total: usize, warmup: usize, max_lr: f64) -> f64 {
    if iter < warmup {
        return max_lr * (iter + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((iter - warmup) as f64 / span as f64).min(1.0);
    0.5 * max_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Rescales gradients so their global L2 norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [(ParamId, Tensor)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
