//! Building blocks of the four encoder families.
//!
//! Sequence layout is `[T×d]` (time-major) between layers; convolutional
//! layers work channel-first on `[d×T]` internally.

mod attention;
mod conformer;
mod contextnet;
mod frontend;
mod lstm;
mod transformer;

pub use attention::Mhsa;
pub use conformer::{ConformerLayer, ConvModule};
pub use contextnet::{ContextNetBlock, ConvLayer, SqueezeExcite};
pub use frontend::{subsampled_len, SubsampleFrontend, MIN_INPUT_FRAMES};
pub use lstm::BiLstmLayer;
pub use transformer::TransformerLayer;

use crate::autodiff::Var;
use crate::error::Result;
use crate::rf::AttnRange;
use crate::store::{Mode, ParamBuilder, ParamId, Session};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;
pub const BN_EPS: f64 = 1e-5;

/// Per-sequence context threaded through every layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeqCtx {
    /// Non-padded frames at the current (subsampled) rate.
    pub valid: usize,
    /// Attention range to apply; layers without attention ignore it.
    pub range: AttnRange,
}

/// `y = x·Wᵀ + b` on `[T×in]` inputs, weight `[out×in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(b: &mut ParamBuilder, name: &str, d_in: usize, d_out: usize) -> Self {
        b.scope(name, |b| Self {
            weight: b.uniform("weight", &[d_out, d_in], d_in),
            bias: Some(b.uniform("bias", &[d_out], d_in)),
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let y = s.graph.matmul_bt(x, w)?;
        match self.bias {
            Some(b) => {
                let b = s.param(b);
                s.graph.add_axis(y, b, 1)
            }
            None => Ok(y),
        }
    }

    /// Channel-first application: `y[out×T] = W·x[in×T] + b`.
    pub fn forward_channels(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let y = s.graph.matmul(w, x)?;
        match self.bias {
            Some(b) => {
                let b = s.param(b);
                s.graph.add_axis(y, b, 0)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut ParamBuilder, name: &str, d: usize) -> Self {
        b.scope(name, |b| Self {
            gamma: b.constant("gamma", &[d], 1.0),
            beta: b.constant("beta", &[d], 0.0),
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (g, b) = (s.param(self.gamma), s.param(self.beta));
        s.graph.layer_norm(x, g, b, LN_EPS)
    }
}

/// Batch norm over channel rows of `[C×T]`, statistics from valid frames.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(b: &mut ParamBuilder, name: &str, c: usize) -> Self {
        b.scope(name, |b| Self {
            gamma: b.constant("gamma", &[c], 1.0),
            beta: b.constant("beta", &[c], 0.0),
            running_mean: b.buffer("running_mean", &[c], 0.0),
            running_var: b.buffer("running_var", &[c], 1.0),
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var, valid: usize) -> Result<Var> {
        let (g, b) = (s.param(self.gamma), s.param(self.beta));
        match s.mode() {
            Mode::Train => {
                let (y, stats) = s.graph.batch_norm_train(x, g, b, BN_EPS, valid)?;
                s.observe(self.running_mean, self.running_var, stats);
                Ok(y)
            }
            Mode::Eval => {
                let (m, v) = (s.buffer(self.running_mean), s.buffer(self.running_var));
                s.graph
                    .batch_norm_infer(x, m.data(), v.data(), g, b, BN_EPS)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Swish,
}

impl Activation {
    pub fn apply(self, s: &mut Session, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => s.graph.relu(x),
            Activation::Swish => s.graph.swish(x),
        }
    }
}

/// Position-wise `d → 4d → d` feed-forward.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
    pub act: Activation,
}

pub const FF_EXPANSION: usize = 4;

impl FeedForward {
    pub fn new(b: &mut ParamBuilder, name: &str, d: usize, act: Activation) -> Self {
        b.scope(name, |b| Self {
            up: Linear::new(b, "up", d, FF_EXPANSION * d),
            down: Linear::new(b, "down", FF_EXPANSION * d, d),
            act,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.up.forward(s, x)?;
        let h = self.act.apply(s, h)?;
        self.down.forward(s, h)
    }
}

/// Absolute sinusoidal position table `[T×d]`.
pub fn sinusoidal_positions(t: usize, d: usize) -> Tensor {
    Tensor::from_fn([t, d], |idx| {
        let (pos, i) = (idx / d, idx % d);
        let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let angle = pos as f64 * freq;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}
