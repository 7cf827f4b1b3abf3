use crate::autodiff::{Conv1dSpec, Var};
use crate::error::Result;
use crate::store::{ParamBuilder, ParamId, Session};

use super::{BatchNorm, Linear};

/// One convolution layer of a ContextNet block on `[d×T]`.
///
/// Depthwise-separable: depthwise kernel `k` (no bias) → pointwise `d×d` →
/// batch norm → swish. Full: one `d×d×k` convolution → batch norm → swish.
#[derive(Clone, Debug)]
pub enum ConvLayer {
    Separable {
        depthwise: ParamId,
        pointwise: Linear,
        norm: BatchNorm,
        kernel: usize,
    },
    Full {
        weight: ParamId,
        bias: ParamId,
        norm: BatchNorm,
        kernel: usize,
    },
}

impl ConvLayer {
    /// `[d_in×T] → [d×T]`.
    pub fn new(
        b: &mut ParamBuilder,
        name: &str,
        d_in: usize,
        d: usize,
        kernel: usize,
        separable: bool,
    ) -> Self {
        b.scope(name, |b| {
            if separable {
                ConvLayer::Separable {
                    depthwise: b.uniform("depthwise", &[d_in, 1, kernel], kernel),
                    pointwise: Linear::new(b, "pointwise", d_in, d),
                    norm: BatchNorm::new(b, "norm", d),
                    kernel,
                }
            } else {
                ConvLayer::Full {
                    weight: b.uniform("weight", &[d, d_in, kernel], d_in * kernel),
                    bias: b.uniform("bias", &[d], d_in * kernel),
                    norm: BatchNorm::new(b, "norm", d),
                    kernel,
                }
            }
        })
    }

    pub fn param_count(d_in: u64, d: u64, k: u64, separable: bool) -> u64 {
        if separable {
            d_in * k + d_in * d + d + 2 * d
        } else {
            d * d_in * k + d + 2 * d
        }
    }

    /// Convolution and norm, before the activation.
    pub fn pre_activation(&self, s: &mut Session, x: Var, valid: usize) -> Result<Var> {
        let x = s.graph.zero_tail(x, 1, valid)?;
        let (h, norm) = match self {
            ConvLayer::Separable {
                depthwise,
                pointwise,
                norm,
                kernel,
            } => {
                let d = s.graph.shape(x)[0];
                let w = s.param(*depthwise);
                let h = s.graph.conv1d(x, w, Conv1dSpec::depthwise(*kernel, d))?;
                (pointwise.forward_channels(s, h)?, norm)
            }
            ConvLayer::Full {
                weight,
                bias,
                norm,
                kernel,
            } => {
                let (w, b) = (s.param(*weight), s.param(*bias));
                let h = s.graph.conv1d(x, w, Conv1dSpec::same(*kernel))?;
                (s.graph.add_axis(h, b, 0)?, norm)
            }
        };
        norm.forward(s, h, valid)
    }

    pub fn forward(&self, s: &mut Session, x: Var, valid: usize) -> Result<Var> {
        let h = self.pre_activation(s, x, valid)?;
        s.graph.swish(h)
    }
}

/// Squeeze-excite: channel gates from the time-averaged features.
///
/// `s = sigmoid(W₂·swish(W₁·mean_t(x) + b₁) + b₂)`, `y[c][t] = s[c]·x[c][t]`.
#[derive(Clone, Debug)]
pub struct SqueezeExcite {
    pub squeeze: Linear,
    pub excite: Linear,
}

impl SqueezeExcite {
    pub fn bottleneck(d: usize, ratio: usize) -> usize {
        (d / ratio.max(1)).max(1)
    }

    pub fn new(b: &mut ParamBuilder, d: usize, ratio: usize) -> Self {
        let m = Self::bottleneck(d, ratio);
        b.scope("se", |b| Self {
            squeeze: Linear::new(b, "squeeze", d, m),
            excite: Linear::new(b, "excite", m, d),
        })
    }

    pub fn param_count(d: u64, ratio: usize) -> u64 {
        let m = Self::bottleneck(d as usize, ratio) as u64;
        2 * d * m + m + d
    }

    /// Gates over the first `valid` frames of `x[d×T]`, shape `[d]`.
    pub fn gates(&self, s: &mut Session, x: Var, valid: usize) -> Result<Var> {
        let shape = s.graph.shape(x).to_vec();
        let xv = if valid < shape[1] {
            s.graph.narrow(x, 1, 0, valid)?
        } else {
            x
        };
        let pooled = s.graph.mean(xv, 1)?;
        let pooled = s.graph.reshape(pooled, &[1, shape[0]])?;
        let h = self.squeeze.forward(s, pooled)?;
        let h = s.graph.swish(h)?;
        let h = self.excite.forward(s, h)?;
        let g = s.graph.sigmoid(h)?;
        s.graph.reshape(g, &[shape[0]])
    }

    pub fn forward(&self, s: &mut Session, x: Var, valid: usize) -> Result<Var> {
        let g = self.gates(s, x, valid)?;
        s.graph.mul_axis(x, g, 0)
    }
}

/// Four convolution layers, optional squeeze-excite, and a residual path:
/// `y = swish(SE(conv⁴(x)) + R(x))`.
#[derive(Clone, Debug)]
pub struct ContextNetBlock {
    pub convs: Vec<ConvLayer>,
    pub se: Option<SqueezeExcite>,
    /// Pointwise projection when the input width differs, identity otherwise.
    pub residual: Option<Linear>,
}

pub const CONVS_PER_BLOCK: usize = 4;

impl ContextNetBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut ParamBuilder,
        name: &str,
        d_in: usize,
        d: usize,
        kernel: usize,
        use_ds: bool,
        use_se: bool,
        se_ratio: usize,
    ) -> Self {
        b.scope(name, |b| {
            let residual = (d_in != d).then(|| Linear::new(b, "residual", d_in, d));
            let convs = (0..CONVS_PER_BLOCK)
                .map(|i| {
                    let width_in = if i == 0 { d_in } else { d };
                    ConvLayer::new(b, &format!("conv{i}"), width_in, d, kernel, use_ds)
                })
                .collect();
            let se = use_se.then(|| SqueezeExcite::new(b, d, se_ratio));
            Self {
                convs,
                se,
                residual,
            }
        })
    }

    pub fn param_count(d_in: u64, d: u64, k: u64, use_ds: bool, se_ratio: Option<usize>) -> u64 {
        let convs = ConvLayer::param_count(d_in, d, k, use_ds)
            + (CONVS_PER_BLOCK as u64 - 1) * ConvLayer::param_count(d, d, k, use_ds);
        let se = se_ratio.map_or(0, |r| SqueezeExcite::param_count(d, r));
        let residual = if d_in == d { 0 } else { d_in * d + d };
        convs + se + residual
    }

    /// `x[d_in×T]` → `[d×T]`.
    pub fn forward(&self, s: &mut Session, x: Var, valid: usize) -> Result<Var> {
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(s, h, valid)?;
        }
        if let Some(se) = &self.se {
            h = se.forward(s, h, valid)?;
        }
        let r = match &self.residual {
            Some(p) => p.forward_channels(s, x)?,
            None => x,
        };
        let y = s.graph.add(h, r)?;
        s.graph.swish(y)
    }
}
