use crate::autodiff::{Conv1dSpec, Var};
use crate::error::Result;
use crate::store::{ParamBuilder, ParamId, Session};

use super::{Activation, BatchNorm, FeedForward, LayerNorm, Linear, Mhsa, SeqCtx};

/// LN → pointwise `d→2d` → GLU → depthwise `k` → BN → swish → pointwise `d→d`.
#[derive(Clone, Debug)]
pub struct ConvModule {
    pub norm: LayerNorm,
    pub expand: Linear,
    pub depthwise: ParamId,
    pub depthwise_bias: ParamId,
    pub bn: BatchNorm,
    pub project: Linear,
    pub kernel: usize,
}

impl ConvModule {
    pub fn new(b: &mut ParamBuilder, name: &str, d: usize, kernel: usize) -> Self {
        b.scope(name, |b| Self {
            norm: LayerNorm::new(b, "norm", d),
            expand: Linear::new(b, "expand", d, 2 * d),
            depthwise: b.uniform("depthwise", &[d, 1, kernel], kernel),
            depthwise_bias: b.uniform("depthwise_bias", &[d], kernel),
            bn: BatchNorm::new(b, "bn", d),
            project: Linear::new(b, "project", d, d),
            kernel,
        })
    }

    pub fn param_count(d: u64, k: u64) -> u64 {
        2 * d + (2 * d * d + 2 * d) + (d * k + d) + 2 * d + (d * d + d)
    }

    /// `[T×d]` → `[T×d]`.
    pub fn forward(&self, s: &mut Session, x: Var, valid: usize) -> Result<Var> {
        let d = s.graph.shape(x)[1];
        let h = self.norm.forward(s, x)?;
        let h = s.graph.transpose(h)?;
        let h = self.expand.forward_channels(s, h)?;
        let h = s.graph.glu(h, 0)?;
        let h = s.graph.zero_tail(h, 1, valid)?;
        let (w, b) = (s.param(self.depthwise), s.param(self.depthwise_bias));
        let h = s
            .graph
            .conv1d(h, w, Conv1dSpec::depthwise(self.kernel, d))?;
        let h = s.graph.add_axis(h, b, 0)?;
        let h = self.bn.forward(s, h, valid)?;
        let h = s.graph.swish(h)?;
        let h = self.project.forward_channels(s, h)?;
        s.graph.transpose(h)
    }
}

/// `x + ½FF(x)` → `+ MHSA` → `+ Conv` → `+ ½FF` → LN, each submodule pre-normed.
#[derive(Clone, Debug)]
pub struct ConformerLayer {
    pub ff1_norm: LayerNorm,
    pub ff1: FeedForward,
    pub attn_norm: LayerNorm,
    pub attn: Mhsa,
    pub conv: ConvModule,
    pub ff2_norm: LayerNorm,
    pub ff2: FeedForward,
    pub final_norm: LayerNorm,
}

impl ConformerLayer {
    pub fn new(b: &mut ParamBuilder, name: &str, d: usize, heads: usize, kernel: usize) -> Self {
        b.scope(name, |b| Self {
            ff1_norm: LayerNorm::new(b, "ff1_norm", d),
            ff1: FeedForward::new(b, "ff1", d, Activation::Swish),
            attn_norm: LayerNorm::new(b, "attn_norm", d),
            attn: Mhsa::new(b, "attn", d, heads),
            conv: ConvModule::new(b, "conv", d, kernel),
            ff2_norm: LayerNorm::new(b, "ff2_norm", d),
            ff2: FeedForward::new(b, "ff2", d, Activation::Swish),
            final_norm: LayerNorm::new(b, "final_norm", d),
        })
    }

    pub fn param_count(d: u64, k: u64) -> u64 {
        23 * d * d + d * k + 30 * d
    }

    fn half_ff(s: &mut Session, norm: &LayerNorm, ff: &FeedForward, x: Var) -> Result<Var> {
        let n = norm.forward(s, x)?;
        let f = ff.forward(s, n)?;
        let f = s.graph.scale(f, 0.5)?;
        s.graph.add(x, f)
    }

    pub fn forward(&self, s: &mut Session, x: Var, ctx: &SeqCtx) -> Result<Var> {
        let h = Self::half_ff(s, &self.ff1_norm, &self.ff1, x)?;
        let n = self.attn_norm.forward(s, h)?;
        let a = self.attn.forward(s, n, ctx)?;
        let h = s.graph.add(h, a)?;
        let c = self.conv.forward(s, h, ctx.valid)?;
        let h = s.graph.add(h, c)?;
        let h = Self::half_ff(s, &self.ff2_norm, &self.ff2, h)?;
        self.final_norm.forward(s, h)
    }
}
