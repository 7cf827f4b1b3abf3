use crate::autodiff::Var;
use crate::error::Result;
use crate::store::{ParamBuilder, Session};

use super::{Activation, FeedForward, LayerNorm, Mhsa, SeqCtx};

/// Pre-norm layer: `h = x + MHSA(LN(x))`, `y = h + FF(LN(h))`.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub attn_norm: LayerNorm,
    pub attn: Mhsa,
    pub ff_norm: LayerNorm,
    pub ff: FeedForward,
}

impl TransformerLayer {
    pub fn new(b: &mut ParamBuilder, name: &str, d: usize, heads: usize) -> Self {
        b.scope(name, |b| Self {
            attn_norm: LayerNorm::new(b, "attn_norm", d),
            attn: Mhsa::new(b, "attn", d, heads),
            ff_norm: LayerNorm::new(b, "ff_norm", d),
            ff: FeedForward::new(b, "ff", d, Activation::Relu),
        })
    }

    pub fn param_count(d: u64) -> u64 {
        12 * d * d + 13 * d
    }

    pub fn forward(&self, s: &mut Session, x: Var, ctx: &SeqCtx) -> Result<Var> {
        let n = self.attn_norm.forward(s, x)?;
        let a = self.attn.forward(s, n, ctx)?;
        let h = s.graph.add(x, a)?;
        let n = self.ff_norm.forward(s, h)?;
        let f = self.ff.forward(s, n)?;
        s.graph.add(h, f)
    }
}
