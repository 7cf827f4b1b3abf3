use crate::autodiff::{AttentionMask, Var};
use crate::error::Result;
use crate::store::{ParamBuilder, Session};

use super::{Linear, SeqCtx};

/// Multi-head self-attention with query/key/value/output projections.
///
/// The per-head width is `d / heads`, so the parameter count does not
/// depend on the number of heads.
#[derive(Clone, Debug)]
pub struct Mhsa {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Mhsa {
    pub fn new(b: &mut ParamBuilder, name: &str, d: usize, heads: usize) -> Self {
        b.scope(name, |b| Self {
            query: Linear::new(b, "query", d, d),
            key: Linear::new(b, "key", d, d),
            value: Linear::new(b, "value", d, d),
            out: Linear::new(b, "out", d, d),
            heads,
        })
    }

    pub fn param_count(d: u64) -> u64 {
        4 * (d * d + d)
    }

    pub fn forward(&self, s: &mut Session, x: Var, ctx: &SeqCtx) -> Result<Var> {
        let q = self.query.forward(s, x)?;
        let k = self.key.forward(s, x)?;
        let v = self.value.forward(s, x)?;
        let a = s.graph.attention(
            q,
            k,
            v,
            self.heads,
            AttentionMask::new(ctx.range, ctx.valid),
        )?;
        self.out.forward(s, a)
    }
}
