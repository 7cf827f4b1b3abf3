use crate::autodiff::Var;
use crate::error::Result;
use crate::store::{ParamBuilder, ParamId, Session};

/// One LSTM direction: input projection `[4h×d_in]` with bias, recurrent `[4h×h]`.
#[derive(Clone, Debug)]
pub struct LstmDirection {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub reverse: bool,
}

/// Bidirectional LSTM layer `[T×d_in] → [T×2h]`, directions concatenated.
#[derive(Clone, Debug)]
pub struct BiLstmLayer {
    pub forward_dir: LstmDirection,
    pub backward_dir: LstmDirection,
    pub hidden: usize,
}

impl BiLstmLayer {
    pub fn new(b: &mut ParamBuilder, name: &str, d_in: usize, hidden: usize) -> Self {
        let dir = |b: &mut ParamBuilder, name: &str, reverse: bool| {
            b.scope(name, |b| LstmDirection {
                w_ih: b.uniform("w_ih", &[4 * hidden, d_in], d_in),
                w_hh: b.uniform("w_hh", &[4 * hidden, hidden], hidden),
                bias: b.uniform("bias", &[4 * hidden], hidden),
                reverse,
            })
        };
        b.scope(name, |b| Self {
            forward_dir: dir(b, "fwd", false),
            backward_dir: dir(b, "bwd", true),
            hidden,
        })
    }

    pub fn param_count(d_in: u64, hidden: u64) -> u64 {
        2 * 4 * hidden * (d_in + hidden + 1)
    }

    pub fn direction(
        &self,
        s: &mut Session,
        dir: &LstmDirection,
        x: Var,
        valid: usize,
    ) -> Result<Var> {
        let (w_ih, w_hh, b) = (s.param(dir.w_ih), s.param(dir.w_hh), s.param(dir.bias));
        let gx = s.graph.matmul_bt(x, w_ih)?;
        let gx = s.graph.add_axis(gx, b, 1)?;
        s.graph.lstm(gx, w_hh, dir.reverse, valid)
    }

    pub fn forward(&self, s: &mut Session, x: Var, valid: usize) -> Result<Var> {
        let f = self.direction(s, &self.forward_dir, x, valid)?;
        let r = self.direction(s, &self.backward_dir, x, valid)?;
        s.graph.concat(&[f, r], 1)
    }
}
