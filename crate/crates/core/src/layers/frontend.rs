use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::store::{ParamBuilder, ParamId, Session};

use super::Linear;

/// Shortest input the frontend accepts.
pub const MIN_INPUT_FRAMES: usize = 7;

const KERNEL: usize = 3;
const STRIDE: usize = 2;
const PAD: usize = 1;

fn conv_len(n: usize) -> usize {
    (n + 2 * PAD - KERNEL) / STRIDE + 1
}

/// Output frames for `t` input frames: two 'same'-padded stride-2 convs,
/// `T₁ = ⌊(T − 1)/2⌋ + 1` then `T' = ⌊(T₁ − 1)/2⌋ + 1`.
pub fn subsampled_len(t: usize) -> usize {
    conv_len(conv_len(t))
}

/// Two 3×3 stride-2 convolutions over (frequency, time) followed by a
/// projection of the flattened channel×frequency axis to the encoder width.
///
/// With 80 mel bins the frequency axis shrinks 80 → 40 → 20.
#[derive(Clone, Debug)]
pub struct SubsampleFrontend {
    pub conv1: (ParamId, ParamId),
    pub conv2: (ParamId, ParamId),
    pub proj: Linear,
    pub channels: usize,
    pub n_mels: usize,
}

impl SubsampleFrontend {
    pub fn new(b: &mut ParamBuilder, n_mels: usize, channels: usize, d: usize) -> Self {
        b.scope("frontend", |b| {
            let c1 = b.scope("conv1", |b| {
                (
                    b.uniform("weight", &[channels, 1, KERNEL, KERNEL], KERNEL * KERNEL),
                    b.uniform("bias", &[channels], KERNEL * KERNEL),
                )
            });
            let fan2 = channels * KERNEL * KERNEL;
            let c2 = b.scope("conv2", |b| {
                (
                    b.uniform("weight", &[channels, channels, KERNEL, KERNEL], fan2),
                    b.uniform("bias", &[channels], fan2),
                )
            });
            let f_out = conv_len(conv_len(n_mels));
            Self {
                conv1: c1,
                conv2: c2,
                proj: Linear::new(b, "proj", channels * f_out, d),
                channels,
                n_mels,
            }
        })
    }

    pub fn param_count(n_mels: usize, channels: usize, d: usize) -> u64 {
        let (c, k2) = (channels as u64, (KERNEL * KERNEL) as u64);
        let f_out = conv_len(conv_len(n_mels)) as u64;
        (k2 * c + c) + (k2 * c * c + c) + (c * f_out * d as u64 + d as u64)
    }

    /// `x[n_mels×T]` with `valid` real frames → `([T'×d], valid')`.
    pub fn forward(&self, s: &mut Session, x: Var, valid: usize) -> Result<(Var, usize)> {
        let shape = s.graph.shape(x).to_vec();
        let [n_mels, t] = shape[..] else {
            return Err(Error::contract(
                "subsample",
                format!("expected [n_mels×T], got {shape:?}"),
            ));
        };
        if n_mels != self.n_mels {
            return Err(Error::Shape {
                op: "subsample",
                lhs: shape,
                rhs: vec![self.n_mels],
            });
        }
        if valid < MIN_INPUT_FRAMES || t < valid {
            return Err(Error::SequenceTooShort {
                len: valid.min(t),
                min: MIN_INPUT_FRAMES,
            });
        }
        let x = s.graph.reshape(x, &[1, n_mels, t])?;
        let v1 = conv_len(valid);
        let h = self.conv_stage(s, x, self.conv1, v1)?;
        let v2 = conv_len(v1);
        let h = self.conv_stage(s, h, self.conv2, v2)?;
        let hs = s.graph.shape(h).to_vec();
        let h = s.graph.reshape(h, &[hs[0] * hs[1], hs[2]])?;
        let h = s.graph.transpose(h)?;
        let y = self.proj.forward(s, h)?;
        let y = s.graph.zero_tail(y, 0, v2)?;
        Ok((y, v2))
    }

    fn conv_stage(
        &self,
        s: &mut Session,
        x: Var,
        (w, b): (ParamId, ParamId),
        valid: usize,
    ) -> Result<Var> {
        let (w, b) = (s.param(w), s.param(b));
        let h = s.graph.conv2d(x, w, (STRIDE, STRIDE), (PAD, PAD))?;
        let h = s.graph.add_axis(h, b, 0)?;
        let h = s.graph.relu(h)?;
        // Padded frames must read as zeros to the next stride-2 conv.
        s.graph.zero_tail(h, 2, valid)
    }
}
