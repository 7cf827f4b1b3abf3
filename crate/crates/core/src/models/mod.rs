//! Subsampling frontend → encoder stack → per-frame classifier.

mod checkpoint;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{ConfigError, Result};
use crate::layers::{
    sinusoidal_positions, BiLstmLayer, ConformerLayer, ContextNetBlock, LayerNorm, Linear, SeqCtx,
    SubsampleFrontend, TransformerLayer,
};
use crate::rf::AttnRange;
use crate::store::{ParamBuilder, ParamStore, Session};
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

pub const N_MELS: usize = 80;
pub const N_CLASSES: usize = 37;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    ContextNet,
    Lstm,
    Transformer,
    Conformer,
}

impl Arch {
    pub const ALL: [Arch; 4] = [
        Arch::ContextNet,
        Arch::Lstm,
        Arch::Transformer,
        Arch::Conformer,
    ];

    pub fn has_attention(self) -> bool {
        matches!(self, Arch::Transformer | Arch::Conformer)
    }

    pub fn has_kernel(self) -> bool {
        matches!(self, Arch::ContextNet | Arch::Conformer)
    }

    pub fn name(self) -> &'static str {
        match self {
            Arch::ContextNet => "contextnet",
            Arch::Lstm => "lstm",
            Arch::Transformer => "transformer",
            Arch::Conformer => "conformer",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Arch::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| {
                format!("unknown architecture `{s}` (contextnet, lstm, transformer, conformer)")
            })
    }
}

fn default_kernel() -> usize {
    9
}
fn default_heads() -> usize {
    4
}
fn default_true() -> bool {
    true
}
fn default_channels() -> usize {
    256
}
fn default_se_ratio() -> usize {
    8
}
fn default_classes() -> usize {
    N_CLASSES
}

/// Declarative description of one model.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub arch: Arch,
    /// Layers, or blocks for ContextNet.
    pub depth: usize,
    pub width: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default)]
    pub range: AttnRange,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_true")]
    pub use_ds: bool,
    #[serde(default = "default_true")]
    pub use_se: bool,
    #[serde(default = "default_channels")]
    pub subsample_channels: usize,
    #[serde(default = "default_se_ratio")]
    pub se_ratio: usize,
    #[serde(default = "default_classes")]
    pub n_classes: usize,
}

impl ArchConfig {
    pub fn new(arch: Arch, depth: usize, width: usize) -> Self {
        Self {
            arch,
            depth,
            width,
            kernel: default_kernel(),
            range: AttnRange::Unlimited,
            heads: default_heads(),
            use_ds: true,
            use_se: true,
            subsample_channels: default_channels(),
            se_ratio: default_se_ratio(),
            n_classes: N_CLASSES,
        }
    }

    pub fn kernel(mut self, k: usize) -> Self {
        self.kernel = k;
        self
    }

    pub fn range(mut self, r: AttnRange) -> Self {
        self.range = r;
        self
    }

    pub fn heads(mut self, h: usize) -> Self {
        self.heads = h;
        self
    }

    pub fn se(mut self, on: bool) -> Self {
        self.use_se = on;
        self
    }

    pub fn ds(mut self, on: bool) -> Self {
        self.use_ds = on;
        self
    }

    pub fn channels(mut self, c: usize) -> Self {
        self.subsample_channels = c;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.depth == 0 {
            return Err(ConfigError::ZeroDepth);
        }
        if self.width == 0 {
            return Err(ConfigError::ZeroWidth);
        }
        if self.n_classes != N_CLASSES {
            return Err(ConfigError::ClassCount(self.n_classes));
        }
        if self.subsample_channels == 0 {
            return Err(ConfigError::ZeroChannels);
        }
        if self.arch.has_kernel() && self.kernel.is_multiple_of(2) {
            return Err(ConfigError::EvenKernel(self.kernel));
        }
        if self.arch.has_attention() {
            if self.heads == 0 {
                return Err(ConfigError::ZeroHeads);
            }
            if !self.width.is_multiple_of(self.heads) {
                return Err(ConfigError::HeadsDoNotDivide {
                    width: self.width,
                    heads: self.heads,
                });
            }
        }
        if self.arch == Arch::Lstm && !self.width.is_multiple_of(2) {
            return Err(ConfigError::OddLstmWidth(self.width));
        }
        if self.arch == Arch::ContextNet && self.use_se && self.se_ratio == 0 {
            return Err(ConfigError::ZeroSeRatio);
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum Encoder {
    ContextNet(Vec<ContextNetBlock>),
    Lstm(Vec<BiLstmLayer>),
    Transformer {
        layers: Vec<TransformerLayer>,
        final_norm: LayerNorm,
    },
    Conformer(Vec<ConformerLayer>),
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ArchConfig,
    store: ParamStore,
    frontend: SubsampleFrontend,
    encoder: Encoder,
    classifier: Linear,
}

impl Model {
    /// Deterministic construction: the same `(cfg, seed)` gives identical bits.
    pub fn build(cfg: &ArchConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let mut b = ParamBuilder::new(seed);
        let frontend = SubsampleFrontend::new(&mut b, N_MELS, cfg.subsample_channels, d);
        let encoder = b.scope("encoder", |b| {
            let names = (0..cfg.depth).map(|i| format!("{i}"));
            match cfg.arch {
                Arch::ContextNet => Encoder::ContextNet(
                    names
                        .map(|n| {
                            ContextNetBlock::new(
                                b,
                                &n,
                                d,
                                d,
                                cfg.kernel,
                                cfg.use_ds,
                                cfg.use_se,
                                cfg.se_ratio,
                            )
                        })
                        .collect(),
                ),
                Arch::Lstm => {
                    Encoder::Lstm(names.map(|n| BiLstmLayer::new(b, &n, d, d / 2)).collect())
                }
                Arch::Transformer => Encoder::Transformer {
                    layers: names
                        .map(|n| TransformerLayer::new(b, &n, d, cfg.heads))
                        .collect(),
                    final_norm: LayerNorm::new(b, "final_norm", d),
                },
                Arch::Conformer => Encoder::Conformer(
                    names
                        .map(|n| ConformerLayer::new(b, &n, d, cfg.heads, cfg.kernel))
                        .collect(),
                ),
            }
        });
        let classifier = Linear::new(&mut b, "classifier", d, cfg.n_classes);
        Ok(Self {
            cfg: cfg.clone(),
            store: b.finish(),
            frontend,
            encoder,
            classifier,
        })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn frontend(&self) -> &SubsampleFrontend {
        &self.frontend
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn classifier(&self) -> &Linear {
        &self.classifier
    }

    /// Trainable scalars.
    pub fn param_count(&self) -> u64 {
        self.store.trainable_count()
    }

    /// `x[80×T]` with `valid` real input frames → (`logits[T'×37]`, valid output frames).
    ///
    /// Rows of the logits at or past the valid count belong to padding.
    pub fn forward(
        &self,
        s: &mut Session,
        x: Var,
        valid: usize,
        range_override: Option<AttnRange>,
    ) -> Result<(Var, usize)> {
        let (h, v) = self.frontend.forward(s, x, valid)?;
        let h = if self.cfg.arch.has_attention() {
            let shape = s.graph.shape(h).to_vec();
            let pe = s.graph.constant(sinusoidal_positions(shape[0], shape[1]));
            let h = s.graph.add(h, pe)?;
            s.graph.zero_tail(h, 0, v)?
        } else {
            h
        };
        let h = self.encode(s, h, v, range_override)?;
        let logits = self.classifier.forward(s, h)?;
        Ok((logits, v))
    }

    /// Encoder stack alone on `[T×d]`.
    pub fn encode(
        &self,
        s: &mut Session,
        h: Var,
        valid: usize,
        range_override: Option<AttnRange>,
    ) -> Result<Var> {
        let ctx = SeqCtx {
            valid,
            range: range_override.unwrap_or(self.cfg.range),
        };
        match &self.encoder {
            Encoder::ContextNet(blocks) => {
                let mut c = s.graph.transpose(h)?;
                for blk in blocks {
                    c = blk.forward(s, c, valid)?;
                }
                s.graph.transpose(c)
            }
            Encoder::Lstm(layers) => {
                let mut h = h;
                for l in layers {
                    h = l.forward(s, h, valid)?;
                }
                Ok(h)
            }
            Encoder::Transformer { layers, final_norm } => {
                let mut h = h;
                for l in layers {
                    h = l.forward(s, h, &ctx)?;
                }
                final_norm.forward(s, h)
            }
            Encoder::Conformer(layers) => {
                let mut h = h;
                for l in layers {
                    h = l.forward(s, h, &ctx)?;
                }
                Ok(h)
            }
        }
    }

    /// Frozen-model logits for one unpadded utterance.
    pub fn infer(&self, x: &Tensor, range_override: Option<AttnRange>) -> Result<Tensor> {
        let mut s = Session::eval(&self.store);
        let xv = s.graph.constant(x.clone());
        let valid = x.shape().get(1).copied().unwrap_or(0);
        let (logits, _) = self.forward(&mut s, xv, valid, range_override)?;
        Ok(s.graph.value(logits).clone())
    }
}

/// Per-frame argmax of `logits[T×C]`; ties go to the lowest class index.
pub fn predict(logits: &Tensor) -> Vec<usize> {
    let c = logits.dim(1);
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
