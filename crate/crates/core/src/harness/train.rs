use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::optim::{adamw_step, clip_global_norm, learning_rate, AdamState, AdamW};
use super::report::{config_hash, RunReport};
use crate::dataio::{pad_batch, spec_augment, AugmentConfig, FrameCorpus, Utterance};
use crate::error::{Error, Result};
use crate::models::{save_checkpoint, Model};
use crate::rf::AttnRange;
use crate::rng;
use crate::store::Session;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_lr: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Linear warmup length; `None` means 5% of `iterations`.
    pub warmup_iters: Option<usize>,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub augment: AugmentConfig,
    pub bn_momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Where to write the final checkpoint.
    #[serde(skip)]
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Laptop-scale defaults: 2K iterations of 16 utterances.
    pub fn desk() -> Self {
        Self {
            max_lr: 1e-3,
            weight_decay: 1e-3,
            iterations: 2000,
            batch_size: 16,
            seed: 0,
            warmup_iters: None,
            clip_norm: Some(5.0),
            augment: AugmentConfig::default(),
            bn_momentum: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            checkpoint: None,
        }
    }

    /// The full recipe: 25K iterations of 128 utterances.
    pub fn paper() -> Self {
        Self {
            iterations: 25_000,
            batch_size: 128,
            ..Self::desk()
        }
    }

    pub fn warmup(&self) -> usize {
        self.warmup_iters.unwrap_or(self.iterations / 20)
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn lr(&self, iter: usize) -> f64 {
        learning_rate(iter, self.iterations, self.warmup(), self.max_lr)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| Err(Error::contract("train config", reason.to_string()));
        if !(self.max_lr >= 0.0 && self.max_lr.is_finite()) {
            return bad("max_lr must be a finite non-negative number");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.warmup() > self.iterations {
            return bad("warmup_iters exceeds iterations");
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad("clip_norm must be positive");
            }
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("bn_momentum must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Mean over utterances of the per-utterance mean cross-entropy on valid frames.
pub fn batch_loss(
    model: &Model,
    s: &mut Session,
    utts: &[&Utterance],
    range: Option<AttnRange>,
) -> Result<crate::autodiff::Var> {
    let batch = pad_batch(utts);
    let mut total = None;
    for i in 0..batch.len() {
        let x = s.graph.constant(batch.features[i].clone());
        let (logits, v) = model.forward(s, x, batch.valid[i], range)?;
        let logits = s.graph.narrow(logits, 0, 0, v)?;
        let ce = s.graph.cross_entropy(logits, &batch.labels[i])?;
        total = Some(match total {
            None => ce,
            Some(t) => s.graph.add(t, ce)?,
        });
    }
    let total = total.ok_or_else(|| Error::contract("batch_loss", "empty batch"))?;
    s.graph.scale(total, 1.0 / batch.len() as f64)
}

/// Trains `model` in place.
///
/// Batches are drawn from a per-epoch shuffle; SpecAugment is applied to
/// each training utterance before padding.
pub fn train(model: &mut Model, corpus: &FrameCorpus, cfg: &TrainConfig) -> Result<RunReport> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::contract("train", "corpus is empty"));
    }
    let start = Instant::now();
    let opt = cfg.optimizer();
    let mut state = AdamState::new(model.store());
    let mut order_rng = rng::stream(cfg.seed, 0x0bde);
    let mut aug_rng = rng::stream(cfg.seed, 0xa06);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut cursor = order.len();
    let mut report = RunReport::new(config_hash(&(model.config(), cfg)));
    for iter in 0..cfg.iterations {
        let mut picked = Vec::with_capacity(cfg.batch_size);
        while picked.len() < cfg.batch_size.min(corpus.len()) {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            picked.push(order[cursor]);
            cursor += 1;
        }
        let augmented: Vec<Utterance> = picked
            .iter()
            .map(|&i| {
                let u = &corpus.utterances[i];
                let (features, _) = spec_augment(&u.features, &cfg.augment, &mut aug_rng);
                Utterance {
                    features,
                    ..u.clone()
                }
            })
            .collect();
        let refs: Vec<&Utterance> = augmented.iter().collect();

        let (loss, mut grads, observed) = {
            let mut s = Session::train(model.store());
            let loss = batch_loss(model, &mut s, &refs, None)?;
            let value = s.graph.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged(iter));
            }
            s.graph.backward(loss)?;
            (value, s.gradients(), s.observations().to_vec())
        };
        let norm = match cfg.clip_norm {
            Some(c) => clip_global_norm(&mut grads, c),
            None => clip_global_norm(&mut grads, f64::INFINITY),
        };
        let lr = cfg.lr(iter);
        adamw_step(model.store_mut(), &grads, &mut state, lr, &opt)?;
        model
            .store_mut()
            .update_running_stats(&observed, cfg.bn_momentum);
        report.push_step(loss, lr, norm);
    }
    report.wall_seconds = start.elapsed().as_secs_f64();
    if let Some(path) = &cfg.checkpoint {
        save_checkpoint(model, path)?;
    }
    Ok(report)
}
