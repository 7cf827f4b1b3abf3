//! SpecAugment-style frequency and time masking.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub n_freq_masks: usize,
    pub freq_width_max: usize,
    pub n_time_masks: usize,
    pub time_width_max: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            n_freq_masks: 2,
            freq_width_max: 15,
            n_time_masks: 2,
            time_width_max: 30,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            n_freq_masks: 0,
            freq_width_max: 0,
            n_time_masks: 0,
            time_width_max: 0,
        }
    }

    pub fn is_identity(&self) -> bool {
        (self.n_freq_masks == 0 || self.freq_width_max == 0)
            && (self.n_time_masks == 0 || self.time_width_max == 0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mask {
    /// Mel bins `[start, start + width)`.
    Freq { start: usize, width: usize },
    /// Frames `[start, start + width)`.
    Time { start: usize, width: usize },
}

static CALLS: AtomicU64 = AtomicU64::new(0);

/// Number of [`spec_augment`] calls made by this process.
pub fn augment_calls() -> u64 {
    CALLS.load(Ordering::Relaxed)
}

/// Draws mask positions: widths uniform in `0..=max` (clamped to the axis),
/// starts uniform over the positions where the mask fits.
pub fn sample_masks(n_mels: usize, t: usize, cfg: &AugmentConfig, rng: &mut Rng) -> Vec<Mask> {
    let mut masks = Vec::new();
    let draw = |extent: usize, max: usize, rng: &mut Rng| {
        let width = rng.random_range(0..=max.min(extent));
        let start = rng.random_range(0..=extent - width);
        (start, width)
    };
    for _ in 0..cfg.n_freq_masks {
        let (start, width) = draw(n_mels, cfg.freq_width_max, rng);
        masks.push(Mask::Freq { start, width });
    }
    for _ in 0..cfg.n_time_masks {
        let (start, width) = draw(t, cfg.time_width_max, rng);
        masks.push(Mask::Time { start, width });
    }
    masks
}

/// Sets every masked cell of `x[n_mels×T]` to the utterance mean (taken before masking).
pub fn apply_masks(x: &Tensor, masks: &[Mask]) -> Tensor {
    let (m, t) = (x.dim(0), x.dim(1));
    let mean = x.data().iter().sum::<f64>() / x.len() as f64;
    let mut out = x.clone();
    let d = out.data_mut();
    for mask in masks {
        match *mask {
            Mask::Freq { start, width } => {
                for bin in start..(start + width).min(m) {
                    d[bin * t..(bin + 1) * t].iter_mut().for_each(|v| *v = mean);
                }
            }
            Mask::Time { start, width } => {
                for bin in 0..m {
                    let row = &mut d[bin * t..(bin + 1) * t];
                    row[start.min(t)..(start + width).min(t)]
                        .iter_mut()
                        .for_each(|v| *v = mean);
                }
            }
        }
    }
    out
}

pub fn spec_augment(x: &Tensor, cfg: &AugmentConfig, rng: &mut Rng) -> (Tensor, Vec<Mask>) {
    CALLS.fetch_add(1, Ordering::Relaxed);
    if cfg.is_identity() {
        return (x.clone(), Vec::new());
    }
    let masks = sample_masks(x.dim(0), x.dim(1), cfg, rng);
    (apply_masks(x, &masks), masks)
}
