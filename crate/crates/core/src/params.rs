//! Closed-form parameter counts and budget-constrained width solving.
//!
//! Per-component formulas (`d` width, `k` kernel, `C` subsampling channels,
//! `m = max(1, d/ρ)` SE bottleneck):
//!
//! | component               | trainable scalars                 |
//! |-------------------------|-----------------------------------|
//! | frontend (80 mel bins)  | `9C² + 11C + 20Cd + d`            |
//! | DS conv layer           | `dk + d² + d + 2d`                |
//! | full conv layer         | `d²k + d + 2d`                    |
//! | SE module               | `2dm + m + d`                     |
//! | BiLSTM layer (h = d/2)  | `2 · 4h(d + h + 1)`               |
//! | Transformer layer       | `12d² + 13d` (+ `2d` final norm)  |
//! | Conformer layer         | `23d² + dk + 30d`                 |
//! | classifier              | `37d + 37`                        |

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    BiLstmLayer, ConformerLayer, ContextNetBlock, SubsampleFrontend, TransformerLayer,
};
use crate::models::{Arch, ArchConfig, N_MELS};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Breakdown {
    pub frontend: u64,
    pub encoder: u64,
    pub classifier: u64,
}

impl Breakdown {
    pub fn total(&self) -> u64 {
        self.frontend + self.encoder + self.classifier
    }
}

pub fn breakdown(cfg: &ArchConfig) -> Breakdown {
    let (d, k, l) = (cfg.width as u64, cfg.kernel as u64, cfg.depth as u64);
    let encoder = match cfg.arch {
        Arch::ContextNet => {
            l * ContextNetBlock::param_count(
                d,
                d,
                k,
                cfg.use_ds,
                cfg.use_se.then_some(cfg.se_ratio),
            )
        }
        Arch::Lstm => l * BiLstmLayer::param_count(d, d / 2),
        Arch::Transformer => l * TransformerLayer::param_count(d) + 2 * d,
        Arch::Conformer => l * ConformerLayer::param_count(d, k),
    };
    Breakdown {
        frontend: SubsampleFrontend::param_count(N_MELS, cfg.subsample_channels, cfg.width),
        encoder,
        classifier: cfg.n_classes as u64 * d + cfg.n_classes as u64,
    }
}

/// Trainable scalars of `build_model(cfg)`, subsampler and classifier included.
pub fn count_params(cfg: &ArchConfig) -> u64 {
    breakdown(cfg).total()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBudget {
    pub target: u64,
    #[serde(default = "ParamBudget::default_tolerance")]
    pub tolerance: f64,
}

impl ParamBudget {
    pub const DEFAULT_TOLERANCE: f64 = 0.03;

    fn default_tolerance() -> f64 {
        Self::DEFAULT_TOLERANCE
    }

    pub fn new(target: u64) -> Self {
        Self {
            target,
            tolerance: Self::DEFAULT_TOLERANCE,
        }
    }

    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = tolerance;
        self
    }

    pub fn limit(&self) -> u64 {
        (self.target as f64 * (1.0 + self.tolerance)).floor() as u64
    }
}

/// Granularity of admissible widths for a config.
pub fn width_step(cfg: &ArchConfig) -> usize {
    match cfg.arch {
        Arch::Transformer | Arch::Conformer => cfg.heads.max(1),
        Arch::Lstm => 2,
        Arch::ContextNet => 1,
    }
}

/// Largest admissible width whose count stays within `budget.limit()`.
///
/// Every field of `template` except `width` is kept.
pub fn solve_width(template: &ArchConfig, budget: ParamBudget) -> Result<usize> {
    if budget.target == 0 || !(budget.tolerance >= 0.0) {
        return Err(Error::contract(
            "solve_width",
            "budget target must be positive and tolerance non-negative",
        ));
    }
    let step = width_step(template);
    let count = |m: usize| {
        let mut c = template.clone();
        c.width = m * step;
        count_params(&c)
    };
    let limit = budget.limit();
    let minimum = count(1);
    if minimum > limit {
        return Err(Error::InfeasibleBudget {
            target: budget.target,
            minimum,
        });
    }
    let mut lo = 1;
    let mut hi = 2;
    while count(hi) <= limit {
        lo = hi;
        hi *= 2;
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if count(mid) <= limit {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut probe = template.clone();
    probe.width = lo * step;
    probe.validate()?;
    Ok(lo * step)
}
