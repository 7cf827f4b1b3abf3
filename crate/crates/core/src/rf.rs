//! Receptive-field arithmetic, attention band masks, and a perturbation oracle.
//!
//! Radii are one-sided and counted in subsampled (40 ms) frames. A stack's
//! radius is the sum of its layers' radii; the field length is `2R + 1`.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Arch, ArchConfig, Model};
use crate::tensor::Tensor;

/// Output frame period after 4× subsampling.
pub const FRAME_SECONDS: f64 = 0.04;

/// Self-attention range: `|i − j| ≤ r`, or no restriction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum AttnRange {
    Limited(usize),
    #[default]
    Unlimited,
}

impl AttnRange {
    pub fn is_unlimited(self) -> bool {
        matches!(self, AttnRange::Unlimited)
    }

    pub fn admits(self, i: usize, j: usize) -> bool {
        match self {
            AttnRange::Unlimited => true,
            AttnRange::Limited(r) => i.abs_diff(j) <= r,
        }
    }
}

impl fmt::Display for AttnRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttnRange::Limited(r) => write!(f, "{r}"),
            AttnRange::Unlimited => f.write_str("unlimited"),
        }
    }
}

impl FromStr for AttnRange {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("unlimited") || s.eq_ignore_ascii_case("inf") {
            return Ok(AttnRange::Unlimited);
        }
        s.parse::<usize>().map(AttnRange::Limited).map_err(|_| {
            format!(
                "invalid attention range `{s}` (expected a non-negative integer or `unlimited`)"
            )
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RangeRepr {
    Frames(usize),
    Word(String),
}

impl Serialize for AttnRange {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match *self {
            AttnRange::Limited(r) => RangeRepr::Frames(r),
            AttnRange::Unlimited => RangeRepr::Word("unlimited".into()),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for AttnRange {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match RangeRepr::deserialize(d)? {
            RangeRepr::Frames(r) => Ok(AttnRange::Limited(r)),
            RangeRepr::Word(w) => w.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Attention admissibility over a length-`T` sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BandMask {
    len: usize,
    range: AttnRange,
}

impl BandMask {
    pub fn new(len: usize, range: AttnRange) -> Result<Self> {
        if len == 0 {
            return Err(Error::contract(
                "band_mask",
                "sequence length must be at least 1",
            ));
        }
        Ok(Self { len, range })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn range(&self) -> AttnRange {
        self.range
    }

    pub fn admissible(&self, i: usize, j: usize) -> bool {
        i < self.len && j < self.len && self.range.admits(i, j)
    }

    /// Admissible keys of row `i` as `[lo, hi)`.
    pub fn row_bounds(&self, i: usize) -> (usize, usize) {
        match self.range {
            AttnRange::Unlimited => (0, self.len),
            AttnRange::Limited(r) => (i.saturating_sub(r), (i + r + 1).min(self.len)),
        }
    }

    pub fn admissible_count(&self) -> usize {
        (0..self.len)
            .map(|i| {
                let (lo, hi) = self.row_bounds(i);
                hi - lo
            })
            .sum()
    }

    pub fn to_matrix(&self) -> Vec<Vec<bool>> {
        (0..self.len)
            .map(|i| (0..self.len).map(|j| self.admissible(i, j)).collect())
            .collect()
    }
}

/// Receptive-field contribution of a single layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv { kernel: usize },
    Attention { range: AttnRange },
    Conformer { kernel: usize, range: AttnRange },
    Lstm,
    SqueezeExcite,
}

/// One-sided radius of a layer, `None` when it sees the whole sequence.
pub fn layer_rf_radius(kind: LayerKind) -> Option<usize> {
    let attn = |r: AttnRange| match r {
        AttnRange::Limited(r) => Some(r),
        AttnRange::Unlimited => None,
    };
    match kind {
        LayerKind::Conv { kernel } => Some(kernel.saturating_sub(1) / 2),
        LayerKind::Attention { range } => attn(range),
        LayerKind::Conformer { kernel, range } => {
            attn(range).map(|r| r + kernel.saturating_sub(1) / 2)
        }
        LayerKind::Lstm | LayerKind::SqueezeExcite => None,
    }
}

/// Receptive field of a whole encoder.
///
/// `radius` is the finite part that the conv and band-limited attention
/// layers contribute; `bounded` is false when any layer sees the whole
/// sequence. A ContextNet with SE keeps its conv radius alongside
/// `bounded = false`, matching how the tables report it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct RfSpec {
    pub radius: Option<usize>,
    pub bounded: bool,
}

impl RfSpec {
    pub fn frames(&self) -> Option<usize> {
        self.radius.map(|r| 2 * r + 1)
    }

    pub fn seconds(&self) -> Option<f64> {
        self.frames().map(|f| f as f64 * FRAME_SECONDS)
    }

    /// Seconds with exactly two decimals, computed in integer centiseconds.
    pub fn seconds_label(&self) -> Option<String> {
        self.frames().map(|f| {
            let cs = f * 4;
            format!("{}.{:02}", cs / 100, cs % 100)
        })
    }

    /// Span including the subsampler halo: each output frame covers
    /// `4·frames + 3` input frames of 10 ms plus the trailing 15 ms of the last
    /// 25 ms analysis window.
    pub fn exact_seconds_label(&self) -> Option<String> {
        self.frames().map(|f| {
            let ms = (4 * f + 3) * 10 + 15;
            format!("{}.{:03}", ms / 1000, ms % 1000)
        })
    }
}

pub fn model_receptive_field(cfg: &ArchConfig) -> RfSpec {
    let per_layer = match cfg.arch {
        Arch::ContextNet => {
            let conv = 4 * layer_rf_radius(LayerKind::Conv { kernel: cfg.kernel }).unwrap_or(0);
            return RfSpec {
                radius: Some(conv * cfg.depth),
                bounded: !cfg.use_se,
            };
        }
        Arch::Lstm => layer_rf_radius(LayerKind::Lstm),
        Arch::Transformer => layer_rf_radius(LayerKind::Attention { range: cfg.range }),
        Arch::Conformer => layer_rf_radius(LayerKind::Conformer {
            kernel: cfg.kernel,
            range: cfg.range,
        }),
    };
    match per_layer {
        Some(r) => RfSpec {
            radius: Some(r * cfg.depth),
            bounded: true,
        },
        None => RfSpec {
            radius: None,
            bounded: false,
        },
    }
}

/// Attention range whose band matches `n_conv_layers` stacked convolutions of kernel `k`.
pub fn attention_range_for_kernel(k: usize, n_conv_layers: usize) -> usize {
    n_conv_layers * (k.saturating_sub(1) / 2)
}

/// Outcome of a perturbation sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmpiricalRf {
    Bounded(usize),
    Unbounded,
}

/// Logit change at or below which a probe counts as "no influence". Frames
/// outside the field are computed from bit-identical inputs, so any change
/// at all is real influence; SE gates at initialisation can move far frames
/// by as little as 1e-11.
pub const PERTURBATION_THRESHOLD: f64 = 0.0;

fn probe_patterns(n_mels: usize) -> Vec<Vec<f64>> {
    let mut r = crate::rng::stream(0, 0x9f0be);
    let signed: Vec<f64> = (0..n_mels)
        .map(|_| if r.random_bool(0.5) { 8.0 } else { -8.0 })
        .collect();
    let flipped = signed.iter().map(|v| -v).collect();
    vec![vec![1.0; n_mels], vec![-1.0; n_mels], signed, flipped]
}

/// Measures the receptive field of a frozen model by perturbation.
///
/// Input frame `4s` maps onto subsampled frame `s` alone, so bumping all 80
/// bins of that frame probes the encoder from position `s`. Each position is
/// bumped by several patterns (uniform of either sign, and random-signed
/// across bins) and the reaches are merged, since one pattern can vanish in
/// the dead ReLUs of a narrow frontend. The
/// radius is the largest `|t − s|` whose logits move by more than
/// [`PERTURBATION_THRESHOLD`]. When an edge probe reaches the opposite edge
/// the field cannot be bounded at this length and `Unbounded` is returned.
pub fn empirical_receptive_field(model: &Model, input: &Tensor) -> Result<EmpiricalRf> {
    let base = model.infer(input, None)?;
    let t_out = base.dim(0);
    if t_out < 3 {
        return Err(Error::Inconclusive(format!(
            "{t_out} output frames cannot separate bounded from unbounded fields"
        )));
    }
    let t_in = input.dim(1);
    let patterns = probe_patterns(input.dim(0));
    let reach: Vec<Result<usize>> = (0..t_out)
        .into_par_iter()
        .map(|s| {
            let col = (4 * s).min(t_in - 1);
            let mut far = 0;
            for pattern in &patterns {
                let mut x = input.clone();
                for (m, delta) in pattern.iter().enumerate() {
                    x.data_mut()[m * t_in + col] += delta;
                }
                let out = model.infer(&x, None)?;
                for t in 0..t_out {
                    let moved = out
                        .row(t)
                        .iter()
                        .zip(base.row(t))
                        .any(|(a, b)| (a - b).abs() > PERTURBATION_THRESHOLD);
                    if moved {
                        far = far.max(t.abs_diff(s));
                    }
                }
            }
            Ok(far)
        })
        .collect();
    let mut radius = 0;
    for r in reach {
        radius = radius.max(r?);
    }
    if radius >= t_out - 1 {
        Ok(EmpiricalRf::Unbounded)
    } else {
        Ok(EmpiricalRf::Bounded(radius))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn band_counts() {
        let m = BandMask::new(10, AttnRange::Limited(2)).unwrap();
        let brute = (0..10)
            .flat_map(|i| (0..10).map(move |j| (i, j)))
            .filter(|&(i, j)| (i as i64 - j as i64).abs() <= 2)
            .count();
        assert_eq!(m.admissible_count(), brute);
        assert_eq!(m.admissible_count(), 44);
    }

    #[test]
    fn band_identity_and_saturation() {
        let m = BandMask::new(5, AttnRange::Limited(0)).unwrap();
        for (i, row) in m.to_matrix().iter().enumerate() {
            for (j, &a) in row.iter().enumerate() {
                assert_eq!(a, i == j);
            }
        }
        let m = BandMask::new(3, AttnRange::Limited(5)).unwrap();
        assert!(m.to_matrix().iter().flatten().all(|&a| a));
        assert_eq!(
            m.to_matrix(),
            BandMask::new(3, AttnRange::Unlimited).unwrap().to_matrix()
        );
    }

    #[test]
    fn layer_radii() {
        assert_eq!(layer_rf_radius(LayerKind::Conv { kernel: 1 }), Some(0));
        assert_eq!(
            layer_rf_radius(LayerKind::Conformer {
                kernel: 9,
                range: AttnRange::Limited(4)
            }),
            Some(8)
        );
        let stack: usize = (0..4)
            .map(|_| layer_rf_radius(LayerKind::Conv { kernel: 9 }).unwrap())
            .sum();
        assert_eq!(2 * stack + 1, 4 * 9 - 3);
        assert_eq!(layer_rf_radius(LayerKind::Lstm), None);
        assert_eq!(layer_rf_radius(LayerKind::SqueezeExcite), None);
    }

    #[test]
    fn kernel_matched_range() {
        assert_eq!(attention_range_for_kernel(9, 4), 16);
        assert_eq!(attention_range_for_kernel(1, 4), 0);
        for k in (1..40).step_by(2) {
            assert_eq!(attention_range_for_kernel(k, 4), 2 * k - 2);
        }
    }

    #[test]
    fn range_parsing() {
        assert_eq!(
            "unlimited".parse::<AttnRange>().unwrap(),
            AttnRange::Unlimited
        );
        assert_eq!("12".parse::<AttnRange>().unwrap(), AttnRange::Limited(12));
        assert!("-1".parse::<AttnRange>().is_err());
        let json = serde_json::to_string(&[AttnRange::Limited(3), AttnRange::Unlimited]).unwrap();
        assert_eq!(json, r#"[3,"unlimited"]"#);
        let back: Vec<AttnRange> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, vec![AttnRange::Limited(3), AttnRange::Unlimited]);
    }

    #[test]
    fn seconds_labels() {
        let rf = RfSpec {
            radius: Some(32),
            bounded: true,
        };
        assert_eq!(rf.frames(), Some(65));
        assert_eq!(rf.seconds_label().as_deref(), Some("2.60"));
        assert!((rf.seconds().unwrap() - 2.6).abs() < 1e-12);
        assert_eq!(rf.exact_seconds_label().as_deref(), Some("2.645"));
    }
}
