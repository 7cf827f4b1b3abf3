//! Synthetic frame corpus with a planted long-range dependency.
//!
//! Time is organised in slots of four input frames, one per subsampled
//! output frame: slot `s` covers input frames `4s−2 ..= 4s+1`, so the
//! model's output frame `s` is centred on it. Each slot renders as
//!
//! * local class `c`: a Gaussian bump (σ = 1 bin) centred on mel bin `2c`
//!   (class 0, silence, renders flat);
//! * cue (the first [`CUE_SLOTS`] slots): the bump of the utterance's cue
//!   class plus the flag bins set to +1;
//! * query: the flag bins set to −1 and nothing else. Its label is the cue
//!   class, so it can only be recovered by looking back at least
//!   `cue_distance` input frames.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::corpus::{FrameCorpus, Utterance};
use crate::error::{Error, Result};
use crate::layers::subsampled_len;
use crate::models::{N_CLASSES, N_MELS};
use crate::rng;
use crate::tensor::Tensor;

pub const CUE_SLOTS: usize = 2;
/// Mel bins carrying the cue (+1) and query (−1) flags.
pub const FLAG_BINS: std::ops::Range<usize> = 77..80;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_utts: usize,
    /// Inclusive range of utterance lengths in input frames.
    pub t_min: usize,
    pub t_max: usize,
    /// Target fraction of labelled output frames that are queries.
    pub long_range_fraction: f64,
    /// Minimum gap in input frames between the cue and any query.
    pub cue_distance: usize,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::contract("synth", reason));
        if self.t_min < crate::layers::MIN_INPUT_FRAMES || self.t_min > self.t_max {
            return bad(format!(
                "invalid length range {}..={}",
                self.t_min, self.t_max
            ));
        }
        if !(0.0..=1.0).contains(&self.long_range_fraction) {
            return bad(format!(
                "long_range_fraction {} outside [0, 1]",
                self.long_range_fraction
            ));
        }
        if self.cue_distance >= self.t_min {
            return bad(format!(
                "cue_distance {} must be below t_min {}",
                self.cue_distance, self.t_min
            ));
        }
        if !(self.noise >= 0.0) {
            return bad("noise must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Cue,
    Query,
    Local(u8),
}

/// Everything about an utterance except the noise.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UttPlan {
    pub frames: usize,
    pub cue_class: u8,
    pub slots: Vec<Slot>,
}

pub fn slot_of_frame(f: usize) -> usize {
    (f + 2) / 4
}

/// Input frames `[lo, hi)` of slot `s`, clipped to the utterance.
pub fn slot_frames(s: usize, frames: usize) -> (usize, usize) {
    (
        (4 * s).saturating_sub(2).min(frames),
        (4 * s + 2).min(frames),
    )
}

impl UttPlan {
    pub fn label(&self, slot: usize) -> u8 {
        match self.slots[slot] {
            Slot::Cue | Slot::Query => self.cue_class,
            Slot::Local(c) => c,
        }
    }

    pub fn frame_labels(&self) -> Vec<u8> {
        (0..self.frames)
            .map(|f| self.label(slot_of_frame(f)))
            .collect()
    }

    /// Labelled output frames (those the model emits).
    pub fn output_frames(&self) -> usize {
        subsampled_len(self.frames)
    }

    /// Noise-free rendering `[80×T]`.
    pub fn render(&self) -> Tensor {
        let t = self.frames;
        let mut x = Tensor::zeros([N_MELS, t]);
        let d = x.data_mut();
        for (s, slot) in self.slots.iter().enumerate() {
            let (lo, hi) = slot_frames(s, t);
            let (bump, flag) = match *slot {
                Slot::Local(c) => (c, 0.0),
                Slot::Cue => (self.cue_class, 1.0),
                Slot::Query => (0, -1.0),
            };
            for f in lo..hi {
                if bump > 0 {
                    let mu = 2.0 * bump as f64;
                    for (m, v) in (0..FLAG_BINS.start).map(|m| (m, m as f64)) {
                        d[m * t + f] += (-(v - mu) * (v - mu) / 2.0).exp();
                    }
                }
                for m in FLAG_BINS {
                    d[m * t + f] = flag;
                }
            }
        }
        x
    }
}

fn plan_utterance(spec: &SynthSpec, rng: &mut rng::Rng) -> UttPlan {
    let frames = rng.random_range(spec.t_min..=spec.t_max);
    let n_slots = slot_of_frame(frames - 1) + 1;
    let labelled = subsampled_len(frames);
    let cue_class = rng.random_range(0..N_CLASSES) as u8;
    let (_, cue_end) = slot_frames(CUE_SLOTS - 1, frames);
    let eligible: Vec<usize> = (CUE_SLOTS..labelled)
        .filter(|&s| slot_frames(s, frames).0 >= cue_end - 1 + spec.cue_distance)
        .collect();
    let p = if eligible.is_empty() {
        0.0
    } else {
        (spec.long_range_fraction * labelled as f64 / eligible.len() as f64).min(1.0)
    };
    let mut slots = vec![Slot::Cue; CUE_SLOTS.min(n_slots)];
    let (mut class, mut run) = (0u8, 0usize);
    for s in slots.len()..n_slots {
        if eligible.binary_search(&s).is_ok() && rng.random_bool(p) {
            slots.push(Slot::Query);
            continue;
        }
        if run == 0 {
            class = rng.random_range(0..N_CLASSES) as u8;
            run = rng.random_range(1..=3);
        }
        slots.push(Slot::Local(class));
        run -= 1;
    }
    UttPlan {
        frames,
        cue_class,
        slots,
    }
}

pub fn synth_plans(spec: &SynthSpec) -> Result<Vec<UttPlan>> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, 0x5157);
    Ok((0..spec.n_utts)
        .map(|_| plan_utterance(spec, &mut rng))
        .collect())
}

pub fn render_corpus(plans: &[UttPlan], noise: f64, seed: u64) -> Result<FrameCorpus> {
    let mut rng = rng::stream(seed, 0x401e);
    let normal =
        Normal::new(0.0, noise.max(0.0)).map_err(|e| Error::contract("synth", e.to_string()))?;
    let mut utterances = Vec::with_capacity(plans.len());
    for (i, p) in plans.iter().enumerate() {
        let mut x = p.render();
        if noise > 0.0 {
            x.data_mut()
                .iter_mut()
                .for_each(|v| *v += normal.sample(&mut rng));
        }
        utterances.push(Utterance::new(format!("synth{i:05}"), x, p.frame_labels())?);
    }
    Ok(FrameCorpus { utterances })
}

pub fn synth_corpus(spec: &SynthSpec) -> Result<FrameCorpus> {
    let plans = synth_plans(spec)?;
    render_corpus(&plans, spec.noise, spec.seed)
}

/// Accuracy of the Bayes-optimal classifier that sees only input frames
/// within `radius` output frames (plus the subsampler's ±3-frame halo) of
/// each labelled frame, on noise-free renderings.
///
/// The only hidden variable is the cue class, so the posterior is computed
/// exactly by re-rendering each plan under all 37 alternatives and keeping
/// those whose window matches.
pub fn windowed_bayes_accuracy(plans: &[UttPlan], radius: usize) -> f64 {
    let (mut correct, mut total) = (0.0, 0usize);
    for plan in plans {
        let alts: Vec<(Tensor, UttPlan)> = (0..N_CLASSES as u8)
            .map(|q| {
                let p = UttPlan {
                    cue_class: q,
                    ..plan.clone()
                };
                (p.render(), p)
            })
            .collect();
        let truth = &alts[plan.cue_class as usize].0;
        let t = plan.frames;
        for s in 0..plan.output_frames() {
            let lo = (4 * s.saturating_sub(radius)).saturating_sub(3);
            let hi = (4 * (s + radius) + 4).min(t);
            let same_window = |x: &Tensor| {
                (0..N_MELS).all(|m| {
                    x.data()[m * t + lo..m * t + hi] == truth.data()[m * t + lo..m * t + hi]
                })
            };
            let mut counts = [0usize; N_CLASSES];
            let mut consistent = 0;
            for (x, p) in &alts {
                if same_window(x) {
                    counts[p.label(s) as usize] += 1;
                    consistent += 1;
                }
            }
            correct += *counts.iter().max().unwrap() as f64 / consistent as f64;
            total += 1;
        }
    }
    if total == 0 {
        1.0
    } else {
        correct / total as f64
    }
}

/// Fraction of labelled output frames that are queries.
pub fn query_fraction(plans: &[UttPlan]) -> f64 {
    let (mut q, mut n) = (0, 0);
    for p in plans {
        for s in 0..p.output_frames() {
            n += 1;
            if p.slots[s] == Slot::Query {
                q += 1;
            }
        }
    }
    q as f64 / n.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(f: f64) -> SynthSpec {
        SynthSpec {
            n_utts: 20,
            t_min: 96,
            t_max: 128,
            long_range_fraction: f,
            cue_distance: 40,
            noise: 0.0,
            seed: 3,
        }
    }

    #[test]
    fn slots_tile_frames() {
        for frames in 7..50 {
            let mut seen = vec![0; frames];
            for s in 0..=slot_of_frame(frames - 1) {
                let (lo, hi) = slot_frames(s, frames);
                (lo..hi).for_each(|f| seen[f] += 1);
            }
            assert!(seen.iter().all(|&c| c == 1));
        }
    }

    #[test]
    fn labels_follow_slots_at_output_rate() {
        let plans = synth_plans(&spec(0.3)).unwrap();
        for p in &plans {
            let labels = p.frame_labels();
            let sub = crate::dataio::subsample_labels(&labels, p.output_frames());
            for (s, &l) in sub.iter().enumerate() {
                assert_eq!(l, p.label(s) as usize);
            }
        }
    }

    #[test]
    fn queries_respect_distance() {
        let s = spec(0.3);
        for p in synth_plans(&s).unwrap() {
            for (i, slot) in p.slots.iter().enumerate() {
                if *slot == Slot::Query {
                    assert!(slot_frames(i, p.frames).0 >= 5 + s.cue_distance);
                }
            }
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(
            synth_corpus(&spec(0.2)).unwrap(),
            synth_corpus(&spec(0.2)).unwrap()
        );
    }

    #[test]
    fn local_only_is_fully_recoverable() {
        let plans = synth_plans(&spec(0.0)).unwrap();
        assert_eq!(windowed_bayes_accuracy(&plans, 0), 1.0);
    }
}
