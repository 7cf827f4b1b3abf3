//! Fused band-restricted multi-head attention.
//!
//! Only admissible query/key pairs are ever touched, so a range-limited
//! head costs O(T·r) time and memory rather than O(T²).

use super::kernels::{axpy, dot};
use super::Var;
use crate::rf::AttnRange;

/// Admissibility for fused attention: the band `|i − j| ≤ r` intersected
/// with the non-padded keys `j < valid`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    pub range: AttnRange,
    pub valid: usize,
}

impl AttentionMask {
    /// Key interval `[lo, hi)` visible to query `i`; empty for padded queries.
    pub fn keys(&self, i: usize) -> (usize, usize) {
        if i >= self.valid {
            return (0, 0);
        }
        match self.range {
            AttnRange::Unlimited => (0, self.valid),
            AttnRange::Limited(r) => (i.saturating_sub(r), (i + r + 1).min(self.valid)),
        }
    }
}

pub(super) struct AttentionSaved {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub heads: usize,
    pub mask: AttentionMask,
    /// Per head, the packed probability rows; row `i` starts at `offsets[i]`.
    pub probs: Option<PackedProbs>,
}

pub(super) struct PackedProbs {
    offsets: Vec<usize>,
    data: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub(super) fn forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    t: usize,
    d: usize,
    heads: usize,
    mask: AttentionMask,
    save: bool,
) -> (Vec<f64>, Option<PackedProbs>) {
    if !save {
        return (forward_tiled(q, k, v, t, d, heads, mask), None);
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; t * d];
    let mut offsets = Vec::new();
    let mut packed = Vec::new();
    if save {
        offsets.reserve(t + 1);
        offsets.push(0);
        for i in 0..t {
            let (lo, hi) = mask.keys(i);
            offsets.push(offsets[i] + (hi - lo));
        }
        packed = vec![0.0; offsets[t] * heads];
    }
    let row_total = offsets.last().copied().unwrap_or(0);
    let mut scores = Vec::new();
    for h in 0..heads {
        let col = h * dh;
        for i in 0..t {
            let (lo, hi) = mask.keys(i);
            if lo >= hi {
                continue;
            }
            let qi = &q[i * d + col..i * d + col + dh];
            scores.clear();
            scores.extend((lo..hi).map(|j| dot(qi, &k[j * d + col..j * d + col + dh]) * scale));
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - m).exp();
                z += *s;
            }
            let inv = 1.0 / z;
            let oi = &mut out[i * d + col..i * d + col + dh];
            for (jj, s) in scores.iter_mut().enumerate() {
                *s *= inv;
                let j = lo + jj;
                axpy(*s, &v[j * d + col..j * d + col + dh], oi);
            }
            if save {
                let base = h * row_total + offsets[i];
                packed[base..base + scores.len()].copy_from_slice(&scores);
            }
        }
    }
    let probs = save.then_some(PackedProbs {
        offsets,
        data: packed,
    });
    (out, probs)
}

const QUERY_TILE: usize = 32;
const KEY_TILE: usize = 128;

/// Inference-only forward: query tiles sweep key tiles with an online
/// softmax, so each key/value tile is reused while it is still in cache.
fn forward_tiled(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    t: usize,
    d: usize,
    heads: usize,
    mask: AttentionMask,
) -> Vec<f64> {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; t * d];
    let mut run_max = [f64::NEG_INFINITY; QUERY_TILE];
    let mut run_sum = [0.0; QUERY_TILE];
    let mut scores = [0.0; KEY_TILE];
    for h in 0..heads {
        let col = h * dh;
        for i0 in (0..t).step_by(QUERY_TILE) {
            let i1 = (i0 + QUERY_TILE).min(t);
            let (mut lo_all, mut hi_all) = (usize::MAX, 0);
            for i in i0..i1 {
                let (lo, hi) = mask.keys(i);
                if lo < hi {
                    lo_all = lo_all.min(lo);
                    hi_all = hi_all.max(hi);
                }
            }
            if lo_all >= hi_all {
                continue;
            }
            run_max.fill(f64::NEG_INFINITY);
            run_sum.fill(0.0);
            for j0 in (lo_all..hi_all).step_by(KEY_TILE) {
                let j1 = (j0 + KEY_TILE).min(hi_all);
                for i in i0..i1 {
                    let (lo, hi) = mask.keys(i);
                    let (a, b) = (lo.max(j0), hi.min(j1));
                    if a >= b {
                        continue;
                    }
                    let qi = &q[i * d + col..i * d + col + dh];
                    let tile = &mut scores[..b - a];
                    for (s, j) in tile.iter_mut().zip(a..b) {
                        *s = dot(qi, &k[j * d + col..j * d + col + dh]) * scale;
                    }
                    let tile_max = tile.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let oi = &mut out[i * d + col..i * d + col + dh];
                    let m = &mut run_max[i - i0];
                    if tile_max > *m {
                        let c = (*m - tile_max).exp();
                        run_sum[i - i0] *= c;
                        oi.iter_mut().for_each(|o| *o *= c);
                        *m = tile_max;
                    }
                    let m = *m;
                    let mut z = 0.0;
                    for (s, j) in tile.iter().zip(a..b) {
                        let e = (s - m).exp();
                        z += e;
                        axpy(e, &v[j * d + col..j * d + col + dh], oi);
                    }
                    run_sum[i - i0] += z;
                }
            }
            for i in i0..i1 {
                let z = run_sum[i - i0];
                if z > 0.0 {
                    let inv = 1.0 / z;
                    out[i * d + col..i * d + col + dh].iter_mut().for_each(|o| *o *= inv);
                }
            }
        }
    }
    out
}

pub(super) fn backward(
    saved: &AttentionSaved,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    g: &[f64],
    t: usize,
    d: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let probs = saved
        .probs
        .as_ref()
        .expect("attention probabilities were not saved");
    let heads = saved.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let row_total = probs.offsets[t];
    let (mut dq, mut dk, mut dv) = (vec![0.0; t * d], vec![0.0; t * d], vec![0.0; t * d]);
    let mut ds = Vec::new();
    for h in 0..heads {
        let col = h * dh;
        for i in 0..t {
            let (lo, hi) = saved.mask.keys(i);
            if lo >= hi {
                continue;
            }
            let base = h * row_total + probs.offsets[i];
            let p = &probs.data[base..base + (hi - lo)];
            let gi = &g[i * d + col..i * d + col + dh];
            ds.clear();
            let mut acc = 0.0;
            for (jj, &pj) in p.iter().enumerate() {
                let j = lo + jj;
                let dp = dot(gi, &v[j * d + col..j * d + col + dh]);
                axpy(pj, gi, &mut dv[j * d + col..j * d + col + dh]);
                ds.push(dp);
                acc += pj * dp;
            }
            let qi = &q[i * d + col..i * d + col + dh];
            for (jj, &pj) in p.iter().enumerate() {
                let j = lo + jj;
                let dsj = pj * (ds[jj] - acc) * scale;
                if dsj == 0.0 {
                    continue;
                }
                axpy(
                    dsj,
                    &k[j * d + col..j * d + col + dh],
                    &mut dq[i * d + col..i * d + col + dh],
                );
                axpy(dsj, qi, &mut dk[j * d + col..j * d + col + dh]);
            }
        }
    }
    (dq, dk, dv)
}
