//! One LSTM direction with backpropagation through time.
//!
//! Gate layout in the `4h` axis is `[i, f, g, o]`:
//!
//! ```text
//! i = σ(gx_i + W_i h)   f = σ(gx_f + W_f h)
//! g = tanh(gx_g + W_g h) o = σ(gx_o + W_o h)
//! c' = f ⊙ c + i ⊙ g     h' = o ⊙ tanh(c')
//! ```

use super::kernels::{axpy, dot, sigmoid};
use super::Var;

pub(super) struct LstmSaved {
    pub gx: Var,
    pub w_hh: Var,
    pub reverse: bool,
    pub valid: usize,
    pub hidden: usize,
    pub cache: Option<StepCache>,
}

/// Activations per processed step, in processing order.
pub(super) struct StepCache {
    gates: Vec<f64>,
    cell: Vec<f64>,
    tanh_cell: Vec<f64>,
}

fn frame(step: usize, valid: usize, reverse: bool) -> usize {
    if reverse {
        valid - 1 - step
    } else {
        step
    }
}

pub(super) fn forward(
    gx: &[f64],
    w: &[f64],
    t: usize,
    h: usize,
    reverse: bool,
    valid: usize,
    save: bool,
) -> (Vec<f64>, Option<StepCache>) {
    let g4 = 4 * h;
    let mut out = vec![0.0; t * h];
    let mut hs = vec![0.0; h];
    let mut cs = vec![0.0; h];
    let mut pre = vec![0.0; g4];
    let mut cache = save.then(|| StepCache {
        gates: Vec::with_capacity(valid * g4),
        cell: Vec::with_capacity(valid * h),
        tanh_cell: Vec::with_capacity(valid * h),
    });
    for step in 0..valid {
        let tt = frame(step, valid, reverse);
        pre.copy_from_slice(&gx[tt * g4..(tt + 1) * g4]);
        for (r, p) in pre.iter_mut().enumerate() {
            *p += dot(&w[r * h..(r + 1) * h], &hs);
        }
        for u in 0..h {
            let i = sigmoid(pre[u]);
            let f = sigmoid(pre[h + u]);
            let g = pre[2 * h + u].tanh();
            let o = sigmoid(pre[3 * h + u]);
            pre[u] = i;
            pre[h + u] = f;
            pre[2 * h + u] = g;
            pre[3 * h + u] = o;
            cs[u] = f * cs[u] + i * g;
            let tc = cs[u].tanh();
            hs[u] = o * tc;
            if let Some(c) = cache.as_mut() {
                c.tanh_cell.push(tc);
            }
        }
        out[tt * h..(tt + 1) * h].copy_from_slice(&hs);
        if let Some(c) = cache.as_mut() {
            c.gates.extend_from_slice(&pre);
            c.cell.extend_from_slice(&cs);
        }
    }
    (out, cache)
}

pub(super) fn backward(s: &LstmSaved, w: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let cache = s.cache.as_ref().expect("lstm activations were not saved");
    let (h, valid) = (s.hidden, s.valid);
    let g4 = 4 * h;
    let t = g.len() / h;
    let mut dgx = vec![0.0; t * g4];
    let mut dw = vec![0.0; g4 * h];
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    let mut dpre = vec![0.0; g4];
    let zeros = vec![0.0; h];
    for step in (0..valid).rev() {
        let tt = frame(step, valid, s.reverse);
        let gates = &cache.gates[step * g4..(step + 1) * g4];
        let tc = &cache.tanh_cell[step * h..(step + 1) * h];
        let c_prev = if step > 0 {
            &cache.cell[(step - 1) * h..step * h]
        } else {
            &zeros[..]
        };
        for u in 0..h {
            let (i, f, gg, o) = (gates[u], gates[h + u], gates[2 * h + u], gates[3 * h + u]);
            let dh = g[tt * h + u] + dh_next[u];
            let dc = dc_next[u] + dh * o * (1.0 - tc[u] * tc[u]);
            dpre[u] = dc * gg * i * (1.0 - i);
            dpre[h + u] = dc * c_prev[u] * f * (1.0 - f);
            dpre[2 * h + u] = dc * i * (1.0 - gg * gg);
            dpre[3 * h + u] = dh * tc[u] * o * (1.0 - o);
            dc_next[u] = dc * f;
        }
        dgx[tt * g4..(tt + 1) * g4].copy_from_slice(&dpre);
        // h_prev = o ⊙ tanh(c) of the previous step; zero at the first step.
        dh_next.iter_mut().for_each(|v| *v = 0.0);
        if step > 0 {
            let o_prev = &cache.gates[(step - 1) * g4 + 3 * h..step * g4];
            let tc_prev = &cache.tanh_cell[(step - 1) * h..step * h];
            for (r, &dp) in dpre.iter().enumerate() {
                if dp == 0.0 {
                    continue;
                }
                for u in 0..h {
                    dw[r * h + u] += dp * o_prev[u] * tc_prev[u];
                }
                axpy(dp, &w[r * h..(r + 1) * h], &mut dh_next);
            }
        }
    }
    (dgx, dw)
}
