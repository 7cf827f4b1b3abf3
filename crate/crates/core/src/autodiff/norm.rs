//! Row normalization shared by layer norm and batch norm.
//!
//! Both reduce over contiguous rows: layer norm over each `[d]` frame of a
//! `[T×d]` tensor, batch norm over each channel row of a `[C×T]` tensor.
//! Statistics come from the first `valid` entries of a row and are applied
//! to the whole row, which keeps padded frames out of the batch statistics.

use super::Var;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(super) enum Affine {
    /// `gamma`/`beta` indexed by column (layer norm).
    PerColumn,
    /// `gamma`/`beta` indexed by row (batch norm).
    PerRow,
}

pub(super) struct NormSaved {
    pub x: Var,
    pub gamma: Var,
    pub beta: Var,
    pub rows: usize,
    pub cols: usize,
    pub valid: usize,
    pub affine: Affine,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub rstd: Vec<f64>,
    pub xhat: Vec<f64>,
    pub out: Vec<f64>,
}

/// Two-pass mean and biased variance of the first `valid` entries of each row.
pub(super) fn row_stats(x: &[f64], rows: usize, cols: usize, valid: usize) -> (Vec<f64>, Vec<f64>) {
    let n = valid as f64;
    let mut mean = Vec::with_capacity(rows);
    let mut var = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * cols..r * cols + valid];
        let m = row.iter().sum::<f64>() / n;
        let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
        mean.push(m);
        var.push(v);
    }
    (mean, var)
}

#[allow(clippy::too_many_arguments)]
pub(super) fn forward(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    rows: usize,
    cols: usize,
    valid: usize,
    eps: f64,
    affine: Affine,
) -> NormSaved {
    let (mean, var) = row_stats(x, rows, cols, valid);
    let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; rows * cols];
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            xhat[i] = (x[i] - mean[r]) * rstd[r];
            let p = if affine == Affine::PerRow { r } else { c };
            out[i] = gamma[p] * xhat[i] + beta[p];
        }
    }
    NormSaved {
        x: Var(0),
        gamma: Var(0),
        beta: Var(0),
        rows,
        cols,
        valid,
        affine,
        mean,
        var,
        rstd,
        xhat,
        out,
    }
}

pub(super) fn backward(s: &NormSaved, gamma: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (rows, cols) = (s.rows, s.cols);
    let n = s.valid as f64;
    let plen = gamma.len();
    let mut dx = vec![0.0; rows * cols];
    let mut dgamma = vec![0.0; plen];
    let mut dbeta = vec![0.0; plen];
    let mut ghat = vec![0.0; cols];
    for r in 0..rows {
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for c in 0..cols {
            let i = r * cols + c;
            let p = if s.affine == Affine::PerRow { r } else { c };
            dgamma[p] += g[i] * s.xhat[i];
            dbeta[p] += g[i];
            ghat[c] = g[i] * gamma[p];
            sum_g += ghat[c];
            sum_gx += ghat[c] * s.xhat[i];
        }
        let rstd = s.rstd[r];
        for c in 0..cols {
            let i = r * cols + c;
            dx[i] = rstd * ghat[c];
            if c < s.valid {
                dx[i] -= rstd / n * (sum_g + s.xhat[i] * sum_gx);
            }
        }
    }
    (dx, dgamma, dbeta)
}
