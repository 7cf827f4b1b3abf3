//! Raw loops behind the tracked ops. All slices are row-major.

/// Column tile width, so the streamed operand stays cache-resident across rows.
const COL_TILE: usize = 256;

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for j0 in (0..n).step_by(COL_TILE) {
        let j1 = (j0 + COL_TILE).min(n);
        for i in 0..m {
            let c_row = &mut c[i * n + j0..i * n + j1];
            for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                axpy(aik, &b[kk * n + j0..kk * n + j1], c_row);
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for j0 in (0..n).step_by(COL_TILE) {
        let j1 = (j0 + COL_TILE).min(n);
        for i in 0..m {
            let a_row = &a[i * k..(i + 1) * k];
            for j in j0..j1 {
                c[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
            }
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for j0 in (0..n).step_by(COL_TILE) {
        let j1 = (j0 + COL_TILE).min(n);
        for kk in 0..k {
            let b_row = &b[kk * n + j0..kk * n + j1];
            for i in 0..m {
                let aki = a[kk * m + i];
                if aki == 0.0 {
                    continue;
                }
                axpy(aki, b_row, &mut c[i * n + j0..i * n + j1]);
            }
        }
    }
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Dot product with four independent accumulators so the loop vectorizes.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for c in 0..chunks {
        let o = c * 4;
        acc[0] += a[o] * b[o];
        acc[1] += a[o + 1] * b[o + 1];
        acc[2] += a[o + 2] * b[o + 2];
        acc[3] += a[o + 3] * b[o + 3];
    }
    let mut tail = 0.0;
    for o in chunks * 4..n {
        tail += a[o] * b[o];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv1dGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Conv1dGeom {
    /// Output positions `t` whose input index `t·stride + kk − pad` lies inside `0..t_in`.
    fn valid_range(&self, kk: usize) -> (usize, usize) {
        let off = kk as isize - self.pad as isize;
        let s = self.stride as isize;
        // smallest t with t*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest t with t*s + off <= t_in - 1
        let last = self.t_in as isize - 1 - off;
        if last < 0 {
            return (0, 0);
        }
        let hi = (last / s + 1).min(self.t_out as isize);
        if lo >= hi {
            (0, 0)
        } else {
            (lo as usize, hi as usize)
        }
    }
}

/// Output positions per tile, so the input slab stays cache-resident across channels.
const CONV_TIME_TILE: usize = 256;

pub(crate) fn conv1d_forward(x: &[f64], w: &[f64], out: &mut [f64], g: Conv1dGeom) {
    let cpg = g.c_in / g.groups;
    let opg = g.c_out / g.groups;
    for t0 in (0..g.t_out).step_by(CONV_TIME_TILE) {
        let t1 = (t0 + CONV_TIME_TILE).min(g.t_out);
        for co in 0..g.c_out {
            let grp = co / opg;
            let out_row = &mut out[co * g.t_out..(co + 1) * g.t_out];
            for ci in 0..cpg {
                let x_row = &x[(grp * cpg + ci) * g.t_in..(grp * cpg + ci + 1) * g.t_in];
                for kk in 0..g.k {
                    let wv = w[(co * cpg + ci) * g.k + kk];
                    if wv == 0.0 {
                        continue;
                    }
                    let (lo, hi) = g.valid_range(kk);
                    let (lo, hi) = (lo.max(t0), hi.min(t1));
                    if lo >= hi {
                        continue;
                    }
                    let start = lo * g.stride + kk - g.pad;
                    if g.stride == 1 {
                        axpy(wv, &x_row[start..start + (hi - lo)], &mut out_row[lo..hi]);
                    } else {
                        for (t, o) in out_row[lo..hi].iter_mut().enumerate() {
                            *o += wv * x_row[start + t * g.stride];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    g: Conv1dGeom,
) {
    let cpg = g.c_in / g.groups;
    let opg = g.c_out / g.groups;
    let mut dx = dx;
    let mut dw = dw;
    for co in 0..g.c_out {
        let grp = co / opg;
        let d_row = &dout[co * g.t_out..(co + 1) * g.t_out];
        for ci in 0..cpg {
            let xi = grp * cpg + ci;
            for kk in 0..g.k {
                let (lo, hi) = g.valid_range(kk);
                if lo >= hi {
                    continue;
                }
                let start = lo * g.stride + kk - g.pad;
                let widx = (co * cpg + ci) * g.k + kk;
                if let Some(dw) = dw.as_deref_mut() {
                    let x_row = &x[xi * g.t_in..(xi + 1) * g.t_in];
                    let acc = if g.stride == 1 {
                        dot(&d_row[lo..hi], &x_row[start..start + (hi - lo)])
                    } else {
                        (lo..hi)
                            .map(|t| d_row[t] * x_row[start + (t - lo) * g.stride])
                            .sum()
                    };
                    dw[widx] += acc;
                }
                if let Some(dx) = dx.as_deref_mut() {
                    let wv = w[widx];
                    if wv == 0.0 {
                        continue;
                    }
                    let dx_row = &mut dx[xi * g.t_in..(xi + 1) * g.t_in];
                    if g.stride == 1 {
                        axpy(wv, &d_row[lo..hi], &mut dx_row[start..start + (hi - lo)]);
                    } else {
                        for t in lo..hi {
                            dx_row[start + (t - lo) * g.stride] += wv * d_row[t];
                        }
                    }
                }
            }
        }
    }
}

/// Geometry of a 2-D convolution over `[C × F × T]` inputs.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv2dGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub f_in: usize,
    pub t_in: usize,
    pub f_out: usize,
    pub t_out: usize,
    pub kf: usize,
    pub kt: usize,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl Conv2dGeom {
    fn t_axis(&self) -> Conv1dGeom {
        Conv1dGeom {
            c_in: 1,
            c_out: 1,
            t_in: self.t_in,
            t_out: self.t_out,
            k: self.kt,
            stride: self.stride.1,
            pad: self.pad.1,
            groups: 1,
        }
    }

    fn f_in_index(&self, fo: usize, a: usize) -> Option<usize> {
        let fi = (fo * self.stride.0 + a) as isize - self.pad.0 as isize;
        (fi >= 0 && (fi as usize) < self.f_in).then_some(fi as usize)
    }
}

pub(crate) fn conv2d_forward(x: &[f64], w: &[f64], out: &mut [f64], g: Conv2dGeom) {
    let ta = g.t_axis();
    let plane_in = g.f_in * g.t_in;
    let plane_out = g.f_out * g.t_out;
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            for a in 0..g.kf {
                for b in 0..g.kt {
                    let wv = w[((co * g.c_in + ci) * g.kf + a) * g.kt + b];
                    if wv == 0.0 {
                        continue;
                    }
                    let (lo, hi) = ta.valid_range(b);
                    if lo >= hi {
                        continue;
                    }
                    let start = lo * g.stride.1 + b - g.pad.1;
                    for fo in 0..g.f_out {
                        let Some(fi) = g.f_in_index(fo, a) else {
                            continue;
                        };
                        let x_row =
                            &x[ci * plane_in + fi * g.t_in..ci * plane_in + (fi + 1) * g.t_in];
                        let o_row = &mut out
                            [co * plane_out + fo * g.t_out..co * plane_out + (fo + 1) * g.t_out];
                        for (t, o) in o_row[lo..hi].iter_mut().enumerate() {
                            *o += wv * x_row[start + t * g.stride.1];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    g: Conv2dGeom,
) {
    let ta = g.t_axis();
    let plane_in = g.f_in * g.t_in;
    let plane_out = g.f_out * g.t_out;
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            for a in 0..g.kf {
                for b in 0..g.kt {
                    let widx = ((co * g.c_in + ci) * g.kf + a) * g.kt + b;
                    let wv = w[widx];
                    let (lo, hi) = ta.valid_range(b);
                    if lo >= hi {
                        continue;
                    }
                    let start = lo * g.stride.1 + b - g.pad.1;
                    let mut acc = 0.0;
                    for fo in 0..g.f_out {
                        let Some(fi) = g.f_in_index(fo, a) else {
                            continue;
                        };
                        let d_row = &dout
                            [co * plane_out + fo * g.t_out..co * plane_out + (fo + 1) * g.t_out];
                        let xo = ci * plane_in + fi * g.t_in;
                        if dw.is_some() {
                            let x_row = &x[xo..xo + g.t_in];
                            for t in lo..hi {
                                acc += d_row[t] * x_row[start + (t - lo) * g.stride.1];
                            }
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            if wv != 0.0 {
                                let dx_row = &mut dx[xo..xo + g.t_in];
                                for t in lo..hi {
                                    dx_row[start + (t - lo) * g.stride.1] += wv * d_row[t];
                                }
                            }
                        }
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `(outer, n, inner)` view of `shape` around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
