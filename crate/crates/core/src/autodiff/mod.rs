//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every op in creation order, so the node vector is
//! already a topological order. `backward` walks it once in reverse and
//! accumulates gradients additively across fan-out.

mod attention;
pub(crate) mod kernels;
mod lstm;
mod norm;

use crate::error::{Error, Result};
use crate::rf::{AttnRange, BandMask};
use crate::tensor::Tensor;

use kernels::{split_axis, Conv1dGeom, Conv2dGeom};

pub use attention::AttentionMask;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameters of a 1-D convolution (cross-correlation, no kernel flip).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv1dSpec {
    /// Stride 1 with `(k - 1) / 2` zero padding on each side.
    pub fn same(k: usize) -> Self {
        Self {
            stride: 1,
            padding: (k - 1) / 2,
            groups: 1,
        }
    }

    pub fn depthwise(k: usize, channels: usize) -> Self {
        Self {
            groups: channels,
            ..Self::same(k)
        }
    }
}

/// Batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddAxis {
        x: Var,
        b: Var,
        axis: usize,
    },
    MulAxis {
        x: Var,
        s: Var,
        axis: usize,
    },
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Conv1d {
        x: Var,
        w: Var,
        geom: Conv1dGeom,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: Conv2dGeom,
    },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Swish(Var),
    Glu {
        x: Var,
        axis: usize,
    },
    Mean {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Transpose(Var),
    Reshape(Var),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    ZeroTail {
        x: Var,
        axis: usize,
        valid: usize,
    },
    SoftmaxMasked {
        x: Var,
    },
    Attention(Box<attention::AttentionSaved>),
    Norm(Box<norm::NormSaved>),
    BatchNormInfer {
        x: Var,
        gamma: Var,
        beta: Var,
        inv_std: Vec<f64>,
        xhat: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Lstm(Box<lstm::LstmSaved>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records tracked ops and runs reverse-mode differentiation.
///
/// A graph is single-owner. Build a fresh one per forward pass.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    recording: bool,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph that records saved state for `backward`.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            recording: true,
            backward_done: false,
        }
    }

    /// A graph for inference: parameters are plain constants and nothing is saved.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    /// A leaf that receives a gradient (a constant in inference graphs).
    pub fn param(&mut self, t: Tensor) -> Var {
        let rg = self.recording;
        self.push_raw(t, Op::Leaf, rg)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` seed with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("gradient shape"))
    }

    /// Clears gradients so `backward` may run again.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        op_name: &'static str,
        value: Tensor,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let rg = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if rg { op } else { Op::Leaf };
        Ok(self.push_raw(value, op, rg))
    }

    fn any_grad(&self, inputs: &[Var]) -> bool {
        self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::contract(
                op,
                format!("expected a 2-D tensor, got {s:?}"),
            )),
        }
    }

    fn zip_map(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(name, out, op, &[a, b])
    }

    fn unary(&mut self, name: &'static str, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let out = self.value(x).map(f);
        self.push(name, out, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("scale", x, Op::Scale(x, c), |v| v * c)
    }

    /// Adds the vector `b` along `axis` of `x`, broadcasting over every other axis.
    pub fn add_axis(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = self.axis_check("add_axis", x, b, axis)?;
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        let d = out.data_mut();
        for o in 0..outer {
            for (a, &bias) in bv.iter().enumerate() {
                let base = (o * n + a) * inner;
                d[base..base + inner].iter_mut().for_each(|v| *v += bias);
            }
        }
        self.push("add_axis", out, Op::AddAxis { x, b, axis }, &[x, b])
    }

    /// Multiplies `x` by the vector `s` along `axis`.
    pub fn mul_axis(&mut self, x: Var, s: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = self.axis_check("mul_axis", x, s, axis)?;
        let sv = self.value(s).data().to_vec();
        let mut out = self.value(x).clone();
        let d = out.data_mut();
        for o in 0..outer {
            for (a, &sc) in sv.iter().enumerate() {
                let base = (o * n + a) * inner;
                d[base..base + inner].iter_mut().for_each(|v| *v *= sc);
            }
        }
        self.push("mul_axis", out, Op::MulAxis { x, s, axis }, &[x, s])
    }

    fn axis_check(
        &self,
        op: &'static str,
        x: Var,
        v: Var,
        axis: usize,
    ) -> Result<(usize, usize, usize)> {
        let xs = self.shape(x);
        if axis >= xs.len() || self.value(v).len() != xs[axis] {
            return Err(Error::Shape {
                op,
                lhs: xs.to_vec(),
                rhs: self.shape(v).to_vec(),
            });
        }
        Ok(split_axis(xs, axis))
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m×k] · b[n×k]ᵀ`, the layout of a linear layer with weight `[out×in]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.rank2("matmul", a)?;
        let (br, bc) = self.rank2("matmul", b)?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        if trans_b {
            kernels::gemm_nt(va, vb, &mut out, m, k, n);
        } else {
            kernels::gemm_nn(va, vb, &mut out, m, k, n);
        }
        let out = Tensor::new([m, n], out)?;
        self.push("matmul", out, Op::MatMul { a, b, trans_b }, &[a, b])
    }

    /// Cross-correlation of `x[C_in×T]` with `w[C_out×(C_in/groups)×k]`.
    pub fn conv1d(&mut self, x: Var, w: Var, spec: Conv1dSpec) -> Result<Var> {
        let (c_in, t_in) = self.rank2("conv1d", x)?;
        let (c_out, cpg, k) = match *self.shape(w) {
            [a, b, c] => (a, b, c),
            ref s => {
                return Err(Error::contract(
                    "conv1d",
                    format!("weight must be 3-D, got {s:?}"),
                ))
            }
        };
        let Conv1dSpec {
            stride,
            padding,
            groups,
        } = spec;
        if groups == 0 || stride == 0 {
            return Err(Error::contract(
                "conv1d",
                "stride and groups must be positive",
            ));
        }
        if c_in % groups != 0 || c_out % groups != 0 || cpg != c_in / groups {
            return Err(Error::Shape {
                op: "conv1d",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(w).to_vec(),
            });
        }
        let padded = t_in + 2 * padding;
        if k > padded {
            return Err(Error::EmptyOutput {
                op: "conv1d",
                kernel: k,
                padded,
            });
        }
        let t_out = (padded - k) / stride + 1;
        let geom = Conv1dGeom {
            c_in,
            c_out,
            t_in,
            t_out,
            k,
            stride,
            pad: padding,
            groups,
        };
        let mut out = vec![0.0; c_out * t_out];
        kernels::conv1d_forward(self.value(x).data(), self.value(w).data(), &mut out, geom);
        let out = Tensor::new([c_out, t_out], out)?;
        self.push("conv1d", out, Op::Conv1d { x, w, geom }, &[x, w])
    }

    /// 2-D cross-correlation of `x[C_in×F×T]` with `w[C_out×C_in×kf×kt]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Var> {
        let (c_in, f_in, t_in) = match *self.shape(x) {
            [a, b, c] => (a, b, c),
            ref s => {
                return Err(Error::contract(
                    "conv2d",
                    format!("input must be 3-D, got {s:?}"),
                ))
            }
        };
        let (c_out, wc, kf, kt) = match *self.shape(w) {
            [a, b, c, d] => (a, b, c, d),
            ref s => {
                return Err(Error::contract(
                    "conv2d",
                    format!("weight must be 4-D, got {s:?}"),
                ))
            }
        };
        if wc != c_in {
            return Err(Error::Shape {
                op: "conv2d",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(w).to_vec(),
            });
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::contract("conv2d", "stride must be positive"));
        }
        let (pf, pt) = (f_in + 2 * pad.0, t_in + 2 * pad.1);
        if kf > pf || kt > pt {
            return Err(Error::EmptyOutput {
                op: "conv2d",
                kernel: kf.max(kt),
                padded: pf.min(pt),
            });
        }
        let geom = Conv2dGeom {
            c_in,
            c_out,
            f_in,
            t_in,
            f_out: (pf - kf) / stride.0 + 1,
            t_out: (pt - kt) / stride.1 + 1,
            kf,
            kt,
            stride,
            pad,
        };
        let mut out = vec![0.0; c_out * geom.f_out * geom.t_out];
        kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), &mut out, geom);
        let out = Tensor::new([c_out, geom.f_out, geom.t_out], out)?;
        self.push("conv2d", out, Op::Conv2d { x, w, geom }, &[x, w])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, Op::Sigmoid(x), kernels::sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, Op::Tanh(x), f64::tanh)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, Op::Relu(x), |v| v.max(0.0))
    }

    /// `x · sigmoid(x)`.
    pub fn swish(&mut self, x: Var) -> Result<Var> {
        self.unary("swish", x, Op::Swish(x), |v| v * kernels::sigmoid(v))
    }

    /// Gated linear unit: splits `axis` into halves `a`, `b` and returns `a · sigmoid(b)`.
    pub fn glu(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || !shape[axis].is_multiple_of(2) {
            return Err(Error::contract(
                "glu",
                format!("axis {axis} of {shape:?} must have even length"),
            ));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let half = n / 2;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(xv.len() / 2);
        for o in 0..outer {
            for a in 0..half {
                let pa = (o * n + a) * inner;
                let pb = (o * n + a + half) * inner;
                for i in 0..inner {
                    out.push(xv[pa + i] * kernels::sigmoid(xv[pb + i]));
                }
            }
        }
        let mut oshape = shape;
        oshape[axis] = half;
        let out = Tensor::new(oshape, out)?;
        self.push("glu", out, Op::Glu { x, axis }, &[x])
    }

    /// Mean over `axis`; the axis is removed (a rank-1 input yields shape `[1]`).
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::contract(
                "mean",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let base = (o * n + a) * inner;
                kernels::axpy(
                    1.0,
                    &xv[base..base + inner],
                    &mut out[o * inner..(o + 1) * inner],
                );
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        let mut oshape: Vec<usize> = shape.clone();
        oshape.remove(axis);
        if oshape.is_empty() {
            oshape.push(1);
        }
        let out = Tensor::new(oshape, out)?;
        self.push("mean", out, Op::Mean { x, axis }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Concatenates tensors of equal rank along `axis`.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::contract("concat", "no inputs"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::contract("concat", "axis out of range"));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut oshape = base.clone();
        oshape[axis] = total;
        let (outer, _, inner) = split_axis(&oshape, axis);
        let mut out = Vec::with_capacity(oshape.iter().product());
        for o in 0..outer {
            for &v in xs {
                let n = self.shape(v)[axis];
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let out = Tensor::new(oshape, out)?;
        self.push(
            "concat",
            out,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            xs,
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.rank2("transpose", x)?;
        let out = self.value(x).transpose();
        self.push("transpose", out, Op::Transpose(x), &[x])
    }

    /// Reinterprets the row-major data under a new shape.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::contract(
                "narrow",
                format!(
                    "range {start}..{} outside axis {axis} of {shape:?}",
                    start + len
                ),
            ));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let out = Tensor::new(oshape, out)?;
        self.push("narrow", out, Op::Narrow { x, axis, start }, &[x])
    }

    /// Zeroes every position at index `>= valid` along `axis` (padding frames).
    pub fn zero_tail(&mut self, x: Var, axis: usize, valid: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::contract("zero_tail", "axis out of range"));
        }
        if valid >= shape[axis] {
            return Ok(x);
        }
        let mut out = self.value(x).clone();
        zero_tail_in_place(out.data_mut(), &shape, axis, valid);
        self.push("zero_tail", out, Op::ZeroTail { x, axis, valid }, &[x])
    }

    /// Row softmax of `scores[H×T×T]` restricted to the admissible entries of `mask`.
    ///
    /// Masked entries carry exactly zero weight; the row max is taken over
    /// admissible entries only.
    pub fn softmax_masked(&mut self, scores: Var, mask: &BandMask) -> Result<Var> {
        let (h, t) = match *self.shape(scores) {
            [h, a, b] if a == b && a == mask.len() => (h, a),
            ref s => {
                return Err(Error::Shape {
                    op: "softmax_masked",
                    lhs: s.to_vec(),
                    rhs: vec![mask.len(), mask.len()],
                })
            }
        };
        let sv = self.value(scores).data();
        let mut out = vec![0.0; sv.len()];
        for hh in 0..h {
            for i in 0..t {
                let (lo, hi) = mask.row_bounds(i);
                if lo >= hi {
                    return Err(Error::contract(
                        "softmax_masked",
                        format!("row {i} is fully masked"),
                    ));
                }
                let row = &sv[(hh * t + i) * t..(hh * t + i + 1) * t];
                let orow = &mut out[(hh * t + i) * t..(hh * t + i + 1) * t];
                let m = row[lo..hi]
                    .iter()
                    .cloned()
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in lo..hi {
                    let e = (row[j] - m).exp();
                    orow[j] = e;
                    z += e;
                }
                orow[lo..hi].iter_mut().for_each(|v| *v /= z);
            }
        }
        let out = Tensor::new([h, t, t], out)?;
        self.push(
            "softmax_masked",
            out,
            Op::SoftmaxMasked { x: scores },
            &[scores],
        )
    }

    /// Fused multi-head scaled dot-product attention over `[T×d]` projections.
    ///
    /// Query `i` attends to key `j` iff `|i − j| ≤ r` and `j < valid`; rows
    /// at `i >= valid` are zero.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: AttentionMask,
    ) -> Result<Var> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let (t, d) = self.rank2("attention", q)?;
        if heads == 0 || d % heads != 0 {
            return Err(Error::contract(
                "attention",
                format!("width {d} not divisible by {heads} heads"),
            ));
        }
        if mask.valid == 0 || mask.valid > t {
            return Err(Error::contract(
                "attention",
                format!("valid length {} outside 1..={t}", mask.valid),
            ));
        }
        let save = self.any_grad(&[q, k, v]);
        let (out, saved) = attention::forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            t,
            d,
            heads,
            mask,
            save,
        );
        let out = Tensor::new([t, d], out)?;
        let saved = attention::AttentionSaved {
            q,
            k,
            v,
            heads,
            mask,
            probs: saved,
        };
        self.push("attention", out, Op::Attention(Box::new(saved)), &[q, k, v])
    }

    /// Layer normalization of each row of `x[T×d]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = match *self.shape(x) {
            [d] => (1, d),
            [r, c] => (r, c),
            ref s => {
                return Err(Error::contract(
                    "layer_norm",
                    format!("expected rank 1 or 2, got {s:?}"),
                ))
            }
        };
        self.norm_common(
            "layer_norm",
            x,
            gamma,
            beta,
            eps,
            rows,
            cols,
            cols,
            norm::Affine::PerColumn,
        )
    }

    /// Batch normalization of `x[C×T]` using statistics of the first `valid` frames.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        valid: usize,
    ) -> Result<(Var, BatchStats)> {
        let (c, t) = self.rank2("batch_norm", x)?;
        if valid == 0 || valid > t {
            return Err(Error::contract(
                "batch_norm",
                format!("valid length {valid} outside 1..={t}"),
            ));
        }
        let out = self.norm_common(
            "batch_norm",
            x,
            gamma,
            beta,
            eps,
            c,
            t,
            valid,
            norm::Affine::PerRow,
        )?;
        let stats = match &self.nodes[out.0].op {
            Op::Norm(s) => BatchStats {
                mean: s.mean.clone(),
                var: s.var.clone(),
            },
            _ => {
                let (mean, var) = norm::row_stats(self.value(x).data(), c, t, valid);
                BatchStats { mean, var }
            }
        };
        Ok((out, stats))
    }

    #[allow(clippy::too_many_arguments)]
    fn norm_common(
        &mut self,
        name: &'static str,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        rows: usize,
        cols: usize,
        valid: usize,
        affine: norm::Affine,
    ) -> Result<Var> {
        let plen = match affine {
            norm::Affine::PerColumn => cols,
            norm::Affine::PerRow => rows,
        };
        for p in [gamma, beta] {
            if self.value(p).len() != plen {
                return Err(Error::Shape {
                    op: name,
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        if eps <= 0.0 {
            return Err(Error::contract(name, "eps must be positive"));
        }
        let saved = norm::forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            rows,
            cols,
            valid,
            eps,
            affine,
        );
        let out = Tensor::new(self.shape(x).to_vec(), saved.out.clone())?;
        let saved = norm::NormSaved {
            x,
            gamma,
            beta,
            ..saved
        };
        self.push(name, out, Op::Norm(Box::new(saved)), &[x, gamma, beta])
    }

    /// Inference batch norm of `x[C×T]` with stored per-channel statistics.
    pub fn batch_norm_infer(
        &mut self,
        x: Var,
        running_mean: &[f64],
        running_var: &[f64],
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var> {
        let (c, t) = self.rank2("batch_norm_infer", x)?;
        if running_mean.len() != c
            || running_var.len() != c
            || self.value(gamma).len() != c
            || self.value(beta).len() != c
        {
            return Err(Error::Shape {
                op: "batch_norm_infer",
                lhs: vec![c, t],
                rhs: vec![running_mean.len(), running_var.len()],
            });
        }
        if let Some((i, v)) = running_var
            .iter()
            .enumerate()
            .find(|(_, v)| **v < 0.0 || !v.is_finite())
        {
            return Err(Error::InvalidStatistics(format!(
                "running variance {v} at channel {i}"
            )));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (xv, g, b) = (
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let mut xhat = vec![0.0; c * t];
        let mut out = vec![0.0; c * t];
        for ch in 0..c {
            for j in 0..t {
                let idx = ch * t + j;
                xhat[idx] = (xv[idx] - running_mean[ch]) * inv_std[ch];
                out[idx] = g[ch] * xhat[idx] + b[ch];
            }
        }
        let out = Tensor::new([c, t], out)?;
        let save = self.any_grad(&[x, gamma, beta]);
        let op = Op::BatchNormInfer {
            x,
            gamma,
            beta,
            inv_std,
            xhat: if save { xhat } else { Vec::new() },
        };
        self.push("batch_norm_infer", out, op, &[x, gamma, beta])
    }

    /// Mean per-frame cross-entropy of `logits[T×C]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (t, c) = self.rank2("cross_entropy", logits)?;
        if labels.len() != t {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: vec![t, c],
                rhs: vec![labels.len()],
            });
        }
        if let Some((frame, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
            return Err(Error::Label {
                frame,
                label,
                classes: c,
            });
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; t * c];
        let mut loss = 0.0;
        for i in 0..t {
            let row = &lv[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + z.ln();
            loss += lse - row[labels[i]];
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
        }
        let out = Tensor::scalar(loss / t as f64);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.push("cross_entropy", out, op, &[logits])
    }

    /// One LSTM direction over precomputed input gates `gx[T×4h]` (order i, f, g, o).
    ///
    /// Processes frames `0..valid` (reversed when `reverse`) from zero state;
    /// output rows at `t >= valid` are zero.
    pub fn lstm(&mut self, gx: Var, w_hh: Var, reverse: bool, valid: usize) -> Result<Var> {
        let (t, g4) = self.rank2("lstm", gx)?;
        let (wr, h) = self.rank2("lstm", w_hh)?;
        if g4 != 4 * h || wr != 4 * h {
            return Err(Error::Shape {
                op: "lstm",
                lhs: self.shape(gx).to_vec(),
                rhs: self.shape(w_hh).to_vec(),
            });
        }
        if valid == 0 || valid > t {
            return Err(Error::contract(
                "lstm",
                format!("valid length {valid} outside 1..={t}"),
            ));
        }
        let save = self.any_grad(&[gx, w_hh]);
        let (out, cache) = lstm::forward(
            self.value(gx).data(),
            self.value(w_hh).data(),
            t,
            h,
            reverse,
            valid,
            save,
        );
        let out = Tensor::new([t, h], out)?;
        let saved = lstm::LstmSaved {
            gx,
            w_hh,
            reverse,
            valid,
            hidden: h,
            cache,
        };
        self.push("lstm", out, Op::Lstm(Box::new(saved)), &[gx, w_hh])
    }

    /// Reverse-mode pass from a scalar `loss`.
    ///
    /// Errors on a second call until [`Graph::zero_grad`] resets the state.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarSeed(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            if self.nodes[idx].requires_grad {
                self.propagate(idx, &g);
            }
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => kernels::axpy(1.0, &contribution, g),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) {
        let node = &self.nodes[idx];
        let mut updates: Vec<(Var, Vec<f64>)> = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                updates.push((*a, g.to_vec()));
                updates.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                updates.push((*a, g.to_vec()));
                updates.push((*b, g.iter().map(|v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    updates.push((*a, g.iter().zip(vb).map(|(g, y)| g * y).collect()));
                }
                if self.wants(*b) {
                    updates.push((*b, g.iter().zip(va).map(|(g, x)| g * x).collect()));
                }
            }
            Op::Scale(x, c) => updates.push((*x, g.iter().map(|v| v * c).collect())),
            Op::AddAxis { x, b, axis } => {
                let shape = node.value.shape();
                let (outer, n, inner) = split_axis(shape, *axis);
                if self.wants(*b) {
                    let mut db = vec![0.0; n];
                    for o in 0..outer {
                        for (a, d) in db.iter_mut().enumerate() {
                            let base = (o * n + a) * inner;
                            *d += g[base..base + inner].iter().sum::<f64>();
                        }
                    }
                    updates.push((*b, db));
                }
                updates.push((*x, g.to_vec()));
            }
            Op::MulAxis { x, s, axis } => {
                let shape = node.value.shape();
                let (outer, n, inner) = split_axis(shape, *axis);
                let (xv, sv) = (self.value(*x).data(), self.value(*s).data());
                if self.wants(*s) {
                    let mut ds = vec![0.0; n];
                    for o in 0..outer {
                        for (a, d) in ds.iter_mut().enumerate() {
                            let base = (o * n + a) * inner;
                            *d += kernels::dot(&g[base..base + inner], &xv[base..base + inner]);
                        }
                    }
                    updates.push((*s, ds));
                }
                if self.wants(*x) {
                    let mut dx = g.to_vec();
                    for o in 0..outer {
                        for (a, &sc) in sv.iter().enumerate() {
                            let base = (o * n + a) * inner;
                            dx[base..base + inner].iter_mut().for_each(|v| *v *= sc);
                        }
                    }
                    updates.push((*x, dx));
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = node.value.shape()[1];
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    if *trans_b {
                        // b is [n×k]
                        kernels::gemm_nn(g, vb, &mut da, m, n, k);
                    } else {
                        // b is [k×n]
                        kernels::gemm_nt(g, vb, &mut da, m, n, k);
                    }
                    updates.push((*a, da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    if *trans_b {
                        // db[n×k] = gᵀ · a
                        kernels::gemm_tn(g, va, &mut db, n, m, k);
                    } else {
                        // db[k×n] = aᵀ · g
                        kernels::gemm_tn(va, g, &mut db, k, m, n);
                    }
                    updates.push((*b, db));
                }
            }
            Op::Conv1d { x, w, geom } => {
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let mut dx = self.wants(*x).then(|| vec![0.0; xv.len()]);
                let mut dw = self.wants(*w).then(|| vec![0.0; wv.len()]);
                kernels::conv1d_backward(xv, wv, g, dx.as_deref_mut(), dw.as_deref_mut(), *geom);
                updates.extend(dx.map(|d| (*x, d)));
                updates.extend(dw.map(|d| (*w, d)));
            }
            Op::Conv2d { x, w, geom } => {
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let mut dx = self.wants(*x).then(|| vec![0.0; xv.len()]);
                let mut dw = self.wants(*w).then(|| vec![0.0; wv.len()]);
                kernels::conv2d_backward(xv, wv, g, dx.as_deref_mut(), dw.as_deref_mut(), *geom);
                updates.extend(dx.map(|d| (*x, d)));
                updates.extend(dw.map(|d| (*w, d)));
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                updates.push((
                    *x,
                    g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
                ));
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                updates.push((
                    *x,
                    g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect(),
                ));
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                updates.push((
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect(),
                ));
            }
            Op::Swish(x) => {
                let xv = self.value(*x).data();
                let d = g
                    .iter()
                    .zip(xv)
                    .map(|(g, &x)| {
                        let s = kernels::sigmoid(x);
                        g * (s + x * s * (1.0 - s))
                    })
                    .collect();
                updates.push((*x, d));
            }
            Op::Glu { x, axis } => {
                let shape = self.shape(*x).to_vec();
                let (outer, n, inner) = split_axis(&shape, *axis);
                let half = n / 2;
                let xv = self.value(*x).data();
                let mut dx = vec![0.0; xv.len()];
                for o in 0..outer {
                    for a in 0..half {
                        let pa = (o * n + a) * inner;
                        let pb = (o * n + a + half) * inner;
                        let po = (o * half + a) * inner;
                        for i in 0..inner {
                            let s = kernels::sigmoid(xv[pb + i]);
                            dx[pa + i] = g[po + i] * s;
                            dx[pb + i] = g[po + i] * xv[pa + i] * s * (1.0 - s);
                        }
                    }
                }
                updates.push((*x, dx));
            }
            Op::Mean { x, axis } => {
                let shape = self.shape(*x).to_vec();
                let (outer, n, inner) = split_axis(&shape, *axis);
                let mut dx = vec![0.0; outer * n * inner];
                let scale = 1.0 / n as f64;
                for o in 0..outer {
                    for a in 0..n {
                        let base = (o * n + a) * inner;
                        for i in 0..inner {
                            dx[base + i] = g[o * inner + i] * scale;
                        }
                    }
                }
                updates.push((*x, dx));
            }
            Op::Sum(x) => updates.push((*x, vec![g[0]; self.value(*x).len()])),
            Op::Concat { xs, axis } => {
                let oshape = node.value.shape();
                let (outer, total, inner) = split_axis(oshape, *axis);
                let mut offset = 0;
                for &v in xs {
                    let n = self.shape(v)[*axis];
                    if self.wants(v) {
                        let mut dv = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            dv.extend_from_slice(&g[base..base + n * inner]);
                        }
                        updates.push((v, dv));
                    }
                    offset += n;
                }
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                let gt = Tensor::new(s.to_vec(), g.to_vec())
                    .expect("grad shape")
                    .transpose();
                updates.push((*x, gt.into_data()));
            }
            Op::Reshape(x) => updates.push((*x, g.to_vec())),
            Op::Narrow { x, axis, start } => {
                let shape = self.shape(*x).to_vec();
                let (outer, n, inner) = split_axis(&shape, *axis);
                let len = node.value.shape()[*axis];
                let mut dx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    dx[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                updates.push((*x, dx));
            }
            Op::ZeroTail { x, axis, valid } => {
                let mut dx = g.to_vec();
                zero_tail_in_place(&mut dx, node.value.shape(), *axis, *valid);
                updates.push((*x, dx));
            }
            Op::SoftmaxMasked { x } => {
                let y = node.value.data();
                let t = node.value.shape()[2];
                let mut dx = vec![0.0; y.len()];
                for r in 0..y.len() / t {
                    let yr = &y[r * t..(r + 1) * t];
                    let gr = &g[r * t..(r + 1) * t];
                    let s = kernels::dot(yr, gr);
                    for j in 0..t {
                        dx[r * t + j] = yr[j] * (gr[j] - s);
                    }
                }
                updates.push((*x, dx));
            }
            Op::Attention(saved) => {
                let t = node.value.shape()[0];
                let d = node.value.shape()[1];
                let (dq, dk, dv) = attention::backward(
                    saved,
                    self.value(saved.q).data(),
                    self.value(saved.k).data(),
                    self.value(saved.v).data(),
                    g,
                    t,
                    d,
                );
                updates.push((saved.q, dq));
                updates.push((saved.k, dk));
                updates.push((saved.v, dv));
            }
            Op::Norm(saved) => {
                let (dx, dgamma, dbeta) = norm::backward(saved, self.value(saved.gamma).data(), g);
                updates.push((saved.x, dx));
                updates.push((saved.gamma, dgamma));
                updates.push((saved.beta, dbeta));
            }
            Op::BatchNormInfer {
                x,
                gamma,
                beta,
                inv_std,
                xhat,
            } => {
                let (c, t) = (node.value.shape()[0], node.value.shape()[1]);
                let gv = self.value(*gamma).data();
                let mut dx = vec![0.0; c * t];
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for ch in 0..c {
                    for j in 0..t {
                        let i = ch * t + j;
                        dx[i] = g[i] * gv[ch] * inv_std[ch];
                        dg[ch] += g[i] * xhat[i];
                        db[ch] += g[i];
                    }
                }
                updates.push((*x, dx));
                updates.push((*gamma, dg));
                updates.push((*beta, db));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.shape(*logits)[1];
                let t = labels.len();
                let scale = g[0] / t as f64;
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * c + l] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= scale);
                updates.push((*logits, d));
            }
            Op::Lstm(saved) => {
                let (dgx, dw) = lstm::backward(saved, self.value(saved.w_hh).data(), g);
                updates.push((saved.gx, dgx));
                updates.push((saved.w_hh, dw));
            }
        }
        for (v, d) in updates {
            self.accumulate(v, d);
        }
    }
}

fn zero_tail_in_place(data: &mut [f64], shape: &[usize], axis: usize, valid: usize) {
    let (outer, n, inner) = split_axis(shape, axis);
    for o in 0..outer {
        let start = (o * n + valid.min(n)) * inner;
        let end = (o + 1) * n * inner;
        data[start..end].iter_mut().for_each(|v| *v = 0.0);
    }
}

impl AttentionMask {
    pub fn new(range: AttnRange, valid: usize) -> Self {
        Self { range, valid }
    }
}
