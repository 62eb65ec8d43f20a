use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use super::{Tape, Tensor, Var};
use crate::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Elementwise unary functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Relu,
    /// Exact GELU, `x * Phi(x)`.
    Gelu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Sin,
    Cos,
    Square,
}

impl Unary {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::Gelu => 0.5 * x * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2)),
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => libm::tanh(x),
            Unary::Exp => libm::exp(x),
            Unary::Log => libm::log(x),
            Unary::Sin => libm::sin(x),
            Unary::Cos => libm::cos(x),
            Unary::Square => x * x,
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2));
                let pdf = libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * core::f64::consts::PI);
                cdf + x * pdf
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Sin => libm::cos(x),
            Unary::Cos => -libm::sin(x),
            Unary::Square => 2.0 * x,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Unary::Relu => "relu",
            Unary::Gelu => "gelu",
            Unary::Sigmoid => "sigmoid",
            Unary::Tanh => "tanh",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Sin => "sin",
            Unary::Cos => "cos",
            Unary::Square => "square",
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

/// `b` broadcasts onto `a` when its shape is a suffix of `a`'s shape.
fn suffix_inner(op: &'static str, a: &[usize], b: &[usize]) -> Result<usize> {
    if b.len() > a.len() || a[a.len() - b.len()..] != *b {
        return Err(mismatch(op, a, b));
    }
    Ok(b.iter().product())
}

/// Splits a shape around `axis` into (outer, axis length, inner).
fn split_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::InvalidArgument {
            op,
            msg: alloc::format!("axis {axis} out of range for shape {shape:?}"),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn reduce_to_suffix(g: &[f64], inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; inner];
    if inner == 0 {
        return out;
    }
    for chunk in g.chunks(inner) {
        out.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
    }
    out
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, BinaryGrad::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, BinaryGrad::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, BinaryGrad::Mul)
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        kind: BinaryGrad,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let inner = suffix_inner(op, ta.shape(), tb.shape())?;
        let data: Vec<f64> = if inner == 0 {
            Vec::new()
        } else {
            ta.data()
                .chunks(inner)
                .flat_map(|row| row.iter().zip(tb.data()).map(|(&x, &y)| f(x, y)))
                .collect()
        };
        let out = Tensor::new(ta.shape(), data)?;
        self.record(op, out, &[a, b], move |inp: &[&Tensor], _: &Tensor, g: &[f64]| {
            let (x, y) = (inp[0].data(), inp[1].data());
            match kind {
                BinaryGrad::Add => vec![Some(g.to_vec()), Some(reduce_to_suffix(g, inner))],
                BinaryGrad::Sub => {
                    let gb = reduce_to_suffix(g, inner).into_iter().map(|v| -v).collect();
                    vec![Some(g.to_vec()), Some(gb)]
                }
                BinaryGrad::Mul => {
                    let ga = g.iter().enumerate().map(|(i, gi)| gi * y[i % inner]).collect();
                    let prod: Vec<f64> = g.iter().zip(x).map(|(gi, xi)| gi * xi).collect();
                    vec![Some(ga), Some(reduce_to_suffix(&prod, inner))]
                }
            }
        })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::new(t.shape(), t.data().iter().map(|v| v * c).collect())?;
        self.record("scale", out, &[a], move |_: &[&Tensor], _: &Tensor, g: &[f64]| {
            vec![Some(g.iter().map(|v| v * c).collect())]
        })
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::new(t.shape(), t.data().iter().map(|v| v + c).collect())?;
        self.record("add_scalar", out, &[a], |_: &[&Tensor], _: &Tensor, g: &[f64]| {
            vec![Some(g.to_vec())]
        })
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::new(t.shape(), t.data().iter().map(|&v| f.apply(v)).collect())?;
        self.record(f.name(), out, &[a], move |inp: &[&Tensor], out: &Tensor, g: &[f64]| {
            let gx = inp[0]
                .data()
                .iter()
                .zip(out.data())
                .zip(g)
                .map(|((&x, &y), &gi)| gi * f.derivative(x, y))
                .collect();
            vec![Some(gx)]
        })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Relu)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Gelu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sin)
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Cos)
    }

    /// `[.., k] x [k, n] -> [.., n]`; the leading dims of `a` act as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.shape().len() != 2 || ta.shape().is_empty() || ta.last_dim() != tb.shape()[0] {
            return Err(mismatch("matmul", ta.shape(), tb.shape()));
        }
        let (k, n) = (tb.shape()[0], tb.shape()[1]);
        let m = ta.rows();
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let out = Tensor::new(&shape, out)?;
        self.record("matmul", out, &[a, b], move |inp: &[&Tensor], _: &Tensor, g: &[f64]| {
            let (x, w) = (inp[0].data(), inp[1].data());
            // dX = G W^T, dW = X^T G
            let mut gx = vec![0.0; m * k];
            for i in 0..m {
                let gi = &g[i * n..(i + 1) * n];
                let row = &mut gx[i * k..(i + 1) * k];
                for (kk, r) in row.iter_mut().enumerate() {
                    let wk = &w[kk * n..(kk + 1) * n];
                    *r = gi.iter().zip(wk).map(|(a, b)| a * b).sum();
                }
            }
            let mut gw = vec![0.0; k * n];
            for i in 0..m {
                let gi = &g[i * n..(i + 1) * n];
                for kk in 0..k {
                    let xv = x[i * k + kk];
                    if xv == 0.0 {
                        continue;
                    }
                    let dst = &mut gw[kk * n..(kk + 1) * n];
                    dst.iter_mut().zip(gi).for_each(|(d, gv)| *d += xv * gv);
                }
            }
            vec![Some(gx), Some(gw)]
        })
    }

    /// Softmax along `axis`. Shift-invariant; rows sum to one.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let (outer, len, inner) = split_axis("softmax", t.shape(), axis)?;
        let x = t.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mx = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for j in 0..len {
                    let e = libm::exp(x[at(j)] - mx);
                    y[at(j)] = e;
                    s += e;
                }
                for j in 0..len {
                    y[at(j)] /= s;
                }
            }
        }
        let out = Tensor::new(t.shape(), y)?;
        self.record("softmax", out, &[a], move |_: &[&Tensor], out: &Tensor, g: &[f64]| {
            let y = out.data();
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                    for j in 0..len {
                        gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    /// A constant row maps to exactly zero.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let d = t.last_dim();
        let rows = t.rows();
        let x = t.data();
        let mut y = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
            inv_std[r] = is;
            if row.iter().all(|&v| v == row[0]) {
                continue;
            }
            for j in 0..d {
                y[r * d + j] = (row[j] - mean) * is;
            }
        }
        let out = Tensor::new(t.shape(), y)?;
        self.record("layer_norm", out, &[a], move |_: &[&Tensor], out: &Tensor, g: &[f64]| {
            let y = out.data();
            let mut gx = vec![0.0; y.len()];
            for r in 0..rows {
                let (gr, yr) = (&g[r * d..(r + 1) * d], &y[r * d..(r + 1) * d]);
                let mg = gr.iter().sum::<f64>() / d as f64;
                let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                for j in 0..d {
                    gx[r * d + j] = inv_std[r] * (gr[j] - mg - yr[j] * mgy);
                }
            }
            vec![Some(gx)]
        })
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(parts[0]).shape().to_vec();
        let (outer, _, inner) = split_axis("concat", &first, axis)?;
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            let same_rest = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same_rest {
                return Err(mismatch("concat", &first, s));
            }
            lens.push(s[axis]);
        }
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &l) in parts.iter().zip(&lens) {
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let out = Tensor::new(&shape, data)?;
        self.record("concat", out, parts, move |_: &[&Tensor], _: &Tensor, g: &[f64]| {
            let mut grads: Vec<Vec<f64>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gi, &l) in grads.iter_mut().zip(&lens) {
                    gi.extend_from_slice(&g[off..off + l * inner]);
                    off += l * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        })
    }

    /// Columns `[start, end)` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        let d = t.last_dim();
        if start > end || end > d {
            return Err(Error::InvalidArgument {
                op: "slice_last",
                msg: alloc::format!("range {start}..{end} of width {d}"),
            });
        }
        let w = end - start;
        let rows = t.rows();
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&t.data()[r * d + start..r * d + end]);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = w;
        let out = Tensor::new(&shape, data)?;
        self.record("slice_last", out, &[a], move |_: &[&Tensor], _: &Tensor, g: &[f64]| {
            let mut gx = vec![0.0; rows * d];
            for r in 0..rows {
                gx[r * d + start..r * d + end].copy_from_slice(&g[r * w..(r + 1) * w]);
            }
            vec![Some(gx)]
        })
    }

    /// Selects rows (first axis) by index; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let n = t.shape().first().copied().unwrap_or(0);
        let inner: usize = t.shape()[1..].iter().product();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidArgument {
                op: "gather_rows",
                msg: alloc::format!("index {bad} out of {n} rows"),
            });
        }
        let mut data = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            data.extend_from_slice(&t.data()[i * inner..(i + 1) * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = idx.len();
        let out = Tensor::new(&shape, data)?;
        let idx = idx.to_vec();
        self.record("gather_rows", out, &[a], move |_: &[&Tensor], _: &Tensor, g: &[f64]| {
            let mut gx = vec![0.0; n * inner];
            for (k, &i) in idx.iter().enumerate() {
                gx[i * inner..(i + 1) * inner]
                    .iter_mut()
                    .zip(&g[k * inner..(k + 1) * inner])
                    .for_each(|(d, s)| *d += s);
            }
            vec![Some(gx)]
        })
    }

    /// Adds row `k` of `a` into output row `idx[k]` of an `n_rows` tensor.
    pub fn scatter_add_rows(&mut self, a: Var, idx: &[usize], n_rows: usize) -> Result<Var> {
        let t = self.value(a);
        let inner: usize = t.shape()[1..].iter().product();
        if t.shape()[0] != idx.len() {
            return Err(mismatch("scatter_add_rows", t.shape(), &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n_rows) {
            return Err(Error::InvalidArgument {
                op: "scatter_add_rows",
                msg: alloc::format!("index {bad} out of {n_rows} rows"),
            });
        }
        let mut data = vec![0.0; n_rows * inner];
        for (k, &i) in idx.iter().enumerate() {
            data[i * inner..(i + 1) * inner]
                .iter_mut()
                .zip(&t.data()[k * inner..(k + 1) * inner])
                .for_each(|(d, s)| *d += s);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = n_rows;
        let out = Tensor::new(&shape, data)?;
        let idx = idx.to_vec();
        self.record("scatter_add_rows", out, &[a], move |_: &[&Tensor], _: &Tensor, g: &[f64]| {
            let mut gx = Vec::with_capacity(idx.len() * inner);
            for &i in &idx {
                gx.extend_from_slice(&g[i * inner..(i + 1) * inner]);
            }
            vec![Some(gx)]
        })
    }

    /// Per-segment column max of an `[n, d]` matrix. `segment[r]` names the
    /// output row of input row `r`; every segment must be non-empty. The
    /// gradient routes to the first arg-max row.
    pub fn segment_max(&mut self, a: Var, segment: &[usize], n_segments: usize) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 || t.shape()[0] != segment.len() {
            return Err(mismatch("segment_max", t.shape(), &[segment.len()]));
        }
        let d = t.shape()[1];
        let mut best = vec![usize::MAX; n_segments * d];
        let x = t.data();
        for (r, &s) in segment.iter().enumerate() {
            if s >= n_segments {
                return Err(Error::InvalidArgument {
                    op: "segment_max",
                    msg: alloc::format!("segment {s} out of {n_segments}"),
                });
            }
            for j in 0..d {
                let b = &mut best[s * d + j];
                if *b == usize::MAX || x[r * d + j] > x[*b * d + j] {
                    *b = r;
                }
            }
        }
        if best.contains(&usize::MAX) && d > 0 {
            return Err(Error::InvalidArgument {
                op: "segment_max",
                msg: "empty segment".to_string(),
            });
        }
        let data = best.iter().enumerate().map(|(k, &r)| x[r * d + k % d]).collect();
        let out = Tensor::new(&[n_segments, d], data)?;
        let rows = segment.len();
        self.record("segment_max", out, &[a], move |_: &[&Tensor], _: &Tensor, g: &[f64]| {
            let mut gx = vec![0.0; rows * d];
            for (k, &r) in best.iter().enumerate() {
                gx[r * d + k % d] += g[k];
            }
            vec![Some(gx)]
        })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = t.len();
        let out = Tensor::scalar(t.data().iter().sum());
        self.record("sum", out, &[a], move |_: &[&Tensor], _: &Tensor, g: &[f64]| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len().max(1);
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reduce_mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = *self.value(a).shape().get(axis).unwrap_or(&1);
        let s = self.reduce_sum(a, axis)?;
        self.scale(s, 1.0 / len.max(1) as f64)
    }

    pub fn reduce_sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let (outer, len, inner) = split_axis("reduce_sum", t.shape(), axis)?;
        let x = t.data();
        let mut y = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    y[o * inner + i] += x[o * len * inner + j * inner + i];
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let out = Tensor::new(&shape, y)?;
        self.record("reduce_sum", out, &[a], move |_: &[&Tensor], _: &Tensor, g: &[f64]| {
            let mut gx = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for j in 0..len {
                    for i in 0..inner {
                        gx[o * len * inner + j * inner + i] = g[o * inner + i];
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// Max along `axis`; ties route the gradient to the first maximum.
    pub fn reduce_max(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let (outer, len, inner) = split_axis("reduce_max", t.shape(), axis)?;
        if len == 0 {
            return Err(Error::InvalidArgument {
                op: "reduce_max",
                msg: "empty axis".to_string(),
            });
        }
        let x = t.data();
        let mut arg = vec![0usize; outer * inner];
        let mut y = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut bj = 0;
                for j in 1..len {
                    if x[o * len * inner + j * inner + i] > x[o * len * inner + bj * inner + i] {
                        bj = j;
                    }
                }
                arg[o * inner + i] = bj;
                y[o * inner + i] = x[o * len * inner + bj * inner + i];
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let out = Tensor::new(&shape, y)?;
        self.record("reduce_max", out, &[a], move |_: &[&Tensor], _: &Tensor, g: &[f64]| {
            let mut gx = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for i in 0..inner {
                    gx[o * len * inner + arg[o * inner + i] * inner + i] = g[o * inner + i];
                }
            }
            vec![Some(gx)]
        })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        self.record("reshape", out, &[a], |_: &[&Tensor], _: &Tensor, g: &[f64]| {
            vec![Some(g.to_vec())]
        })
    }
}

#[derive(Clone, Copy)]
enum BinaryGrad {
    Add,
    Sub,
    Mul,
}

/// Plain `m x k` by `k x n` product, i-k-j loop order.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let dst = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let src = &b[kk * n..(kk + 1) * n];
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += av * s);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::{check_gradients, Tensor};
    use super::*;
    use crate::rng::Rng;

    fn rand_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn softmax_uniform_and_shift_invariance() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.3; 4]));
        let y = tape.softmax(x, 0).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let mut rng = Rng::new(1);
        for _ in 0..20 {
            let t = rand_tensor(&mut rng, &[3, 5]);
            let shifted = Tensor::new(&[3, 5], t.data().iter().map(|v| v + 123.0).collect()).unwrap();
            let a = tape.constant(t);
            let b = tape.constant(shifted);
            let (sa, sb) = (tape.softmax(a, 1).unwrap(), tape.softmax(b, 1).unwrap());
            for r in 0..3 {
                let s: f64 = tape.value(sa).row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
            for (u, v) in tape.value(sa).data().iter().zip(tape.value(sb).data()) {
                assert!((u - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn softmax_other_axis_matches_reference() {
        let mut rng = Rng::new(2);
        let t = rand_tensor(&mut rng, &[2, 3, 4]);
        let mut tape = Tape::new();
        let x = tape.constant(t.clone());
        let y = tape.softmax(x, 1).unwrap();
        for o in 0..2 {
            for i in 0..4 {
                let vals: Vec<f64> = (0..3).map(|j| t.data()[o * 12 + j * 4 + i]).collect();
                let s: f64 = vals.iter().map(|v| libm::exp(*v)).sum();
                for j in 0..3 {
                    let want = libm::exp(vals[j]) / s;
                    assert!((tape.value(y).data()[o * 12 + j * 4 + i] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.1; 7]));
        let y = tape.layer_norm(x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_matches_reference() {
        let mut rng = Rng::new(3);
        let t = rand_tensor(&mut rng, &[4, 6]);
        let mut tape = Tape::new();
        let x = tape.constant(t.clone());
        let y = tape.layer_norm(x).unwrap();
        for r in 0..4 {
            let row = t.row(r);
            let mean = row.iter().sum::<f64>() / 6.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 6.0;
            for j in 0..6 {
                let want = (row[j] - mean) / libm::sqrt(var + LAYER_NORM_EPS);
                assert!((tape.value(y).row(r)[j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(4);
        for _ in 0..20 {
            let a = rand_tensor(&mut rng, &[2, 3]);
            let b = rand_tensor(&mut rng, &[3, 2]);
            let mut tape = Tape::new();
            let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
            let c = tape.matmul(va, vb).unwrap();
            for i in 0..2 {
                for j in 0..2 {
                    let mut want = 0.0;
                    for k in 0..3 {
                        want += a.data()[i * 3 + k] * b.data()[k * 2 + j];
                    }
                    assert!((tape.value(c).data()[i * 2 + j] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            Error::ShapeMismatch {
                op: "matmul",
                left: vec![2, 3],
                right: vec![2, 2]
            }
        );
        assert!(tape.add(a, b).is_err());
        let msg = alloc::format!("{}", tape.add(a, b).unwrap_err());
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"));
    }

    #[test]
    fn unary_and_reductions_match_reference() {
        let mut rng = Rng::new(5);
        let t = rand_tensor(&mut rng, &[3, 4]);
        let mut tape = Tape::new();
        let x = tape.constant(t.clone());
        for f in [Unary::Relu, Unary::Gelu, Unary::Sigmoid, Unary::Tanh, Unary::Exp, Unary::Sin, Unary::Cos, Unary::Square] {
            let y = tape.unary(x, f).unwrap();
            for (a, b) in t.data().iter().zip(tape.value(y).data()) {
                let want = match f {
                    Unary::Relu => if *a > 0.0 { *a } else { 0.0 },
                    Unary::Sigmoid => 1.0 / (1.0 + libm::exp(-a)),
                    Unary::Tanh => libm::tanh(*a),
                    Unary::Exp => libm::exp(*a),
                    Unary::Sin => libm::sin(*a),
                    Unary::Cos => libm::cos(*a),
                    Unary::Square => a * a,
                    Unary::Gelu => 0.5 * a * (1.0 + libm::erf(a / libm::sqrt(2.0))),
                    Unary::Log => unreachable!(),
                };
                assert!((want - b).abs() < 1e-12);
            }
        }
        let m = tape.reduce_max(x, 1).unwrap();
        let mu = tape.reduce_mean(x, 0).unwrap();
        for r in 0..3 {
            let want = t.row(r).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(tape.value(m).data()[r], want);
        }
        for c in 0..4 {
            let want = (0..3).map(|r| t.row(r)[c]).sum::<f64>() / 3.0;
            assert!((tape.value(mu).data()[c] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_of_sum_and_square() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, -2.0, 3.0]).with_grad());
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, -2.0, 3.0]).with_grad());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0]).with_grad());
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.backward(s), Err(Error::BackwardTwice));
        tape.reset();
        assert!(tape.backward(s).is_ok());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
        assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn stop_gradient_semantics() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
        let d = tape.stop_gradient(x);
        assert_eq!(tape.value(d), &Tensor::vector(vec![1.0, 2.0]));
        let s = tape.sum(d).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(x).is_none_or(|g| g.iter().all(|&v| v == 0.0)));

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
        let d = tape.stop_gradient(x);
        let y = tape.add(x, d).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn recurrent_chain_with_detach_matches_single_step() {
        // h1 = tanh(W x0); h2 = tanh(W sg(h1)); loss = sum(h2^2).
        let mut rng = Rng::new(8);
        let w = rand_tensor(&mut rng, &[3, 3]);
        let x0 = rand_tensor(&mut rng, &[1, 3]);
        let mut tape = Tape::new();
        let wv = tape.leaf(w.clone().with_grad());
        let xv = tape.constant(x0);
        let h1 = tape.matmul(xv, wv).unwrap();
        let h1 = tape.unary(h1, Unary::Tanh).unwrap();
        let h1d = tape.stop_gradient(h1);
        let h2 = tape.matmul(h1d, wv).unwrap();
        let h2 = tape.unary(h2, Unary::Tanh).unwrap();
        let sq = tape.unary(h2, Unary::Square).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        let chained = tape.grad(wv).unwrap().to_vec();

        // Same step with h1 supplied as a fresh constant.
        let h1_value = tape.value(h1).clone();
        let mut t2 = Tape::new();
        let wv2 = t2.leaf(w.with_grad());
        let h = t2.constant(h1_value);
        let h2 = t2.matmul(h, wv2).unwrap();
        let h2 = t2.unary(h2, Unary::Tanh).unwrap();
        let sq = t2.unary(h2, Unary::Square).unwrap();
        let loss = t2.sum(sq).unwrap();
        t2.backward(loss).unwrap();
        assert_eq!(chained, t2.grad(wv2).unwrap());
    }

    #[test]
    fn gradient_check_every_op() {
        let mut rng = Rng::new(9);
        for trial in 0..20 {
            let a = rand_tensor(&mut rng, &[3, 4]);
            let b = rand_tensor(&mut rng, &[4]);
            let w = rand_tensor(&mut rng, &[4, 2]);
            let pos = Tensor::new(&[3, 4], a.data().iter().map(|v| v.abs() + 0.5).collect()).unwrap();
            let inputs = [a, b, w, pos];
            let report = check_gradients(&inputs, |tape, v| {
                let s1 = tape.add(v[0], v[1])?;
                let s2 = tape.mul(s1, v[1])?;
                let s3 = tape.sub(s2, v[0])?;
                let m = tape.matmul(s3, v[2])?;
                let sm = tape.softmax(m, 1)?;
                let ln = tape.layer_norm(s3)?;
                let g = tape.gelu(ln)?;
                let r = tape.relu(s3)?;
                let sg = tape.sigmoid(s1)?;
                let th = tape.unary(s2, Unary::Tanh)?;
                let e = tape.unary(sg, Unary::Exp)?;
                let lg = tape.unary(v[3], Unary::Log)?;
                let sn = tape.sin(v[0])?;
                let cs = tape.cos(v[0])?;
                let sc = tape.scale(cs, 0.7)?;
                let sc = tape.add_scalar(sc, 0.2)?;
                let cat = tape.concat(&[g, r, sg, th, e, lg, sn, sc], 1)?;
                let sl = tape.slice_last(cat, 3, 20)?;
                let ga = tape.gather_rows(sl, &[2, 0, 2, 1])?;
                let sa = tape.scatter_add_rows(ga, &[1, 1, 0, 2], 3)?;
                let mx = tape.segment_max(sa, &[0, 1, 0], 2)?;
                let rm = tape.reduce_max(sa, 1)?;
                let rmean = tape.reduce_mean(sa, 0)?;
                let rs = tape.reshape(mx, &[2 * 17])?;
                let t1 = tape.sum(rs)?;
                let t2 = tape.sum(rm)?;
                let t3 = tape.sum(rmean)?;
                let t4 = tape.sum(sm)?;
                let sq = tape.unary(m, Unary::Square)?;
                let t5 = tape.mean(sq)?;
                let a1 = tape.add(t1, t2)?;
                let a2 = tape.add(a1, t3)?;
                let a3 = tape.add(a2, t4)?;
                tape.add(a3, t5)
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "trial {trial}: {report:?}");
        }
    }
}
