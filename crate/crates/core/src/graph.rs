//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in execution order, so node ids are a
//! topological order by construction and the backward pass is a single
//! reverse sweep. Values are immutable once recorded; every op checks its
//! output for NaN/Inf and fails instead of propagating it.
use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::{self, Tensor};

/// Variance floor used by [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    Square(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Min(Var, Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention(AttentionRecord),
    Concat(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Reshape(Var),
}

#[derive(Debug, Clone)]
struct AttentionRecord {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    groups: usize,
    q_len: usize,
    k_len: usize,
    /// `[group][head][query][key]`, empty in inference graphs.
    probs: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Shape of a grouped multi-head attention call: `groups` independent
/// sequences, each with `q_len` queries attending over `k_len` keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionShape {
    pub groups: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    record_caches: bool,
    attention_scores: u64,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph that keeps the caches needed by [`Graph::backward`].
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_vars: Vec::new(),
            record_caches: true,
            attention_scores: 0,
        }
    }

    /// A forward-only graph: attention probabilities are not retained and
    /// `backward` through attention is refused.
    pub fn inference() -> Self {
        Graph {
            record_caches: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of attention-score entries computed so far.
    pub fn attention_scores(&self) -> u64 {
        self.attention_scores
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            let bad = value.data().iter().position(|v| !v.is_finite()).unwrap_or(0);
            return Err(Error::NonFinite {
                context: name.to_string(),
                detail: format!(
                    "output shape {:?}, first bad index {bad} = {}",
                    value.shape(),
                    value.data()[bad]
                ),
            });
        }
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push(Op::Leaf, t, "input")
    }

    /// Leaf bound to a stored parameter; repeated requests share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.param_vars.len() <= id.index() {
            self.param_vars.resize(id.index() + 1, None);
        }
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let t = store.get(id).clone();
        self.nodes.push(Node {
            op: Op::Param(id),
            value: t,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.index()] = Some(v);
        v
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn map(&mut self, x: Var, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let src = self.value(x);
        let out = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&v| f(v)).collect())?;
        self.push(op, out, name)
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(op, out, name)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul(a, b), out, "matmul")
    }

    /// `x · w (+ b)` where `x` is `[…, in]`, `w` is `[in, out]`, `b` is `[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let tx = self.value(x);
        let tw = self.value(w);
        let (k, n) = tensor::as_matrix(tw, "linear")?;
        if tx.cols() != k {
            return Err(Error::shape("linear", tx.shape(), tw.shape()));
        }
        let m = tx.rows();
        let mut out = vec![0.0; m * n];
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.shape() != [n] {
                return Err(Error::shape("linear bias", tb.shape(), &[n]));
            }
            for row in out.chunks_mut(n) {
                row.copy_from_slice(tb.data());
            }
        }
        tensor::gemm_nn(tx.data(), tw.data(), &mut out, m, k, n);
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().expect("linear input has rank >= 1") = n;
        let out = Tensor::new(shape, out)?;
        self.push(Op::Linear { x, w, b }, out, "linear")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    /// Broadcast-add a `[n]` row to every last-axis slice of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        let n = tx.cols();
        if tr.shape() != [n] {
            return Err(Error::shape("add_row", tx.shape(), tr.shape()));
        }
        let mut out = tx.clone();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, r) in chunk.iter_mut().zip(tr.data()) {
                *o += r;
            }
        }
        self.push(Op::AddRow(x, row), out, "add_row")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Min(a, b), "min", f64::min)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map(x, Op::Scale(x, c), "scale", |v| v * c)
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map(x, Op::Offset(x), "offset", |v| v + c)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Exp(x), "exp", libm::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Log(x), "log", libm::log)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Tanh(x), "tanh", libm::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Sigmoid(x), "sigmoid", sigmoid)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Gelu(x), "gelu", gelu)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Square(x), "square", |v| v * v)
    }

    /// Elementwise clamp; the gradient is zero outside `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.map(x, Op::Clamp { x, lo, hi }, "clamp", |v| v.clamp(lo, hi))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Op::Sum(x), Tensor::scalar(s), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::contract("mean of an empty tensor"));
        }
        let m = t.sum() / t.len() as f64;
        self.push(Op::Mean(x), Tensor::scalar(m), "mean")
    }

    /// Sum over the last axis: `[…, n] → […]`.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = t.cols();
        let data: Vec<f64> = t.data().chunks(n).map(|c| c.iter().sum()).collect();
        let shape = t.shape()[..t.shape().len().saturating_sub(1)].to_vec();
        let out = Tensor::new(shape, data)?;
        self.push(Op::SumCols(x), out, "sum_cols")
    }

    /// Max-stabilised softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).softmax();
        self.push(Op::Softmax(x), out, "softmax")
    }

    /// Normalise each last-axis slice to zero mean and unit variance, then
    /// apply `gain` and `bias` (both `[d]`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.cols();
        if d == 0 {
            return Err(Error::contract("layer_norm over an empty axis"));
        }
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(Error::shape("layer_norm", tx.shape(), tg.shape()));
        }
        let rows = tx.rows();
        let mut out = vec![0.0; tx.len()];
        let mut means = Vec::with_capacity(rows);
        let mut inv_stds = Vec::with_capacity(rows);
        for (src, dst) in tx.data().chunks(d).zip(out.chunks_mut(d)) {
            let mean = src.iter().sum::<f64>() / d as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
            for j in 0..d {
                dst[j] = (src[j] - mean) * inv_std * tg.data()[j] + tb.data()[j];
            }
            means.push(mean);
            inv_stds.push(inv_std);
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean: means,
                inv_std: inv_stds,
            },
            out,
            "layer_norm",
        )
    }

    /// Grouped multi-head scaled dot-product attention.
    ///
    /// `q` is `[groups·q_len, d]`, `k` and `v` are `[groups·k_len, d]`. Head
    /// `h` uses columns `h·d/H .. (h+1)·d/H`. `key_mask[g·k_len + j]` marks
    /// key `j` of group `g` as attendable; every group needs at least one.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let AttentionShape {
            groups,
            q_len,
            k_len,
            heads,
        } = shape;
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        if heads == 0 || d % heads != 0 {
            return Err(Error::contract(format!("width {d} not divisible into {heads} heads")));
        }
        if tq.shape() != [groups * q_len, d] {
            return Err(Error::shape("attention q", tq.shape(), &[groups * q_len, d]));
        }
        if tk.shape() != [groups * k_len, d] || tv.shape() != tk.shape() {
            return Err(Error::shape("attention k/v", tk.shape(), tv.shape()));
        }
        if let Some(m) = key_mask {
            if m.len() != groups * k_len {
                return Err(Error::shape("attention mask", &[m.len()], &[groups * k_len]));
            }
            for g in 0..groups {
                if !m[g * k_len..(g + 1) * k_len].iter().any(|&b| b) {
                    return Err(Error::contract(format!("attention group {g} has every key masked")));
                }
            }
        }
        let dh = d / heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut out = vec![0.0; groups * q_len * d];
        let mut probs = if self.record_caches {
            vec![0.0; groups * heads * q_len * k_len]
        } else {
            Vec::new()
        };
        let mut row = vec![0.0; k_len];
        for g in 0..groups {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..q_len {
                    let qi = &tq.data()[(g * q_len + i) * d + c0..][..dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..k_len {
                        let kj = &tk.data()[(g * k_len + j) * d + c0..][..dh];
                        let valid = key_mask.is_none_or(|m| m[g * k_len + j]);
                        row[j] = if valid {
                            tensor::dot(qi, kj) * scale
                        } else {
                            f64::NEG_INFINITY
                        };
                        max = max.max(row[j]);
                    }
                    let mut total = 0.0;
                    for s in row.iter_mut() {
                        *s = if *s == f64::NEG_INFINITY {
                            0.0
                        } else {
                            libm::exp(*s - max)
                        };
                        total += *s;
                    }
                    let o = &mut out[(g * q_len + i) * d + c0..][..dh];
                    for (j, s) in row.iter_mut().enumerate() {
                        *s /= total;
                        if *s == 0.0 {
                            continue;
                        }
                        let vj = &tv.data()[(g * k_len + j) * d + c0..][..dh];
                        for (ov, &vv) in o.iter_mut().zip(vj) {
                            *ov += *s * vv;
                        }
                    }
                    if self.record_caches {
                        let base = ((g * heads + h) * q_len + i) * k_len;
                        probs[base..base + k_len].copy_from_slice(&row);
                    }
                }
            }
        }
        self.attention_scores += (groups * heads * q_len * k_len) as u64;
        let out = Tensor::new(vec![groups * q_len, d], out)?;
        let rec = AttentionRecord {
            q,
            k,
            v,
            heads,
            groups,
            q_len,
            k_len,
            probs,
        };
        self.push(Op::Attention(rec), out, "attention")
    }

    /// Concatenate 2-D tensors with equal row counts along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let rows = self.value(*first).rows();
        let mut width = 0;
        for p in parts {
            let t = self.value(*p);
            if t.shape().len() != 2 || t.rows() != rows {
                return Err(Error::shape("concat_cols", self.value(*first).shape(), t.shape()));
            }
            width += t.cols();
        }
        let mut out = vec![0.0; rows * width];
        let mut c0 = 0;
        for p in parts {
            let t = self.value(*p);
            let c = t.cols();
            for r in 0..rows {
                out[r * width + c0..r * width + c0 + c].copy_from_slice(t.row(r));
            }
            c0 += c;
        }
        let out = Tensor::new(vec![rows, width], out)?;
        self.push(Op::Concat(parts.to_vec()), out, "concat_cols")
    }

    /// Stack 2-D tensors with equal column counts along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let cols = self.value(*first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            if t.shape().len() != 2 || t.cols() != cols {
                return Err(Error::shape("concat_rows", self.value(*first).shape(), t.shape()));
            }
            out.extend_from_slice(t.data());
            rows += t.rows();
        }
        let out = Tensor::new(vec![rows, cols], out)?;
        self.push(Op::ConcatRows(parts.to_vec()), out, "concat_rows")
    }

    /// Columns `start..end` of a 2-D tensor (copied).
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 || start > end || end > t.cols() {
            return Err(Error::shape("slice_cols", t.shape(), &[start, end]));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(t.rows() * w);
        for r in 0..t.rows() {
            out.extend_from_slice(&t.row(r)[start..end]);
        }
        let out = Tensor::new(vec![t.rows(), w], out)?;
        self.push(Op::SliceCols { x, start }, out, "slice_cols")
    }

    /// Select rows of a 2-D tensor (copied; indices may repeat).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 {
            return Err(Error::shape("gather_rows", t.shape(), &[0, 0]));
        }
        let c = t.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= t.rows() {
                return Err(Error::contract(format!("gather index {i} out of {} rows", t.rows())));
            }
            out.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![idx.len(), c], out)?;
        self.push(Op::GatherRows { x, idx: idx.to_vec() }, out, "gather_rows")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(Op::Reshape(x), out, "reshape")
    }

    /// Reverse sweep from a scalar `loss`. The graph is not modified, so
    /// repeated calls return identical gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// `backward`, then add parameter gradients into `acc`.
    pub fn backward_into(&self, loss: Var, acc: &mut Grads) -> Result<()> {
        let g = self.backward(loss)?;
        g.accumulate_params(self, acc);
        Ok(())
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[id];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = tensor::as_matrix(val(*a), "matmul")?;
                let n = out.cols();
                let mut ga = vec![0.0; m * k];
                tensor::gemm_nt(g, val(*b).data(), &mut ga, m, n, k);
                let mut gb = vec![0.0; k * n];
                tensor::gemm_tn(val(*a).data(), g, &mut gb, m, k, n);
                acc(grads, *a, &ga);
                acc(grads, *b, &gb);
            }
            Op::Linear { x, w, b } => {
                let tx = val(*x);
                let (k, n) = tensor::as_matrix(val(*w), "linear")?;
                let m = tx.rows();
                let mut gx = vec![0.0; m * k];
                tensor::gemm_nt(g, val(*w).data(), &mut gx, m, n, k);
                let mut gw = vec![0.0; k * n];
                tensor::gemm_tn(tx.data(), g, &mut gw, m, k, n);
                acc(grads, *x, &gx);
                acc(grads, *w, &gw);
                if let Some(b) = b {
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (a, r) in gb.iter_mut().zip(row) {
                            *a += r;
                        }
                    }
                    acc(grads, *b, &gb);
                }
            }
            Op::Add(a, b) => {
                acc(grads, *a, g);
                acc(grads, *b, g);
            }
            Op::AddRow(x, r) => {
                acc(grads, *x, g);
                let n = out.cols();
                let mut gr = vec![0.0; n];
                for row in g.chunks(n) {
                    for (a, v) in gr.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                acc(grads, *r, &gr);
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                acc(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                let ga: Vec<f64> = g.iter().zip(tb).map(|(g, y)| g * y).collect();
                let gb: Vec<f64> = g.iter().zip(ta).map(|(g, x)| g * x).collect();
                acc(grads, *a, &ga);
                acc(grads, *b, &gb);
            }
            Op::Min(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                let mut ga = vec![0.0; g.len()];
                let mut gb = vec![0.0; g.len()];
                for i in 0..g.len() {
                    if ta[i] <= tb[i] {
                        ga[i] = g[i];
                    } else {
                        gb[i] = g[i];
                    }
                }
                acc(grads, *a, &ga);
                acc(grads, *b, &gb);
            }
            Op::Scale(x, c) => {
                let gx: Vec<f64> = g.iter().map(|v| v * c).collect();
                acc(grads, *x, &gx);
            }
            Op::Offset(x) | Op::Reshape(x) => acc(grads, *x, g),
            Op::Exp(x) => {
                let gx: Vec<f64> = g.iter().zip(out.data()).map(|(g, y)| g * y).collect();
                acc(grads, *x, &gx);
            }
            Op::Log(x) => {
                let gx: Vec<f64> = g.iter().zip(val(*x).data()).map(|(g, x)| g / x).collect();
                acc(grads, *x, &gx);
            }
            Op::Tanh(x) => {
                let gx: Vec<f64> = g.iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                acc(grads, *x, &gx);
            }
            Op::Sigmoid(x) => {
                let gx: Vec<f64> = g.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect();
                acc(grads, *x, &gx);
            }
            Op::Gelu(x) => {
                let gx: Vec<f64> = g.iter().zip(val(*x).data()).map(|(g, &x)| g * gelu_grad(x)).collect();
                acc(grads, *x, &gx);
            }
            Op::Square(x) => {
                let gx: Vec<f64> = g.iter().zip(val(*x).data()).map(|(g, x)| 2.0 * g * x).collect();
                acc(grads, *x, &gx);
            }
            Op::Clamp { x, lo, hi } => {
                let gx: Vec<f64> = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(g, x)| if *x >= *lo && *x <= *hi { *g } else { 0.0 })
                    .collect();
                acc(grads, *x, &gx);
            }
            Op::Sum(x) => {
                let gx = vec![g[0]; val(*x).len()];
                acc(grads, *x, &gx);
            }
            Op::Mean(x) => {
                let n = val(*x).len();
                let gx = vec![g[0] / n as f64; n];
                acc(grads, *x, &gx);
            }
            Op::SumCols(x) => {
                let n = val(*x).cols();
                let mut gx = Vec::with_capacity(val(*x).len());
                for gv in g {
                    gx.extend(core::iter::repeat_n(*gv, n));
                }
                acc(grads, *x, &gx);
            }
            Op::Softmax(x) => {
                let n = out.cols();
                let mut gx = vec![0.0; g.len()];
                for ((y, gy), gxr) in out.data().chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dotp = tensor::dot(y, gy);
                    for j in 0..n {
                        gxr[j] = y[j] * (gy[j] - dotp);
                    }
                }
                acc(grads, *x, &gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                inv_std,
            } => {
                let tx = val(*x);
                let tg = val(*gain).data();
                let d = tx.cols();
                let mut gx = vec![0.0; tx.len()];
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for (r, ((src, gy), gxr)) in tx.data().chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                    let (mu, is) = (mean[r], inv_std[r]);
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        xhat[j] = (src[j] - mu) * is;
                        dxhat[j] = gy[j] * tg[j];
                        gg[j] += gy[j] * xhat[j];
                        gb[j] += gy[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * xhat[j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        gxr[j] = is * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                acc(grads, *x, &gx);
                acc(grads, *gain, &gg);
                acc(grads, *bias, &gb);
            }
            Op::Attention(rec) => self.backprop_attention(rec, g, grads)?,
            Op::Concat(parts) => {
                let width = out.cols();
                let rows = out.rows();
                let mut c0 = 0;
                for p in parts {
                    let c = val(*p).cols();
                    let mut gp = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        gp.extend_from_slice(&g[r * width + c0..r * width + c0 + c]);
                    }
                    acc(grads, *p, &gp);
                    c0 += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut r0 = 0;
                for p in parts {
                    let n = val(*p).len();
                    acc(grads, *p, &g[r0..r0 + n]);
                    r0 += n;
                }
            }
            Op::SliceCols { x, start } => {
                let tx = val(*x);
                let (c, w) = (tx.cols(), out.cols());
                let mut gx = vec![0.0; tx.len()];
                for r in 0..tx.rows() {
                    gx[r * c + start..r * c + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                acc(grads, *x, &gx);
            }
            Op::GatherRows { x, idx } => {
                let tx = val(*x);
                let c = tx.cols();
                let mut gx = vec![0.0; tx.len()];
                for (o, &i) in idx.iter().enumerate() {
                    for (a, b) in gx[i * c..(i + 1) * c].iter_mut().zip(&g[o * c..(o + 1) * c]) {
                        *a += b;
                    }
                }
                acc(grads, *x, &gx);
            }
        }
        Ok(())
    }

    fn backprop_attention(&self, rec: &AttentionRecord, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        if !self.record_caches {
            return Err(Error::contract("backward through attention in an inference graph"));
        }
        let tq = self.value(rec.q).data();
        let tk = self.value(rec.k).data();
        let tv = self.value(rec.v).data();
        let d = self.value(rec.q).cols();
        let (heads, q_len, k_len) = (rec.heads, rec.q_len, rec.k_len);
        let dh = d / heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut gq = vec![0.0; tq.len()];
        let mut gk = vec![0.0; tk.len()];
        let mut gv = vec![0.0; tv.len()];
        let mut ds = vec![0.0; k_len];
        for grp in 0..rec.groups {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..q_len {
                    let base = ((grp * heads + h) * q_len + i) * k_len;
                    let p = &rec.probs[base..base + k_len];
                    let qrow = (grp * q_len + i) * d + c0;
                    let go = &g[qrow..qrow + dh];
                    let mut weighted = 0.0;
                    for j in 0..k_len {
                        if p[j] == 0.0 {
                            ds[j] = 0.0;
                            continue;
                        }
                        let krow = (grp * k_len + j) * d + c0;
                        let dp = tensor::dot(go, &tv[krow..krow + dh]);
                        ds[j] = dp;
                        weighted += p[j] * dp;
                        for (a, &b) in gv[krow..krow + dh].iter_mut().zip(go) {
                            *a += p[j] * b;
                        }
                    }
                    for j in 0..k_len {
                        if p[j] == 0.0 {
                            continue;
                        }
                        let s = p[j] * (ds[j] - weighted) * scale;
                        let krow = (grp * k_len + j) * d + c0;
                        for c in 0..dh {
                            gq[qrow + c] += s * tk[krow + c];
                            gk[krow + c] += s * tq[qrow + c];
                        }
                    }
                }
            }
        }
        acc(grads, rec.q, &gq);
        acc(grads, rec.k, &gk);
        acc(grads, rec.v, &gv);
        Ok(())
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::tanh(GELU_C * (x + 0.044_715 * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044_715 * x * x * x);
    let t = libm::tanh(u);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044_715 * x * x)
}

/// Gradients of every node reached by a backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`, shaped like its value. `None` when the
    /// loss does not depend on `v`.
    pub fn wrt(&self, graph: &Graph, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(graph.value(v).shape().to_vec(), g.clone()).ok()
    }

    pub fn accumulate_params(&self, graph: &Graph, acc: &mut Grads) {
        for (i, slot) in self.grads.iter().enumerate() {
            if let (Some(g), Op::Param(id)) = (slot, &graph.nodes[i].op) {
                acc.accumulate(*id, g);
            }
        }
    }
}
