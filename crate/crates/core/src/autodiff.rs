//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation in execution order; [`Tape::backward`] walks the
//! records in exact reverse. Tapes are rebuilt for every forward pass. Operations never
//! mutate their inputs: each one writes a fresh output node.
//!
//! ```
//! use evoedit_core::autodiff::Tape;
//! use evoedit_core::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(5.0), true);
//! let y = tape.mul(x, x).unwrap();
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(x).unwrap()[0], 10.0);
//! ```

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    Silu(usize),
    RmsNormalize { x: usize, inv_rms: Vec<f64> },
    SoftmaxRows(usize),
    Gather { table: usize, ids: Vec<usize> },
    Transpose(usize),
    Reshape(usize),
    ConcatRows(Vec<usize>),
    SliceRows { x: usize, start: usize },
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<f64> },
    Sum(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    /// True when some leaf below this node requires a gradient.
    tracks_grad: bool,
    /// True only for leaves created with `requires_grad`.
    is_param: bool,
}

/// Ordered record of operations. Inputs always precede the nodes that consume them.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Dimension {
            op,
            left: s.to_vec(),
            right: vec![],
        }),
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`
fn mm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · bᵀ` where `b` is `[k×n]`.
fn mm_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let s: f64 = g_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            out[i * k + p] += s;
        }
    }
}

/// `out[k×n] += aᵀ · g` where `a` is `[m×k]` and `g` is `[m×n]`.
fn mm_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += aip * gv;
            }
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + math::exp(-x))
}

fn softmax_row(row: &[f64], valid: usize, out: &mut [f64]) {
    let max = row[..valid]
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out[..valid].iter_mut().zip(&row[..valid]) {
        *o = math::exp(x - max);
        total += *o;
    }
    for o in &mut out[..valid] {
        *o /= total;
    }
    for o in &mut out[valid..] {
        *o = 0.0;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracks_grad: bool, is_param: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            tracks_grad,
            is_param,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn tracks(&self, v: usize) -> bool {
        self.nodes[v].tracks_grad
    }

    /// Records an input tensor. Leaves with `requires_grad` receive gradients on backward.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad, requires_grad)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a `requires_grad` leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient as a tensor shaped like the leaf; zeros when no gradient arrived.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let value = &self.nodes[v.0].value;
        match &self.grads[v.0] {
            Some(g) => Tensor::new(value.shape().to_vec(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(value.shape()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = require_2d("matmul", ta)?;
        let (k2, n) = require_2d("matmul", tb)?;
        if k != k2 {
            return Err(dim_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        mm_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        let tracks = self.tracks(a.0) || self.tracks(b.0);
        Ok(self.push(value, Op::Matmul(a.0, b.0), tracks, false))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !ta.same_shape(tb) {
            return Err(dim_err("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let tracks = self.tracks(a.0) || self.tracks(b.0);
        Ok(self.push(value, Op::Add(a.0, b.0), tracks, false))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !ta.same_shape(tb) {
            return Err(dim_err("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let tracks = self.tracks(a.0) || self.tracks(b.0);
        Ok(self.push(value, Op::Mul(a.0, b.0), tracks, false))
    }

    /// Multiplies every row of `x` elementwise by the vector `w`.
    pub fn mul_row(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let c = tx.cols();
        if tw.len() != c {
            return Err(dim_err("mul_row", tx, tw));
        }
        let wd = tw.data();
        let data = tx
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(wd).map(|(a, b)| a * b))
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let tracks = self.tracks(x.0) || self.tracks(w.0);
        Ok(self.push(value, Op::MulRow(x.0, w.0), tracks, false))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let tx = &self.nodes[x.0].value;
        let data = tx.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let tracks = self.tracks(x.0);
        self.push(value, Op::Scale(x.0, factor), tracks, false)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let tx = &self.nodes[x.0].value;
        let data = tx.data().iter().map(|&v| v * sigmoid(v)).collect();
        let value = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let tracks = self.tracks(x.0);
        self.push(value, Op::Silu(x.0), tracks, false)
    }

    /// Row-wise `x / sqrt(mean(x²) + eps)`.
    pub fn rms_normalize(&mut self, x: Var, eps: f64) -> Var {
        let tx = &self.nodes[x.0].value;
        let c = tx.cols();
        let mut inv_rms = Vec::with_capacity(tx.rows());
        let mut data = Vec::with_capacity(tx.len());
        for row in tx.data().chunks(c) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
            let inv = 1.0 / math::sqrt(ms + eps);
            inv_rms.push(inv);
            data.extend(row.iter().map(|v| v * inv));
        }
        let value = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let tracks = self.tracks(x.0);
        self.push(value, Op::RmsNormalize { x: x.0, inv_rms }, tracks, false)
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        self.softmax_impl(x, false)
    }

    /// Row-wise softmax where row `i` only sees columns `0..=i`; later columns get zero.
    pub fn causal_softmax_rows(&mut self, x: Var) -> Var {
        self.softmax_impl(x, true)
    }

    fn softmax_impl(&mut self, x: Var, causal: bool) -> Var {
        let tx = &self.nodes[x.0].value;
        let c = tx.cols();
        let mut data = vec![0.0; tx.len()];
        for (i, (row, out)) in tx.data().chunks(c).zip(data.chunks_mut(c)).enumerate() {
            let valid = if causal { (i + 1).min(c) } else { c };
            softmax_row(row, valid, out);
        }
        let value = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let tracks = self.tracks(x.0);
        self.push(value, Op::SoftmaxRows(x.0), tracks, false)
    }

    /// Gathers rows of `table` (`[V×d]`) for each id, producing `[ids.len()×d]`.
    pub fn embedding_gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = &self.nodes[table.0].value;
        let (v, d) = require_2d("embedding_gather", tt)?;
        if ids.is_empty() {
            return Err(Error::Index {
                what: "embedding (empty id list)",
                index: 0,
                bound: v,
            });
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    what: "token",
                    index: id,
                    bound: v,
                });
            }
            data.extend_from_slice(tt.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        let tracks = self.tracks(table.0);
        Ok(self.push(
            value,
            Op::Gather {
                table: table.0,
                ids: ids.to_vec(),
            },
            tracks,
            false,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let (r, c) = require_2d("transpose", tx)?;
        let src = tx.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], data)?;
        let tracks = self.tracks(x.0);
        Ok(self.push(value, Op::Transpose(x.0), tracks, false))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let value = Tensor::new(shape.to_vec(), tx.data().to_vec()).map_err(|_| Error::Dimension {
            op: "reshape",
            left: tx.shape().to_vec(),
            right: shape.to_vec(),
        })?;
        let tracks = self.tracks(x.0);
        Ok(self.push(value, Op::Reshape(x.0), tracks, false))
    }

    /// Stacks 2-D inputs with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Contract("concat_rows of nothing".into()))?;
        let (_, c) = require_2d("concat_rows", &self.nodes[first.0].value)?;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let t = &self.nodes[p.0].value;
            let (r, pc) = require_2d("concat_rows", t)?;
            if pc != c {
                return Err(dim_err("concat_rows", &self.nodes[first.0].value, t));
            }
            rows += r;
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(vec![rows, c], data)?;
        let tracks = parts.iter().any(|p| self.tracks(p.0));
        let ids = parts.iter().map(|p| p.0).collect();
        Ok(self.push(value, Op::ConcatRows(ids), tracks, false))
    }

    /// Rows `start..start + len` of a 2-D tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let (r, c) = require_2d("slice_rows", tx)?;
        if len == 0 || start + len > r {
            return Err(Error::Index {
                what: "row slice end",
                index: start + len,
                bound: r,
            });
        }
        let data = tx.data()[start * c..(start + len) * c].to_vec();
        let value = Tensor::new(vec![len, c], data)?;
        let tracks = self.tracks(x.0);
        Ok(self.push(value, Op::SliceRows { x: x.0, start }, tracks, false))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().sum();
        let tracks = self.tracks(x.0);
        self.push(Tensor::scalar(s), Op::Sum(x.0), tracks, false)
    }

    /// Mean over positions of `-log softmax(logits[l])[targets[l]]`.
    pub fn cross_entropy_from_logits(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = &self.nodes[logits.0].value;
        let (l, v) = require_2d("cross_entropy", tl)?;
        if targets.len() != l || l == 0 {
            return Err(Error::Dimension {
                op: "cross_entropy",
                left: tl.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let mut probs = vec![0.0; l * v];
        let mut total = 0.0;
        for (i, (row, &t)) in tl.data().chunks(v).zip(targets).enumerate() {
            if t >= v {
                return Err(Error::Index {
                    what: "target",
                    index: t,
                    bound: v,
                });
            }
            let out = &mut probs[i * v..(i + 1) * v];
            softmax_row(row, v, out);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + math::ln(row.iter().map(|x| math::exp(x - max)).sum::<f64>());
            total += lse - row[t];
        }
        let value = Tensor::scalar(total / l as f64);
        let tracks = self.tracks(logits.0);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
            },
            tracks,
            false,
        ))
    }

    /// Propagates d(loss)/d(node) back to every `requires_grad` leaf, adding into any
    /// gradient already accumulated there.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0].value;
        if !root.is_scalar() {
            return Err(Error::Contract(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracks_grad {
                continue;
            }
            let nodes = &self.nodes;
            let mut acc = |idx: usize, f: &mut dyn FnMut(&mut [f64])| {
                if !nodes[idx].tracks_grad {
                    return;
                }
                let slot = adj[idx].get_or_insert_with(|| vec![0.0; nodes[idx].value.len()]);
                f(slot);
            };
            match &node.op {
                Op::Leaf => {
                    if node.is_param {
                        match &mut self.grads[i] {
                            Some(existing) => {
                                existing.iter_mut().zip(&g).for_each(|(e, x)| *e += x)
                            }
                            slot => *slot = Some(g),
                        }
                    }
                }
                Op::Matmul(a, b) => {
                    let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                    let (m, k) = (ta.shape()[0], ta.shape()[1]);
                    let n = tb.shape()[1];
                    acc(*a, &mut |s| mm_nt_acc(&g, tb.data(), s, m, k, n));
                    acc(*b, &mut |s| mm_tn_acc(ta.data(), &g, s, m, k, n));
                }
                Op::Add(a, b) => {
                    acc(*a, &mut |s| s.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                    acc(*b, &mut |s| s.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (nodes[*a].value.data(), nodes[*b].value.data());
                    acc(*a, &mut |s| {
                        for ((x, gi), bi) in s.iter_mut().zip(&g).zip(tb) {
                            *x += gi * bi;
                        }
                    });
                    acc(*b, &mut |s| {
                        for ((x, gi), ai) in s.iter_mut().zip(&g).zip(ta) {
                            *x += gi * ai;
                        }
                    });
                }
                Op::MulRow(x, w) => {
                    let (tx, tw) = (&nodes[*x].value, nodes[*w].value.data());
                    let c = tx.cols();
                    acc(*x, &mut |s| {
                        for (srow, grow) in s.chunks_mut(c).zip(g.chunks(c)) {
                            for ((o, gi), wi) in srow.iter_mut().zip(grow).zip(tw) {
                                *o += gi * wi;
                            }
                        }
                    });
                    acc(*w, &mut |s| {
                        for (xrow, grow) in tx.data().chunks(c).zip(g.chunks(c)) {
                            for ((o, gi), xi) in s.iter_mut().zip(grow).zip(xrow) {
                                *o += gi * xi;
                            }
                        }
                    });
                }
                Op::Scale(x, f) => {
                    acc(*x, &mut |s| s.iter_mut().zip(&g).for_each(|(o, gi)| *o += gi * f));
                }
                Op::Silu(x) => {
                    let tx = nodes[*x].value.data();
                    acc(*x, &mut |s| {
                        for ((o, gi), &xi) in s.iter_mut().zip(&g).zip(tx) {
                            let sg = sigmoid(xi);
                            *o += gi * sg * (1.0 + xi * (1.0 - sg));
                        }
                    });
                }
                Op::RmsNormalize { x, inv_rms } => {
                    let y = node.value.data();
                    let c = node.value.cols();
                    acc(*x, &mut |s| {
                        for (r, inv) in inv_rms.iter().enumerate() {
                            let yr = &y[r * c..(r + 1) * c];
                            let gr = &g[r * c..(r + 1) * c];
                            let mean_gy =
                                gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                            for ((o, gi), yi) in s[r * c..(r + 1) * c].iter_mut().zip(gr).zip(yr) {
                                *o += (gi - yi * mean_gy) * inv;
                            }
                        }
                    });
                }
                Op::SoftmaxRows(x) => {
                    let y = node.value.data();
                    let c = node.value.cols();
                    acc(*x, &mut |s| {
                        for ((srow, yrow), grow) in
                            s.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c))
                        {
                            let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                            for ((o, yi), gi) in srow.iter_mut().zip(yrow).zip(grow) {
                                *o += yi * (gi - dot);
                            }
                        }
                    });
                }
                Op::Gather { table, ids } => {
                    let d = node.value.cols();
                    acc(*table, &mut |s| {
                        for (r, &id) in ids.iter().enumerate() {
                            for (o, gi) in s[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d])
                            {
                                *o += gi;
                            }
                        }
                    });
                }
                Op::Transpose(x) => {
                    // node is [c×r]; input is [r×c]
                    let (c, r) = (node.value.shape()[0], node.value.shape()[1]);
                    acc(*x, &mut |s| {
                        for i in 0..r {
                            for j in 0..c {
                                s[i * c + j] += g[j * r + i];
                            }
                        }
                    });
                }
                Op::Reshape(x) => {
                    acc(*x, &mut |s| s.iter_mut().zip(&g).for_each(|(o, gi)| *o += gi));
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = nodes[p].value.len();
                        let gp = &g[offset..offset + n];
                        acc(p, &mut |s| s.iter_mut().zip(gp).for_each(|(o, gi)| *o += gi));
                        offset += n;
                    }
                }
                Op::SliceRows { x, start } => {
                    let c = node.value.cols();
                    let off = start * c;
                    acc(*x, &mut |s| {
                        s[off..off + g.len()]
                            .iter_mut()
                            .zip(&g)
                            .for_each(|(o, gi)| *o += gi)
                    });
                }
                Op::Sum(x) => {
                    let g0 = g[0];
                    acc(*x, &mut |s| s.iter_mut().for_each(|o| *o += g0));
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let v = nodes[*logits].value.cols();
                    let scale = g[0] / targets.len() as f64;
                    acc(*logits, &mut |s| {
                        for (o, p) in s.iter_mut().zip(probs) {
                            *o += p * scale;
                        }
                        for (r, &t) in targets.iter().enumerate() {
                            s[r * v + t] -= scale;
                        }
                    });
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng::stream(seed, 99);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    /// Central-difference check of every input of `f`. `f` builds a scalar from leaves.
    fn check_grads(
        inputs: &[Tensor],
        f: &dyn Fn(&mut Tape, &[Var]) -> Var,
        tol: f64,
    ) -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, &vars);
        tape.backward(out).unwrap();
        let analytic: Vec<Tensor> = vars.iter().map(|v| tape.grad_tensor(*v)).collect();

        let eval = |ins: &[Tensor]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ins.iter().map(|x| t.leaf(x.clone(), false)).collect();
            let o = f(&mut t, &vs);
            t.value(o).item()
        };
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (which, input) in inputs.iter().enumerate() {
            for j in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[which].data_mut()[j] += h;
                let mut minus = inputs.to_vec();
                minus[which].data_mut()[j] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let e = rel_err(analytic[which].data()[j], numeric);
                worst = worst.max(e);
                assert!(
                    e < tol,
                    "input {which} elem {j}: analytic {} numeric {numeric}",
                    analytic[which].data()[j]
                );
            }
        }
        worst
    }

    /// Reduces any tensor to a scalar through fixed random weights so every output
    /// element contributes a distinct sensitivity.
    fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Var {
        let w = random(tape.value(x).shape(), seed);
        let wv = tape.constant(w);
        let p = tape.mul(x, wv).unwrap();
        tape.sum(p)
    }

    #[test]
    fn matmul_identity_and_arithmetic() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let m = tape.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let out = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.constant(Tensor::from_rows(&[&[1.0, 2.0]]));
        let b = tape.constant(Tensor::from_rows(&[&[3.0], &[4.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(Error::Dimension { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let inputs = [random(&[3, 4], 1), random(&[4, 2], 2)];
        check_grads(
            &inputs,
            &|t, v| {
                let m = t.matmul(v[0], v[1]).unwrap();
                weighted_sum(t, m, 3)
            },
            1e-6,
        );
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[3, 4]));
        let l = tape.cross_entropy_from_logits(z, &[0, 3, 2]).unwrap();
        assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-12);

        let mut logits = Tensor::zeros(&[1, 4]);
        logits.data_mut()[2] = 30.0;
        let s = tape.constant(logits);
        let l = tape.cross_entropy_from_logits(s, &[2]).unwrap();
        assert!(tape.value(l).item() < 1e-12);
    }

    #[test]
    fn cross_entropy_out_of_range_target() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(
            tape.cross_entropy_from_logits(z, &[0, 4]),
            Err(Error::Index { index: 4, .. })
        ));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let inputs = [random(&[5, 7], 11)];
        check_grads(
            &inputs,
            &|t, v| t.cross_entropy_from_logits(v[0], &[0, 6, 3, 3, 1]).unwrap(),
            1e-5,
        );
    }

    #[test]
    fn backward_simple_calculus() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let y = tape.scale(x, 3.0);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(5.0), true);
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[10.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn grads_accumulate_until_cleared() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let y = tape.scale(x, 3.0);
        tape.backward(y).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn gradient_is_linear_in_the_loss() {
        let a = random(&[3, 3], 5);
        let build = |t: &mut Tape, x: Var| {
            let s = t.silu(x);
            let l1 = weighted_sum(t, s, 6);
            let m = t.mul(x, x).unwrap();
            let l2 = weighted_sum(t, m, 7);
            (l1, l2)
        };
        let mut separate = Tape::new();
        let x = separate.leaf(a.clone(), true);
        let (l1, l2) = build(&mut separate, x);
        separate.backward(l1).unwrap();
        separate.backward(l2).unwrap();

        let mut joint = Tape::new();
        let xj = joint.leaf(a, true);
        let (j1, j2) = build(&mut joint, xj);
        let total = joint.add(j1, j2).unwrap();
        joint.backward(total).unwrap();

        for (p, q) in separate.grad(x).unwrap().iter().zip(joint.grad(xj).unwrap()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn ops_do_not_mutate_inputs() {
        let a = random(&[4, 4], 8);
        let mut tape = Tape::new();
        let x = tape.leaf(a.clone(), true);
        let y = tape.rms_normalize(x, 1e-6);
        let z = tape.causal_softmax_rows(y);
        let s = weighted_sum(&mut tape, z, 9);
        tape.backward(s).unwrap();
        assert!(tape.value(x).bit_eq(&a));
    }

    #[test]
    fn elementwise_and_structural_gradients() {
        let x = random(&[3, 4], 20);
        let w = random(&[4], 21);
        let tol = 1e-6;
        check_grads(std::slice::from_ref(&x), &|t, v| {
            let y = t.silu(v[0]);
            weighted_sum(t, y, 1)
        }, tol);
        check_grads(std::slice::from_ref(&x), &|t, v| {
            let y = t.rms_normalize(v[0], 1e-6);
            weighted_sum(t, y, 2)
        }, tol);
        check_grads(std::slice::from_ref(&x), &|t, v| {
            let y = t.softmax_rows(v[0]);
            weighted_sum(t, y, 3)
        }, tol);
        check_grads(&[random(&[4, 4], 22)], &|t, v| {
            let y = t.causal_softmax_rows(v[0]);
            weighted_sum(t, y, 4)
        }, tol);
        check_grads(&[x.clone(), w.clone()], &|t, v| {
            let y = t.mul_row(v[0], v[1]).unwrap();
            weighted_sum(t, y, 5)
        }, tol);
        check_grads(&[x.clone(), random(&[3, 4], 23)], &|t, v| {
            let y = t.add(v[0], v[1]).unwrap();
            let z = t.mul(y, v[1]).unwrap();
            weighted_sum(t, z, 6)
        }, tol);
        check_grads(&[random(&[5, 3], 24)], &|t, v| {
            let y = t.embedding_gather(v[0], &[4, 0, 4, 2]).unwrap();
            weighted_sum(t, y, 7)
        }, tol);
        check_grads(std::slice::from_ref(&x), &|t, v| {
            let y = t.transpose(v[0]).unwrap();
            let r = t.reshape(y, &[2, 6]).unwrap();
            weighted_sum(t, r, 8)
        }, tol);
        check_grads(&[x.clone(), random(&[2, 4], 25)], &|t, v| {
            let y = t.concat_rows(&[v[1], v[0], v[1]]).unwrap();
            let s = t.slice_rows(y, 1, 3).unwrap();
            weighted_sum(t, s, 9)
        }, tol);
        check_grads(&[x], &|t, v| {
            let y = t.scale(v[0], -2.5);
            weighted_sum(t, y, 10)
        }, tol);
    }

    #[test]
    fn gather_rejects_out_of_range_ids() {
        let mut tape = Tape::new();
        let table = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(
            tape.embedding_gather(table, &[0, 3]),
            Err(Error::Index { index: 3, .. })
        ));
    }

    #[test]
    fn causal_softmax_masks_future_columns() {
        let mut tape = Tape::new();
        let x = tape.constant(random(&[3, 3], 30));
        let y = tape.causal_softmax_rows(x);
        let v = tape.value(y);
        assert_eq!(v.row(0)[1], 0.0);
        assert_eq!(v.row(0)[2], 0.0);
        assert_eq!(v.row(1)[2], 0.0);
        for r in 0..3 {
            assert!((v.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
