//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its output value and enough cached state to run the backward rule.
//! [`Tape::backward`] walks the nodes in reverse creation order, which is a
//! valid topological order because inputs are always created before the
//! operations that consume them.
//!
//! Leaves created with `requires_grad = false` are constants: no gradient is
//! accumulated for them or for any node that depends only on constants, so
//! frozen sub-networks cost a forward pass and nothing more.

use super::tensor::{dot, matmul_nt_raw, matmul_raw, matmul_tn_raw, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Relu(usize),
    LayerNorm { x: usize, inv_std: Vec<f64> },
    MeanPool { x: usize, seg: usize },
    ConcatRows(Vec<usize>),
    SliceRows { x: usize, start: usize },
    GatherRows { x: usize, indices: Vec<usize> },
    Reshape(usize),
    Softmax(usize),
    L2Normalize { x: usize, norms: Vec<f64> },
    MaskedLogSumExp { x: usize, mask: Vec<bool> },
    WeightedSum { x: usize, weights: Vec<f64> },
    Sum(usize),
    Attention(Box<AttentionCache>),
}

#[derive(Debug)]
struct AttentionCache {
    q: usize,
    k: usize,
    v: usize,
    batch: usize,
    heads: usize,
    len_q: usize,
    len_kv: usize,
    /// `[batch][head][len_q][len_kv]` attention weights.
    probs: Vec<f64>,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Relu(..) => "relu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::MeanPool { .. } => "mean_pool",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::Reshape(..) => "reshape",
            Op::Softmax(..) => "softmax_rows",
            Op::L2Normalize { .. } => "l2_normalize_rows",
            Op::MaskedLogSumExp { .. } => "masked_logsumexp_rows",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Sum(..) => "sum",
            Op::Attention(..) => "attention",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, or `None` if `v` is a
    /// constant or does not influence the root.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads
            .get(v.0)?
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }

    /// Like [`Gradients::get`] but returns zeros for unreached variables.
    pub fn get_or_zero(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[usize]) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op.name() });
        }
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2(op)
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape {
                op,
                detail: format!("{sa:?} vs {sb:?}"),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("[{m}, {k}] x [{k2}, {n}]"),
            });
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(vec![m, n], out, Op::MatMul(a.0, b.0), &[a.0, b.0])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Transpose(a.0), &[a.0])
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, op.name())?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op, &[a.0, b.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a.0, b.0), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a.0, b.0), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a.0, b.0), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let out = self.value(a).data().iter().map(|x| x * k).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Scale(a.0, k), &[a.0])
    }

    fn row_broadcast(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let name = op.name();
        let (m, n) = self.dims2(a, name)?;
        if self.value(b).len() != n || self.value(b).rank() > 2 {
            return Err(Error::Shape {
                op: name,
                detail: format!("row operand {:?} against [{m}, {n}]", self.shape(b)),
            });
        }
        let row = self.value(b).data();
        let out = self
            .value(a)
            .data()
            .chunks(n)
            .flat_map(|r| r.iter().zip(row).map(|(x, y)| f(*x, *y)))
            .collect();
        self.push(vec![m, n], out, op, &[a.0, b.0])
    }

    /// `a[i, :] + b` for every row `i`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_broadcast(a, b, Op::AddRow(a.0, b.0), |x, y| x + y)
    }

    /// `a[i, :] ⊙ b` for every row `i`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_broadcast(a, b, Op::MulRow(a.0, b.0), |x, y| x * y)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).data().iter().map(|x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Relu(a.0), &[a.0])
    }

    /// Row-wise standardization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "layer_norm")?;
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(m * n);
        let mut inv_std = Vec::with_capacity(m);
        for row in x.chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(s);
            out.extend(row.iter().map(|v| (v - mean) * s));
        }
        self.push(vec![m, n], out, Op::LayerNorm { x: a.0, inv_std }, &[a.0])
    }

    /// Means over consecutive groups of `seg` rows: `[m, n] -> [m / seg, n]`.
    pub fn mean_pool(&mut self, a: Var, seg: usize) -> Result<Var> {
        let (m, n) = self.dims2(a, "mean_pool")?;
        if seg == 0 || m % seg != 0 {
            return Err(Error::Shape {
                op: "mean_pool",
                detail: format!("{m} rows do not split into segments of {seg}"),
            });
        }
        let x = self.value(a).data();
        let groups = m / seg;
        let mut out = vec![0.0; groups * n];
        for (r, row) in x.chunks(n).enumerate() {
            let o = &mut out[(r / seg) * n..(r / seg + 1) * n];
            for (ov, xv) in o.iter_mut().zip(row) {
                *ov += xv;
            }
        }
        let inv = 1.0 / seg as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        self.push(vec![groups, n], out, Op::MeanPool { x: a.0, seg }, &[a.0])
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptyInput { op: "concat_rows" })?;
        let (_, n) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != n {
                return Err(Error::Shape {
                    op: "concat_rows",
                    detail: format!("column counts {n} and {c}"),
                });
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(vec![rows, n], out, Op::ConcatRows(idx.clone()), &idx)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a).slice_rows(start, len)?;
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::SliceRows { x: a.0, start }, &[a.0])
    }

    /// Output row `i` is input row `indices[i]`.
    pub fn gather_rows(&mut self, a: Var, indices: Vec<usize>) -> Result<Var> {
        let (m, n) = self.dims2(a, "gather_rows")?;
        if let Some(bad) = indices.iter().find(|&&i| i >= m) {
            return Err(Error::Shape {
                op: "gather_rows",
                detail: format!("row {bad} out of {m}"),
            });
        }
        let x = self.value(a);
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in &indices {
            out.extend_from_slice(x.row(i));
        }
        let rows = indices.len();
        self.push(vec![rows, n], out, Op::GatherRows { x: a.0, indices }, &[a.0])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!("{:?} -> {shape:?}", self.shape(a)),
            });
        }
        let data = self.value(a).data().to_vec();
        self.push(shape.to_vec(), data, Op::Reshape(a.0), &[a.0])
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "softmax_rows")?;
        let mut out = Vec::with_capacity(m * n);
        for row in self.value(a).data().chunks(n) {
            softmax_into(row, &mut out);
        }
        self.push(vec![m, n], out, Op::Softmax(a.0), &[a.0])
    }

    /// Scales every row to unit Euclidean norm. A zero row is an error.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "l2_normalize_rows")?;
        let mut out = Vec::with_capacity(m * n);
        let mut norms = Vec::with_capacity(m);
        for (r, row) in self.value(a).data().chunks(n).enumerate() {
            let norm = dot(row, row).sqrt();
            if norm == 0.0 {
                return Err(Error::Degenerate {
                    op: "l2_normalize_rows",
                    detail: format!("row {r} has zero norm"),
                });
            }
            norms.push(norm);
            out.extend(row.iter().map(|v| v / norm));
        }
        self.push(vec![m, n], out, Op::L2Normalize { x: a.0, norms }, &[a.0])
    }

    /// `log Σ_j exp(a[i, j])` over the entries where `mask[i * n + j]` holds;
    /// returns a vector of length `m`.
    pub fn masked_logsumexp_rows(&mut self, a: Var, mask: Vec<bool>) -> Result<Var> {
        let (m, n) = self.dims2(a, "masked_logsumexp_rows")?;
        if mask.len() != m * n {
            return Err(Error::Shape {
                op: "masked_logsumexp_rows",
                detail: format!("mask of {} for [{m}, {n}]", mask.len()),
            });
        }
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let sel = &mask[i * n..(i + 1) * n];
            let max = row
                .iter()
                .zip(sel)
                .filter(|(_, &s)| s)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::Degenerate {
                    op: "masked_logsumexp_rows",
                    detail: format!("row {i} has no selected entries"),
                });
            }
            let s: f64 = row
                .iter()
                .zip(sel)
                .filter(|(_, &s)| s)
                .map(|(v, _)| (v - max).exp())
                .sum();
            out.push(max + s.ln());
        }
        self.push(vec![m], out, Op::MaskedLogSumExp { x: a.0, mask }, &[a.0])
    }

    /// `Σ weights ⊙ a` with constant weights of the same size as `a`.
    pub fn weighted_sum(&mut self, a: Var, weights: Vec<f64>) -> Result<Var> {
        if weights.len() != self.value(a).len() {
            return Err(Error::Shape {
                op: "weighted_sum",
                detail: format!("{} weights for {:?}", weights.len(), self.shape(a)),
            });
        }
        let s = dot(self.value(a).data(), &weights);
        self.push(vec![], vec![s], Op::WeightedSum { x: a.0, weights }, &[a.0])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(vec![], vec![s], Op::Sum(a.0), &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::EmptyInput { op: "mean" });
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Multi-head scaled dot-product attention, batched over `batch`
    /// independent samples.
    ///
    /// `q` is `[batch * len_q, d]`, `k` and `v` are `[batch * len_kv, d]`, and
    /// rows of each sample are contiguous. Head `h` uses columns
    /// `[h * d / heads, (h + 1) * d / heads)`. Returns `[batch * len_q, d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, heads: usize) -> Result<Var> {
        let (rq, d) = self.dims2(q, "attention")?;
        let (rk, dk) = self.dims2(k, "attention")?;
        let (rv, dv) = self.dims2(v, "attention")?;
        if batch == 0 || heads == 0 || d % heads != 0 || dk != d || dv != d || rk != rv {
            return Err(Error::Shape {
                op: "attention",
                detail: format!("q [{rq}, {d}], k [{rk}, {dk}], v [{rv}, {dv}], {heads} heads"),
            });
        }
        if rq % batch != 0 || rk % batch != 0 {
            return Err(Error::Shape {
                op: "attention",
                detail: format!("rows {rq}/{rk} not divisible by batch {batch}"),
            });
        }
        let (len_q, len_kv) = (rq / batch, rk / batch);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; rq * d];
        let mut probs = Vec::with_capacity(batch * heads * len_q * len_kv);
        let mut scores = Vec::with_capacity(len_kv);
        for b in 0..batch {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..len_q {
                    let qi = &qd[(b * len_q + i) * d + c0..(b * len_q + i) * d + c0 + dh];
                    scores.clear();
                    for j in 0..len_kv {
                        let kj = &kd[(b * len_kv + j) * d + c0..(b * len_kv + j) * d + c0 + dh];
                        scores.push(dot(qi, kj) * scale);
                    }
                    let p0 = probs.len();
                    softmax_into(&scores, &mut probs);
                    let o = &mut out[(b * len_q + i) * d + c0..(b * len_q + i) * d + c0 + dh];
                    for j in 0..len_kv {
                        let p = probs[p0 + j];
                        let vj = &vd[(b * len_kv + j) * d + c0..(b * len_kv + j) * d + c0 + dh];
                        for (ov, vv) in o.iter_mut().zip(vj) {
                            *ov += p * vv;
                        }
                    }
                }
            }
        }
        let cache = AttentionCache {
            q: q.0,
            k: k.0,
            v: v.0,
            batch,
            heads,
            len_q,
            len_kv,
            probs,
        };
        self.push(vec![rq, d], out, Op::Attention(Box::new(cache)), &[q.0, k.0, v.0])
    }

    /// Gradients of the scalar `root` with respect to every node that needs
    /// one.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                detail: format!("root must be a scalar, got {:?}", self.shape(root)),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let shapes = self.nodes[..=root.0]
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        // Only keep gradients of nodes that asked for them.
        for (i, g) in grads.iter_mut().enumerate() {
            if !self.nodes[i].needs_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], target: usize, op: &'static str, delta: Vec<f64>) -> Result<()> {
        if !self.nodes[target].needs_grad {
            return Ok(());
        }
        if delta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        match &mut grads[target] {
            Some(existing) => existing.iter_mut().zip(&delta).for_each(|(e, d)| *e += d),
            slot @ None => *slot = Some(delta),
        }
        Ok(())
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let name = node.op.name();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[*a].value.dims2(name)?;
                let n = self.nodes[*b].value.cols();
                if self.wants(*a) {
                    let da = matmul_nt_raw(g, self.nodes[*b].value.data(), m, n, k);
                    self.accumulate(grads, *a, name, da)?;
                }
                if self.wants(*b) {
                    let db = matmul_tn_raw(self.nodes[*a].value.data(), g, m, k, n);
                    self.accumulate(grads, *b, name, db)?;
                }
            }
            Op::Transpose(a) => {
                let (r, c) = node.value.dims2(name)?;
                let gt = Tensor::from_parts(vec![r, c], g.to_vec()).transpose()?;
                self.accumulate(grads, *a, name, gt.into_data())?;
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, name, g.to_vec())?;
                self.accumulate(grads, *b, name, g.to_vec())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, name, g.to_vec())?;
                self.accumulate(grads, *b, name, g.iter().map(|v| -v).collect())?;
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                if self.wants(*a) {
                    self.accumulate(grads, *a, name, g.iter().zip(bv).map(|(g, b)| g * b).collect())?;
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, name, g.iter().zip(av).map(|(g, a)| g * a).collect())?;
                }
            }
            Op::Scale(a, k) => {
                self.accumulate(grads, *a, name, g.iter().map(|v| v * k).collect())?;
            }
            Op::AddRow(a, b) => {
                let n = node.value.cols();
                self.accumulate(grads, *a, name, g.to_vec())?;
                if self.wants(*b) {
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                    }
                    self.accumulate(grads, *b, name, db)?;
                }
            }
            Op::MulRow(a, b) => {
                let n = node.value.cols();
                let av = self.nodes[*a].value.data();
                let bv = self.nodes[*b].value.data();
                if self.wants(*a) {
                    let da = g
                        .chunks(n)
                        .flat_map(|row| row.iter().zip(bv).map(|(g, b)| g * b))
                        .collect();
                    self.accumulate(grads, *a, name, da)?;
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; n];
                    for (grow, arow) in g.chunks(n).zip(av.chunks(n)) {
                        for j in 0..n {
                            db[j] += grow[j] * arow[j];
                        }
                    }
                    self.accumulate(grads, *b, name, db)?;
                }
            }
            Op::Relu(a) => {
                let x = self.nodes[*a].value.data();
                let da = g
                    .iter()
                    .zip(x)
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, name, da)?;
            }
            Op::LayerNorm { x, inv_std } => {
                let n = node.value.cols();
                let mut dx = Vec::with_capacity(g.len());
                for ((grow, yrow), s) in g.chunks(n).zip(y.chunks(n)).zip(inv_std) {
                    let mean_g = grow.iter().sum::<f64>() / n as f64;
                    let mean_gy = dot(grow, yrow) / n as f64;
                    dx.extend(
                        grow.iter()
                            .zip(yrow)
                            .map(|(gv, yv)| s * (gv - mean_g - yv * mean_gy)),
                    );
                }
                self.accumulate(grads, *x, name, dx)?;
            }
            Op::MeanPool { x, seg } => {
                let n = node.value.cols();
                let m = self.nodes[*x].value.rows();
                let inv = 1.0 / *seg as f64;
                let mut dx = Vec::with_capacity(m * n);
                for r in 0..m {
                    let grow = &g[(r / seg) * n..(r / seg + 1) * n];
                    dx.extend(grow.iter().map(|v| v * inv));
                }
                self.accumulate(grads, *x, name, dx)?;
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].value.len();
                    self.accumulate(grads, p, name, g[offset..offset + len].to_vec())?;
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                let src = &self.nodes[*x].value;
                if self.wants(*x) {
                    let c = src.cols();
                    let mut dx = vec![0.0; src.len()];
                    dx[start * c..start * c + g.len()].copy_from_slice(g);
                    self.accumulate(grads, *x, name, dx)?;
                }
            }
            Op::GatherRows { x, indices } => {
                let src = &self.nodes[*x].value;
                let c = src.cols();
                let mut dx = vec![0.0; src.len()];
                for (r, &i) in indices.iter().enumerate() {
                    dx[i * c..(i + 1) * c]
                        .iter_mut()
                        .zip(&g[r * c..(r + 1) * c])
                        .for_each(|(d, v)| *d += v);
                }
                self.accumulate(grads, *x, name, dx)?;
            }
            Op::Reshape(a) => self.accumulate(grads, *a, name, g.to_vec())?,
            Op::Softmax(a) => {
                let n = node.value.cols();
                let mut dx = Vec::with_capacity(g.len());
                for (grow, yrow) in g.chunks(n).zip(y.chunks(n)) {
                    let s = dot(grow, yrow);
                    dx.extend(grow.iter().zip(yrow).map(|(gv, yv)| yv * (gv - s)));
                }
                self.accumulate(grads, *a, name, dx)?;
            }
            Op::L2Normalize { x, norms } => {
                let n = node.value.cols();
                let mut dx = Vec::with_capacity(g.len());
                for ((grow, yrow), norm) in g.chunks(n).zip(y.chunks(n)).zip(norms) {
                    let s = dot(grow, yrow);
                    dx.extend(grow.iter().zip(yrow).map(|(gv, yv)| (gv - yv * s) / norm));
                }
                self.accumulate(grads, *x, name, dx)?;
            }
            Op::MaskedLogSumExp { x, mask } => {
                let xv = &self.nodes[*x].value;
                let n = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                for (i, (gi, lse)) in g.iter().zip(y).enumerate() {
                    for j in 0..n {
                        if mask[i * n + j] {
                            dx[i * n + j] = gi * (xv.data()[i * n + j] - lse).exp();
                        }
                    }
                }
                self.accumulate(grads, *x, name, dx)?;
            }
            Op::WeightedSum { x, weights } => {
                let dx = weights.iter().map(|w| w * g[0]).collect();
                self.accumulate(grads, *x, name, dx)?;
            }
            Op::Sum(a) => {
                let n = self.nodes[*a].value.len();
                self.accumulate(grads, *a, name, vec![g[0]; n])?;
            }
            Op::Attention(c) => self.backprop_attention(c, g, grads)?,
        }
        Ok(())
    }

    fn backprop_attention(&self, c: &AttentionCache, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let qv = self.nodes[c.q].value.data();
        let kv = self.nodes[c.k].value.data();
        let vv = self.nodes[c.v].value.data();
        let d = self.nodes[c.q].value.cols();
        let dh = d / c.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (lq, lk) = (c.len_q, c.len_kv);
        let mut dq = vec![0.0; qv.len()];
        let mut dk = vec![0.0; kv.len()];
        let mut dv = vec![0.0; vv.len()];
        let mut dp = vec![0.0; lk];
        for b in 0..c.batch {
            for h in 0..c.heads {
                let c0 = h * dh;
                let pbase = ((b * c.heads + h) * lq) * lk;
                for i in 0..lq {
                    let qrow = (b * lq + i) * d + c0;
                    let go = &g[qrow..qrow + dh];
                    let p = &c.probs[pbase + i * lk..pbase + (i + 1) * lk];
                    for j in 0..lk {
                        let vrow = (b * lk + j) * d + c0;
                        dp[j] = dot(go, &vv[vrow..vrow + dh]);
                        let dvr = &mut dv[vrow..vrow + dh];
                        for (dvx, gox) in dvr.iter_mut().zip(go) {
                            *dvx += p[j] * gox;
                        }
                    }
                    let s = dot(&dp, p);
                    for j in 0..lk {
                        let ds = p[j] * (dp[j] - s) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let krow = (b * lk + j) * d + c0;
                        for t in 0..dh {
                            dq[qrow + t] += ds * kv[krow + t];
                            dk[krow + t] += ds * qv[qrow + t];
                        }
                    }
                }
            }
        }
        self.accumulate(grads, c.q, "attention", dq)?;
        self.accumulate(grads, c.k, "attention", dk)?;
        self.accumulate(grads, c.v, "attention", dv)?;
        Ok(())
    }
}

fn softmax_into(row: &[f64], out: &mut Vec<f64>) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let start = out.len();
    let mut total = 0.0;
    for v in row {
        let e = (v - max).exp();
        total += e;
        out.push(e);
    }
    out[start..].iter_mut().for_each(|v| *v /= total);
}

/// Cosine similarity of two vectors as a differentiable scalar.
pub fn cosine_sim(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let (na, nb) = (tape.value(a).len(), tape.value(b).len());
    if na != nb || na == 0 {
        return Err(Error::LengthMismatch {
            op: "cosine_sim",
            left: na,
            right: nb,
        });
    }
    let ra = tape.reshape(a, &[1, na])?;
    let rb = tape.reshape(b, &[1, nb])?;
    let ua = tape.l2_normalize_rows(ra).map_err(degenerate_as("cosine_sim"))?;
    let ub = tape.l2_normalize_rows(rb).map_err(degenerate_as("cosine_sim"))?;
    let prod = tape.mul(ua, ub)?;
    tape.sum(prod)
}

fn degenerate_as(op: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Degenerate { .. } => Error::Degenerate {
            op,
            detail: "zero-norm input".into(),
        },
        other => other,
    }
}
