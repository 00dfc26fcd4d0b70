//! Reverse-mode tape.
//!
//! Every op appends a node holding its output value and whatever it needs
//! for the backward sweep. Nodes refer to their inputs by index, so the tape
//! is acyclic and already in topological order.

use std::sync::Arc;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{gemm, Tensor};

use super::mask::Span;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRowVec(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax {
        x: Var,
        axis_len: usize,
        inner: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    AddRowsAt {
        base: Var,
        src: Var,
        rows: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spans: Arc<[Span]>,
        heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    BagOfWords {
        logits: Var,
        targets: Vec<Vec<usize>>,
        probs: Vec<f64>,
    },
    BceLogits {
        logits: Var,
        labels: Vec<f64>,
        scale: f64,
    },
    GumbelSoftmax {
        logits: Var,
        soft: Vec<f64>,
        tau: f64,
    },
    Sum(Var),
    Mean(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRowVec(..) => "add_row_vec",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Gelu(..) => "gelu",
            Op::Sigmoid(..) => "sigmoid",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax { .. } => "softmax",
            Op::Embedding { .. } => "embedding",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::AddRowsAt { .. } => "add_rows_at",
            Op::Attention { .. } => "attention",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::BagOfWords { .. } => "bag_of_words",
            Op::BceLogits { .. } => "bce_logits",
            Op::GumbelSoftmax { .. } => "gumbel_softmax",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Dropout { .. } => "dropout",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRowVec(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Gelu(a) | Op::Sigmoid(a) | Op::Sum(a) | Op::Mean(a) => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Softmax { x, .. }
            | Op::SliceRows { x, .. }
            | Op::GatherRows { x, .. }
            | Op::Dropout { x, .. } => vec![*x],
            Op::Embedding { table, .. } => vec![*table],
            Op::ConcatRows(xs) => xs.clone(),
            Op::AddRowsAt { base, src, .. } => vec![*base, *src],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::CrossEntropy { logits, .. }
            | Op::BagOfWords { logits, .. }
            | Op::BceLogits { logits, .. }
            | Op::GumbelSoftmax { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A single-use tape. Build the forward pass with the op methods, call
/// [`Graph::backward`] once, then read gradients with [`Graph::grad`].
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Numerically stable in-place softmax of one row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Log-softmax of one row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Op names in creation order; used for structural checks.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    /// Op name and direct inputs of a node.
    pub fn node_info(&self, v: Var) -> (&'static str, Vec<Var>) {
        let op = &self.nodes[v.0].op;
        (op.name(), op.inputs())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward's loss w.r.t. `v`, if `v` required it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: impl Into<Arc<Tensor>>) -> Var {
        self.leaf(t.into(), true)
    }

    /// A constant leaf; no gradient flows into it.
    pub fn constant(&mut self, t: impl Into<Arc<Tensor>>) -> Var {
        self.leaf(t.into(), false)
    }

    fn leaf(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        match s {
            [r, c] => Ok((*r, *c)),
            _ => shape_err(op, format!("expected a matrix, got {s:?}")),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return shape_err("matmul", format!("[{m}x{k}] x [{k2}x{n}]"));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            0.0,
        );
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, data)?, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, data)?, Op::Mul(a, b))
    }

    /// Adds a length-`n` vector to every row of an `m x n` matrix.
    pub fn add_row_vec(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.value(a).rows_cols();
        if self.value(bias).len() != n {
            return shape_err(
                "add_row_vec",
                format!("rows of width {n}, bias {:?}", self.shape(bias)),
            );
        }
        let b = self.value(bias).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, y) in row.iter_mut().zip(&b) {
                *x += y;
            }
        }
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, data)?, Op::AddRowVec(a, bias))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, data)?, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| gelu_fwd(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, data)?, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| sigmoid(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, data)?, Op::Sigmoid(a))
    }

    /// Layer normalization over the last axis with affine `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, n) = self.value(x).rows_cols();
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return shape_err("layer_norm", format!("width {n} vs gain/bias"));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; rows * n];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return shape_err("softmax", format!("axis {axis} for shape {shape:?}"));
        }
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let src = self.value(x).data();
        let mut out = src.to_vec();
        let mut buf = vec![0.0; axis_len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * axis_len * inner + i;
                for (a, slot) in buf.iter_mut().enumerate() {
                    *slot = src[base + a * inner];
                }
                softmax_in_place(&mut buf);
                for (a, v) in buf.iter().enumerate() {
                    out[base + a * inner] = *v;
                }
            }
        }
        self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis_len, inner })
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.matrix_dims(table, "embedding")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return shape_err("embedding", format!("id {bad} outside table of {v} rows"));
        }
        if ids.is_empty() {
            return shape_err("embedding", "no ids");
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(first) = xs.first() else {
            return shape_err("concat_rows", "nothing to concatenate");
        };
        let (_, d) = self.matrix_dims(*first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &x in xs {
            let (r, c) = self.matrix_dims(x, "concat_rows")?;
            if c != d {
                return shape_err("concat_rows", format!("width {c} vs {d}"));
            }
            rows += r;
            out.extend_from_slice(self.value(x).data());
        }
        self.push(Tensor::new(vec![rows, d], out)?, Op::ConcatRows(xs.to_vec()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, d) = self.matrix_dims(x, "slice_rows")?;
        if len == 0 || start + len > r {
            return shape_err("slice_rows", format!("rows {start}..{} of {r}", start + len));
        }
        let out = self.value(x).data()[start * d..(start + len) * d].to_vec();
        self.push(Tensor::new(vec![len, d], out)?, Op::SliceRows { x, start })
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, d) = self.matrix_dims(x, "gather_rows")?;
        if rows.is_empty() || rows.iter().any(|&i| i >= r) {
            return shape_err("gather_rows", format!("indices out of {r} rows"));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &i in rows {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        self.push(
            Tensor::new(vec![rows.len(), d], out)?,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
        )
    }

    /// `base` with row `i` of `src` added onto row `rows[i]`.
    pub fn add_rows_at(&mut self, base: Var, src: Var, rows: &[usize]) -> Result<Var> {
        let (r, d) = self.matrix_dims(base, "add_rows_at")?;
        let (sr, sd) = self.matrix_dims(src, "add_rows_at")?;
        if sd != d || sr != rows.len() || rows.iter().any(|&i| i >= r) {
            return shape_err("add_rows_at", format!("[{sr}x{sd}] into [{r}x{d}]"));
        }
        let mut out = self.value(base).data().to_vec();
        let s = self.value(src).data();
        for (k, &i) in rows.iter().enumerate() {
            axpy(&mut out[i * d..(i + 1) * d], 1.0, &s[k * d..(k + 1) * d]);
        }
        self.push(
            Tensor::new(vec![r, d], out)?,
            Op::AddRowsAt {
                base,
                src,
                rows: rows.to_vec(),
            },
        )
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `[N x d]`; each span covers a contiguous block of
    /// rows with its own mask. Rows of different spans never interact.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        spans: Arc<[Span]>,
        heads: usize,
    ) -> Result<Var> {
        let (n, d) = self.matrix_dims(q, "attention")?;
        if self.shape(k) != [n, d] || self.shape(v) != [n, d] {
            return shape_err("attention", "q, k, v shapes differ");
        }
        if heads == 0 || d % heads != 0 {
            return shape_err("attention", format!("{heads} heads for width {d}"));
        }
        let covered: usize = spans.iter().map(|s| s.len).sum();
        if spans.iter().any(|s| s.offset + s.len > n || s.mask.size() != s.len) || covered != n {
            return shape_err("attention", "spans do not tile the rows");
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let total: usize = spans.iter().map(|s| heads * s.len * s.len).sum();
        let mut probs = vec![0.0; total];
        let mut out = vec![0.0; n * d];
        let mut pofs = 0;
        for span in spans.iter() {
            let l = span.len;
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..l {
                    let qi = &qd[(span.offset + i) * d + c0..][..dh];
                    let p = &mut probs[pofs + i * l..pofs + (i + 1) * l];
                    let mut max = f64::NEG_INFINITY;
                    for (j, pj) in p.iter_mut().enumerate() {
                        if span.mask.allowed(i, j) {
                            let kj = &kd[(span.offset + j) * d + c0..][..dh];
                            *pj = dot(qi, kj) * scale;
                            max = max.max(*pj);
                        }
                    }
                    let mut sum = 0.0;
                    for (j, pj) in p.iter_mut().enumerate() {
                        if span.mask.allowed(i, j) {
                            *pj = (*pj - max).exp();
                            sum += *pj;
                        } else {
                            *pj = 0.0;
                        }
                    }
                    if sum > 0.0 {
                        for pj in p.iter_mut() {
                            *pj /= sum;
                        }
                    }
                    let oi = &mut out[(span.offset + i) * d + c0..][..dh];
                    for (j, &pj) in p.iter().enumerate() {
                        if pj != 0.0 {
                            axpy(oi, pj, &vd[(span.offset + j) * d + c0..][..dh]);
                        }
                    }
                }
                pofs += l * l;
            }
        }
        self.push(
            Tensor::new(vec![n, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                spans,
                heads,
                probs,
            },
        )
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, vsize) = self.matrix_dims(logits, "cross_entropy")?;
        if targets.len() != n {
            return shape_err("cross_entropy", format!("{n} rows, {} targets", targets.len()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vsize) {
            return Err(Error::InvalidArgument(format!(
                "target id {bad} outside vocabulary of {vsize}"
            )));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_mut(vsize).zip(targets) {
            let lp = log_softmax(row);
            loss -= lp[t];
            for (p, l) in row.iter_mut().zip(&lp) {
                *p = l.exp();
            }
        }
        self.push(
            Tensor::scalar(loss / n as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Order-free word prediction loss: for each row of `logits`, the sum
    /// over that row's targets of `-log softmax(row)[target]`, averaged over
    /// rows.
    pub fn bag_of_words(&mut self, logits: Var, targets: &[Vec<usize>]) -> Result<Var> {
        let (n, vsize) = self.matrix_dims(logits, "bag_of_words")?;
        if targets.len() != n {
            return shape_err("bag_of_words", format!("{n} rows, {} target sets", targets.len()));
        }
        if targets.iter().flatten().any(|&t| t >= vsize) {
            return Err(Error::InvalidArgument("bag-of-words target outside vocabulary".into()));
        }
        // Canonical order makes the sum bitwise independent of word order.
        let targets: Vec<Vec<usize>> = targets
            .iter()
            .map(|ts| {
                let mut ts = ts.clone();
                ts.sort_unstable();
                ts
            })
            .collect();
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, ts) in probs.chunks_mut(vsize).zip(&targets) {
            let lp = log_softmax(row);
            loss -= ts.iter().map(|&t| lp[t]).sum::<f64>();
            for (p, l) in row.iter_mut().zip(&lp) {
                *p = l.exp();
            }
        }
        self.push(
            Tensor::scalar(loss / n as f64),
            Op::BagOfWords {
                logits,
                targets,
                probs,
            },
        )
    }

    /// `scale * sum_i -[y_i log s(x_i) + (1 - y_i) log(1 - s(x_i))]`.
    pub fn bce_logits(&mut self, logits: Var, labels: &[f64], scale: f64) -> Result<Var> {
        let x = self.value(logits).data();
        if x.len() != labels.len() {
            return shape_err("bce_logits", format!("{} logits, {} labels", x.len(), labels.len()));
        }
        let loss: f64 = x
            .iter()
            .zip(labels)
            .map(|(&x, &y)| y * softplus(-x) + (1.0 - y) * softplus(x))
            .sum();
        self.push(
            Tensor::scalar(scale * loss),
            Op::BceLogits {
                logits,
                labels: labels.to_vec(),
                scale,
            },
        )
    }

    /// Gumbel-softmax over the last axis with caller-supplied Gumbel noise.
    ///
    /// With `hard`, the forward value is the one-hot argmax of the relaxed
    /// sample while the backward pass uses the relaxed sample's Jacobian
    /// (straight-through).
    pub fn gumbel_softmax_with_noise(
        &mut self,
        logits: Var,
        noise: &[f64],
        tau: f64,
        hard: bool,
    ) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::InvalidArgument(format!("temperature must be > 0, got {tau}")));
        }
        let shape = self.shape(logits).to_vec();
        let (_, k) = self.value(logits).rows_cols();
        let x = self.value(logits).data();
        if noise.len() != x.len() {
            return shape_err("gumbel_softmax", "noise size differs from logits");
        }
        let mut soft: Vec<f64> = x.iter().zip(noise).map(|(l, g)| (l + g) / tau).collect();
        for row in soft.chunks_mut(k) {
            softmax_in_place(row);
        }
        let out = if hard {
            let mut one_hot = vec![0.0; soft.len()];
            for (row, dst) in soft.chunks(k).zip(one_hot.chunks_mut(k)) {
                dst[argmax(row)] = 1.0;
            }
            one_hot
        } else {
            soft.clone()
        };
        self.push(Tensor::new(shape, out)?, Op::GumbelSoftmax { logits, soft, tau })
    }

    /// Draws Gumbel(0, 1) noise from `rng` and applies
    /// [`Graph::gumbel_softmax_with_noise`].
    pub fn gumbel_softmax<R: Rng + ?Sized>(
        &mut self,
        logits: Var,
        tau: f64,
        hard: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let noise = gumbel_noise(self.value(logits).len(), rng);
        self.gumbel_softmax_with_noise(logits, &noise, tau, hard)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Inverted dropout: zeroes each element with probability `rate` and
    /// rescales survivors by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(x);
        }
        if rate >= 1.0 {
            return Err(Error::InvalidArgument(format!("dropout rate {rate}")));
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = self.value(x).data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, data)?, Op::Dropout { x, mask })
    }

    /// Clears gradients so that `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Populates gradients of the scalar `loss` w.r.t. every node that
    /// requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let shape = self.shape(loss).to_vec();
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                g.filter(|_| node.requires_grad)
                    .map(|g| Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        macro_rules! buf {
            ($v:expr) => {{
                let v: Var = $v;
                grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()])
            }};
        }
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = nodes[a.0].value.rows_cols();
                let (_, n) = nodes[b.0].value.rows_cols();
                if wants(*a) {
                    let bv = nodes[b.0].value.data();
                    gemm(m, n, k, g, false, bv, true, buf!(*a), 1.0);
                }
                if wants(*b) {
                    let av = nodes[a.0].value.data();
                    gemm(k, m, n, av, true, g, false, buf!(*b), 1.0);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        axpy(buf!(v), 1.0, g);
                    }
                }
            }
            Op::AddRowVec(a, bias) => {
                if wants(*a) {
                    axpy(buf!(*a), 1.0, g);
                }
                if wants(*bias) {
                    let n = nodes[bias.0].value.len();
                    let gb = buf!(*bias);
                    for row in g.chunks(n) {
                        axpy(gb, 1.0, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = nodes[b.0].value.data();
                    for ((ga, gi), bi) in buf!(*a).iter_mut().zip(g).zip(bv) {
                        *ga += gi * bi;
                    }
                }
                if wants(*b) {
                    let av = nodes[a.0].value.data();
                    for ((gb, gi), ai) in buf!(*b).iter_mut().zip(g).zip(av) {
                        *gb += gi * ai;
                    }
                }
            }
            Op::Scale(a, s) => axpy(buf!(*a), *s, g),
            Op::Gelu(a) => {
                let x = nodes[a.0].value.data();
                for ((ga, gi), xi) in buf!(*a).iter_mut().zip(g).zip(x) {
                    *ga += gi * gelu_grad(*xi);
                }
            }
            Op::Sigmoid(a) => {
                let y = nodes[i].value.data();
                for ((ga, gi), yi) in buf!(*a).iter_mut().zip(g).zip(y) {
                    *ga += gi * yi * (1.0 - yi);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = nodes[gain.0].value.len();
                let gv = nodes[gain.0].value.data();
                if wants(*gain) {
                    let gg = buf!(*gain);
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if wants(*bias) {
                    let gb = buf!(*bias);
                    for grow in g.chunks(n) {
                        axpy(gb, 1.0, grow);
                    }
                }
                if wants(*x) {
                    let gx = buf!(*x);
                    let mut dh = vec![0.0; n];
                    for (r, (grow, hrow)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        for j in 0..n {
                            dh[j] = grow[j] * gv[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dh_h = dot(&dh, hrow) / n as f64;
                        let dst = &mut gx[r * n..(r + 1) * n];
                        for j in 0..n {
                            dst[j] += rstd[r] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Softmax { x, axis_len, inner } => {
                let y = nodes[i].value.data();
                let gx = buf!(*x);
                let outer = y.len() / (axis_len * inner);
                for o in 0..outer {
                    for c in 0..*inner {
                        let base = o * axis_len * inner + c;
                        let idx = |a: usize| base + a * inner;
                        let s: f64 = (0..*axis_len).map(|a| g[idx(a)] * y[idx(a)]).sum();
                        for a in 0..*axis_len {
                            gx[idx(a)] += y[idx(a)] * (g[idx(a)] - s);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = nodes[table.0].value.rows_cols().1;
                let gt = buf!(*table);
                for (r, &id) in ids.iter().enumerate() {
                    axpy(&mut gt[id * d..(id + 1) * d], 1.0, &g[r * d..(r + 1) * d]);
                }
            }
            Op::ConcatRows(xs) => {
                let mut ofs = 0;
                for &x in xs {
                    let len = nodes[x.0].value.len();
                    if wants(x) {
                        axpy(buf!(x), 1.0, &g[ofs..ofs + len]);
                    }
                    ofs += len;
                }
            }
            Op::SliceRows { x, start } => {
                let d = nodes[x.0].value.rows_cols().1;
                let gx = buf!(*x);
                axpy(&mut gx[start * d..start * d + g.len()], 1.0, g);
            }
            Op::GatherRows { x, rows } => {
                let d = nodes[x.0].value.rows_cols().1;
                let gx = buf!(*x);
                for (r, &src) in rows.iter().enumerate() {
                    axpy(&mut gx[src * d..(src + 1) * d], 1.0, &g[r * d..(r + 1) * d]);
                }
            }
            Op::AddRowsAt { base, src, rows } => {
                if wants(*base) {
                    axpy(buf!(*base), 1.0, g);
                }
                if wants(*src) {
                    let d = nodes[src.0].value.rows_cols().1;
                    let gs = buf!(*src);
                    for (r, &dst) in rows.iter().enumerate() {
                        axpy(&mut gs[r * d..(r + 1) * d], 1.0, &g[dst * d..(dst + 1) * d]);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                spans,
                heads,
                probs,
            } => {
                let (_, d) = nodes[q.0].value.rows_cols();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (
                    nodes[q.0].value.data(),
                    nodes[k.0].value.data(),
                    nodes[v.0].value.data(),
                );
                let mut gq = vec![0.0; qd.len()];
                let mut gk = vec![0.0; kd.len()];
                let mut gv = vec![0.0; vd.len()];
                let mut pofs = 0;
                for span in spans.iter() {
                    let l = span.len;
                    let mut ds = vec![0.0; l];
                    for h in 0..*heads {
                        let c0 = h * dh;
                        for i in 0..l {
                            let p = &probs[pofs + i * l..pofs + (i + 1) * l];
                            let gi = &g[(span.offset + i) * d + c0..][..dh];
                            let mut acc = 0.0;
                            for j in 0..l {
                                if p[j] != 0.0 {
                                    let row = (span.offset + j) * d + c0;
                                    axpy(&mut gv[row..row + dh], p[j], gi);
                                    ds[j] = dot(gi, &vd[row..row + dh]);
                                    acc += p[j] * ds[j];
                                } else {
                                    ds[j] = 0.0;
                                }
                            }
                            let qrow = (span.offset + i) * d + c0;
                            for j in 0..l {
                                if p[j] != 0.0 {
                                    let dsj = p[j] * (ds[j] - acc) * scale;
                                    let krow = (span.offset + j) * d + c0;
                                    axpy(&mut gq[qrow..qrow + dh], dsj, &kd[krow..krow + dh]);
                                    axpy(&mut gk[krow..krow + dh], dsj, &qd[qrow..qrow + dh]);
                                }
                            }
                        }
                        pofs += l * l;
                    }
                }
                for (var, gr) in [(*q, gq), (*k, gk), (*v, gv)] {
                    if wants(var) {
                        axpy(buf!(var), 1.0, &gr);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let vsize = nodes[logits.0].value.rows_cols().1;
                let s = g[0] / targets.len() as f64;
                let gl = buf!(*logits);
                for (r, &t) in targets.iter().enumerate() {
                    let row = &mut gl[r * vsize..(r + 1) * vsize];
                    axpy(row, s, &probs[r * vsize..(r + 1) * vsize]);
                    row[t] -= s;
                }
            }
            Op::BagOfWords {
                logits,
                targets,
                probs,
            } => {
                let vsize = nodes[logits.0].value.rows_cols().1;
                let s = g[0] / targets.len() as f64;
                let gl = buf!(*logits);
                for (r, ts) in targets.iter().enumerate() {
                    let row = &mut gl[r * vsize..(r + 1) * vsize];
                    axpy(row, s * ts.len() as f64, &probs[r * vsize..(r + 1) * vsize]);
                    for &t in ts {
                        row[t] -= s;
                    }
                }
            }
            Op::BceLogits {
                logits,
                labels,
                scale,
            } => {
                let x = nodes[logits.0].value.data();
                let gl = buf!(*logits);
                for ((gi, xi), yi) in gl.iter_mut().zip(x).zip(labels) {
                    *gi += g[0] * scale * (sigmoid(*xi) - yi);
                }
            }
            Op::GumbelSoftmax { logits, soft, tau } => {
                let k = nodes[logits.0].value.rows_cols().1;
                let gl = buf!(*logits);
                for ((grow, yrow), dst) in g.chunks(k).zip(soft.chunks(k)).zip(gl.chunks_mut(k)) {
                    let s = dot(grow, yrow);
                    for j in 0..k {
                        dst[j] += yrow[j] * (grow[j] - s) / tau;
                    }
                }
            }
            Op::Sum(a) => {
                for ga in buf!(*a).iter_mut() {
                    *ga += g[0];
                }
            }
            Op::Mean(a) => {
                let n = nodes[a.0].value.len() as f64;
                for ga in buf!(*a).iter_mut() {
                    *ga += g[0] / n;
                }
            }
            Op::Dropout { x, mask } => {
                for ((gx, gi), m) in buf!(*x).iter_mut().zip(g).zip(mask) {
                    *gx += gi * m;
                }
            }
        }
    }
}

/// Index of the largest element; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// `n` independent Gumbel(0, 1) draws.
pub fn gumbel_noise<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.gen::<f64>().clamp(1e-300, 1.0 - 1e-16);
            -(-u.ln()).ln()
        })
        .collect()
}
