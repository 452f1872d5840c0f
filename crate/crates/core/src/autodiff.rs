//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Every operation records its
//! inputs and whatever it needs for the backward rule, so node order is a
//! topological order by construction. [`Graph::backward`] walks the tape once
//! in reverse insertion order and leaves the gradient of the root in the
//! `grad` slot of every node that requires one.

use std::collections::BTreeMap;

use crate::error::{dim_err, RazorError, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Input,
    Leaf,
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBias(Var, Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    L2NormalizeRows(Var),
    CosineRows(Var, Var),
    RowDot(Var, Var),
    Sum(Var),
    Mean(Var),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    LayerNorm { x: Var, gamma: Var, beta: Var },
    GatherRows { table: Var, index: Vec<usize> },
    MeanPool { x: Var, group: usize },
    Attention { qkv: Var, batch: usize, seq: usize, heads: usize },
    Diag(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Linear { .. } => "linear",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRowBias(..) => "add_row_bias",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Tanh(_) => "tanh",
            Op::Gelu(_) => "gelu",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::LogSoftmaxRows(_) => "log_softmax_rows",
            Op::L2NormalizeRows(_) => "l2_normalize",
            Op::CosineRows(..) => "cosine_similarity",
            Op::RowDot(..) => "row_dot",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::LayerNorm { .. } => "layer_norm",
            Op::GatherRows { .. } => "gather_rows",
            Op::MeanPool { .. } => "mean_pool",
            Op::Attention { .. } => "attention",
            Op::Diag(_) => "diag",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Values saved by the forward pass for the backward rule.
    saved: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
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

    /// Constant input; gradients never flow into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Input, requires_grad: false, saved: Vec::new() });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf that is not a named parameter.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: true, saved: Vec::new() });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, name: impl Into<String>, t: Tensor) -> Var {
        let v = self.leaf(t);
        self.params.push((name.into(), v));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(n, v)| (n.as_str(), *v))
    }

    /// Gradient of the last backward pass for every named parameter, zero
    /// where the root did not depend on it.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, v)| {
                let value = &self.nodes[v.0].value;
                let data = value.grad().map_or_else(|| vec![0.0; value.len()], <[f64]>::to_vec);
                (name.clone(), Tensor::from_parts(value.shape().to_vec(), data))
            })
            .collect()
    }

    fn push(&mut self, value: Tensor, op: Op, saved: Vec<f64>) -> Result<Var> {
        if !value.is_finite() {
            return Err(RazorError::NonFinite(op.name().to_string()));
        }
        let requires_grad = self.inputs_of(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, saved });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_of(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Input | Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRowBias(a, b)
            | Op::CosineRows(a, b)
            | Op::RowDot(a, b) => vec![*a, *b],
            Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Gelu(a)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::L2NormalizeRows(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Diag(a) => vec![*a],
            Op::SliceRows { x, .. } | Op::SliceCols { x, .. } | Op::MeanPool { x, .. } => vec![*x],
            Op::ConcatRows(v) | Op::ConcatCols(v) => v.clone(),
            Op::LayerNorm { x, gamma, beta } => vec![*x, *gamma, *beta],
            Op::GatherRows { table, .. } => vec![*table],
            Op::Attention { qkv, .. } => vec![*qkv],
        }
    }

    fn matrix(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        self.value(v).require_matrix(what)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return dim_err(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(out, op, Vec::new())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, op.name())?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(out, op, Vec::new())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), Vec::new())
    }

    /// `x · wᵀ + b` with `w` stored as `[out × in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, d_in) = self.matrix(x, "linear input")?;
        let (d_out, w_in) = self.matrix(w, "linear weight")?;
        if d_in != w_in {
            return dim_err(format!("linear: input width {d_in} vs weight width {w_in}"));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [d_out] {
                return dim_err(format!("linear: bias shape {:?}", self.value(b).shape()));
            }
        }
        let wt = tensor::transpose(self.value(w).data(), d_out, d_in);
        let mut out = vec![0.0; n * d_out];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_exact_mut(d_out) {
                row.copy_from_slice(bias);
            }
        }
        tensor::matmul_into(self.value(x).data(), &wt, &mut out, n, d_in, d_out);
        self.push(Tensor::from_parts(vec![n, d_out], out), Op::Linear { x, w, b }, Vec::new())
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        self.push(out, Op::Transpose(a), Vec::new())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.matrix(a, "add_row_bias")?;
        if self.value(bias).shape() != [c] {
            return dim_err(format!("bias shape {:?} for {c} columns", self.value(bias).shape()));
        }
        let b = self.value(bias).data();
        let t = self.value(a);
        let data = t.data().chunks_exact(c).flat_map(|r| r.iter().zip(b).map(|(x, y)| x + y)).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(out, Op::AddRowBias(a, bias), Vec::new())
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(RazorError::DegenerateInput("log of a non-positive value".into()));
        }
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Gelu(a), |x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (_, c) = t.dims2();
        let mut data = t.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            softmax_in_place(row);
        }
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(out, Op::SoftmaxRows(a), Vec::new())
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (_, c) = t.dims2();
        let mut data = t.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().fold(0.0, |acc, &x| acc + (x - max).exp()).ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(out, Op::LogSoftmaxRows(a), Vec::new())
    }

    /// Normalizes every row (or the whole vector) to unit L2 norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (_, c) = t.dims2();
        let mut data = t.data().to_vec();
        let mut norms = Vec::with_capacity(data.len() / c);
        for row in data.chunks_exact_mut(c) {
            let n = tensor::sum_sq(row).sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(RazorError::DegenerateInput("l2_normalize of a zero vector".into()));
            }
            row.iter_mut().for_each(|x| *x /= n);
            norms.push(n);
        }
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(out, Op::L2NormalizeRows(a), norms)
    }

    /// Row-wise cosine similarity of two equally shaped matrices; `[rows]`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "cosine_similarity")?;
        let (r, c) = self.value(a).dims2();
        let (ta, tb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(r);
        let mut saved = Vec::with_capacity(2 * r);
        for i in 0..r {
            let (x, y) = (&ta[i * c..(i + 1) * c], &tb[i * c..(i + 1) * c]);
            let (nx, ny) = (tensor::sum_sq(x).sqrt(), tensor::sum_sq(y).sqrt());
            if nx == 0.0 || ny == 0.0 {
                return Err(RazorError::DegenerateInput("cosine similarity with a zero vector".into()));
            }
            out.push(tensor::dot(x, y) / (nx * ny));
            saved.extend([nx, ny]);
        }
        self.push(Tensor::from_parts(vec![r], out), Op::CosineRows(a, b), saved)
    }

    /// Row-wise inner product; `[rows]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "row_dot")?;
        let (r, c) = self.value(a).dims2();
        let (ta, tb) = (self.value(a).data(), self.value(b).data());
        let out = (0..r).map(|i| tensor::dot(&ta[i * c..(i + 1) * c], &tb[i * c..(i + 1) * c])).collect();
        self.push(Tensor::from_parts(vec![r], out), Op::RowDot(a, b), Vec::new())
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = tensor::sum(self.value(a).data());
        self.push(Tensor::from_parts(vec![1], vec![s]), Op::Sum(a), Vec::new())
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = tensor::sum(t.data()) / t.len() as f64;
        self.push(Tensor::from_parts(vec![1], vec![s]), Op::Mean(a), Vec::new())
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.matrix(a, "slice_rows")?;
        if len == 0 || start + len > r {
            return dim_err(format!("slice_rows [{start}, {}) of {r} rows", start + len));
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        self.push(Tensor::from_parts(vec![len, c], data), Op::SliceRows { x: a, start }, Vec::new())
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.matrix(a, "slice_cols")?;
        if len == 0 || start + len > c {
            return dim_err(format!("slice_cols [{start}, {}) of {c} cols", start + len));
        }
        let src = self.value(a).data();
        let data = src.chunks_exact(c).flat_map(|row| row[start..start + len].iter().copied()).collect();
        self.push(Tensor::from_parts(vec![r, len], data), Op::SliceCols { x: a, start }, Vec::new())
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| RazorError::Dimension("concat of nothing".into()))?;
        let (_, c) = self.matrix(*first, "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, pc) = self.matrix(p, "concat_rows")?;
            if pc != c {
                return dim_err(format!("concat_rows: {pc} vs {c} columns"));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        self.push(Tensor::from_parts(vec![rows, c], data), Op::ConcatRows(parts.to_vec()), Vec::new())
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| RazorError::Dimension("concat of nothing".into()))?;
        // vectors concatenate along their only axis
        let vectors = self.value(*first).shape().len() == 1;
        let (r, _) = self.value(*first).dims2();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let rank = self.value(p).shape().len();
            if rank > 2 || (rank == 1) != vectors {
                return dim_err("concat_cols: mixed or unsupported ranks");
            }
            let (pr, pc) = self.value(p).dims2();
            if pr != r {
                return dim_err(format!("concat_cols: {pr} vs {r} rows"));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let shape = if vectors { vec![total] } else { vec![r, total] };
        self.push(Tensor::from_parts(shape, data), Op::ConcatCols(parts.to_vec()), Vec::new())
    }

    /// Per-row layer normalization with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.matrix(x, "layer_norm")?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return dim_err("layer_norm: scale/shift must match the row width");
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        // saved: normalized values, then one reciprocal std per row
        let mut saved = vec![0.0; r * c + r];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = tensor::sum(row) / c as f64;
            let var = row.iter().fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / c as f64;
            let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..c {
                let xh = (row[j] - mean) * rstd;
                saved[i * c + j] = xh;
                out[i * c + j] = xh * g[j] + b[j];
            }
            saved[r * c + i] = rstd;
        }
        self.push(Tensor::from_parts(vec![r, c], out), Op::LayerNorm { x, gamma, beta }, saved)
    }

    /// Selects rows of `table` by index (embedding lookup, reordering).
    pub fn gather_rows(&mut self, table: Var, index: &[usize]) -> Result<Var> {
        let (r, c) = self.matrix(table, "gather_rows")?;
        if index.is_empty() {
            return dim_err("gather_rows with no indices");
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(RazorError::Input(format!("row index {bad} out of range for {r} rows")));
        }
        let src = self.value(table).data();
        let data = index.iter().flat_map(|&i| src[i * c..(i + 1) * c].iter().copied()).collect();
        let out = Tensor::from_parts(vec![index.len(), c], data);
        self.push(out, Op::GatherRows { table, index: index.to_vec() }, Vec::new())
    }

    /// Averages consecutive groups of `group` rows: `[n·group × c] → [n × c]`.
    pub fn mean_pool(&mut self, x: Var, group: usize) -> Result<Var> {
        let (r, c) = self.matrix(x, "mean_pool")?;
        if group == 0 || r % group != 0 {
            return dim_err(format!("mean_pool: {r} rows not divisible by group {group}"));
        }
        let n = r / group;
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c];
        for b in 0..n {
            let acc = &mut out[b * c..(b + 1) * c];
            for s in 0..group {
                let row = &src[(b * group + s) * c..(b * group + s + 1) * c];
                acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
            }
            acc.iter_mut().for_each(|a| *a /= group as f64);
        }
        self.push(Tensor::from_parts(vec![n, c], out), Op::MeanPool { x, group }, Vec::new())
    }

    /// Scaled dot-product self-attention over `batch` sequences of length
    /// `seq`. `qkv` is `[batch·seq × 3d]` with column blocks Q | K | V, each
    /// split into `heads` contiguous slices of width `d / heads`. Returns
    /// `[batch·seq × d]` with head outputs in the same column order.
    pub fn attention(&mut self, qkv: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let (r, c3) = self.matrix(qkv, "attention")?;
        if r != batch * seq || c3 % 3 != 0 || heads == 0 || (c3 / 3) % heads != 0 {
            return dim_err(format!(
                "attention: qkv {r}×{c3} for batch {batch}, seq {seq}, heads {heads}"
            ));
        }
        let d = c3 / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let src = self.value(qkv).data();
        let mut out = vec![0.0; r * d];
        let mut probs = vec![0.0; batch * heads * seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                for i in 0..seq {
                    let qi = &src[(b * seq + i) * c3 + h * dh..][..dh];
                    let row = &mut p[i * seq..(i + 1) * seq];
                    for (j, s) in row.iter_mut().enumerate() {
                        let kj = &src[(b * seq + j) * c3 + d + h * dh..][..dh];
                        *s = tensor::dot(qi, kj) * scale;
                    }
                    softmax_in_place(row);
                    let oi = &mut out[(b * seq + i) * d + h * dh..][..dh];
                    for (j, &pij) in row.iter().enumerate() {
                        let vj = &src[(b * seq + j) * c3 + 2 * d + h * dh..][..dh];
                        oi.iter_mut().zip(vj).for_each(|(o, v)| *o += pij * v);
                    }
                }
            }
        }
        let op = Op::Attention { qkv, batch, seq, heads };
        self.push(Tensor::from_parts(vec![r, d], out), op, probs)
    }

    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix(a, "diag")?;
        if r != c {
            return dim_err(format!("diag of a non-square {r}×{c} matrix"));
        }
        let src = self.value(a).data();
        let data = (0..r).map(|i| src[i * c + i]).collect();
        self.push(Tensor::from_parts(vec![r], data), Op::Diag(a), Vec::new())
    }

    /// Reverse pass from a scalar `root`. Gradients of the previous pass are
    /// discarded; afterwards [`Graph::grad`] and [`Graph::param_grads`] hold
    /// d root / d node.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(RazorError::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        for node in &mut self.nodes {
            node.value.set_grad(None);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backward_node(i, &g, &mut grads);
            self.nodes[i].value.set_grad(Some(g));
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        match &node.op {
            Op::Input | Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).dims2().1;
                let bt = tensor::transpose(self.value(*b).data(), k, n);
                acc(*a, &mut |da| tensor::matmul_into(g, &bt, da, m, n, k));
                let av = self.value(*a).data();
                acc(*b, &mut |db| tensor::matmul_tn_into(av, g, db, m, k, n));
            }
            Op::Linear { x, w, b } => {
                let (n, d_in) = self.value(*x).dims2();
                let d_out = self.value(*w).dims2().0;
                let wv = self.value(*w).data();
                acc(*x, &mut |dx| tensor::matmul_into(g, wv, dx, n, d_out, d_in));
                let xv = self.value(*x).data();
                acc(*w, &mut |dw| tensor::matmul_tn_into(g, xv, dw, n, d_out, d_in));
                if let Some(b) = b {
                    acc(*b, &mut |db| {
                        for row in g.chunks_exact(d_out) {
                            db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                        }
                    });
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2();
                let gt = tensor::transpose(g, c, r);
                acc(*a, &mut |da| add_into(da, &gt));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| add_into(db, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| db.iter_mut().zip(g).for_each(|(d, v)| *d -= v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |da| {
                    da.iter_mut().zip(g).zip(bv).for_each(|((d, gv), y)| *d += gv * y)
                });
                acc(*b, &mut |db| {
                    db.iter_mut().zip(g).zip(av).for_each(|((d, gv), x)| *d += gv * x)
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |da| da.iter_mut().zip(g).for_each(|(d, v)| *d += c * v)),
            Op::AddRowBias(a, bias) => {
                acc(*a, &mut |da| add_into(da, g));
                let c = self.value(*bias).len();
                acc(*bias, &mut |db| {
                    for row in g.chunks_exact(c) {
                        add_into(db, row);
                    }
                });
            }
            Op::Exp(a) => acc(*a, &mut |da| {
                da.iter_mut().zip(g).zip(out).for_each(|((d, gv), y)| *d += gv * y)
            }),
            Op::Log(a) => {
                let av = self.value(*a).data();
                acc(*a, &mut |da| da.iter_mut().zip(g).zip(av).for_each(|((d, gv), x)| *d += gv / x))
            }
            Op::Tanh(a) => acc(*a, &mut |da| {
                da.iter_mut().zip(g).zip(out).for_each(|((d, gv), y)| *d += gv * (1.0 - y * y))
            }),
            Op::Gelu(a) => {
                let av = self.value(*a).data();
                acc(*a, &mut |da| {
                    for ((d, gv), &x) in da.iter_mut().zip(g).zip(av) {
                        let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                        *d += gv * (0.5 * (1.0 + t) + 0.5 * x * dt);
                    }
                })
            }
            Op::SoftmaxRows(a) => {
                let c = node.value.dims2().1;
                acc(*a, &mut |da| {
                    for ((d, gr), y) in da.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(out.chunks_exact(c)) {
                        let s = tensor::dot(gr, y);
                        for j in 0..c {
                            d[j] += y[j] * (gr[j] - s);
                        }
                    }
                })
            }
            Op::LogSoftmaxRows(a) => {
                let c = node.value.dims2().1;
                acc(*a, &mut |da| {
                    for ((d, gr), y) in da.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(out.chunks_exact(c)) {
                        let s = tensor::sum(gr);
                        for j in 0..c {
                            d[j] += gr[j] - y[j].exp() * s;
                        }
                    }
                })
            }
            Op::L2NormalizeRows(a) => {
                let c = node.value.dims2().1;
                let norms = &node.saved;
                acc(*a, &mut |da| {
                    for (r, ((d, gr), y)) in
                        da.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(out.chunks_exact(c)).enumerate()
                    {
                        let s = tensor::dot(gr, y);
                        for j in 0..c {
                            d[j] += (gr[j] - y[j] * s) / norms[r];
                        }
                    }
                })
            }
            Op::CosineRows(a, b) => {
                let c = self.value(*a).dims2().1;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let saved = &node.saved;
                let grad_side = |x: &[f64], y: &[f64], nx: f64, ny: f64, cos: f64, gv: f64, d: &mut [f64]| {
                    for j in 0..x.len() {
                        d[j] += gv * (y[j] / (nx * ny) - cos * x[j] / (nx * nx));
                    }
                };
                acc(*a, &mut |da| {
                    for r in 0..g.len() {
                        let (x, y) = (&av[r * c..(r + 1) * c], &bv[r * c..(r + 1) * c]);
                        let (nx, ny) = (saved[2 * r], saved[2 * r + 1]);
                        grad_side(x, y, nx, ny, out[r], g[r], &mut da[r * c..(r + 1) * c]);
                    }
                });
                acc(*b, &mut |db| {
                    for r in 0..g.len() {
                        let (x, y) = (&av[r * c..(r + 1) * c], &bv[r * c..(r + 1) * c]);
                        let (nx, ny) = (saved[2 * r], saved[2 * r + 1]);
                        grad_side(y, x, ny, nx, out[r], g[r], &mut db[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::RowDot(a, b) => {
                let c = self.value(*a).dims2().1;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |da| {
                    for (r, &gv) in g.iter().enumerate() {
                        let y = &bv[r * c..(r + 1) * c];
                        da[r * c..(r + 1) * c].iter_mut().zip(y).for_each(|(d, v)| *d += gv * v);
                    }
                });
                acc(*b, &mut |db| {
                    for (r, &gv) in g.iter().enumerate() {
                        let x = &av[r * c..(r + 1) * c];
                        db[r * c..(r + 1) * c].iter_mut().zip(x).for_each(|(d, v)| *d += gv * v);
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |da| da.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                acc(*a, &mut |da| da.iter_mut().for_each(|d| *d += g[0] / n))
            }
            Op::SliceRows { x, start } => {
                let c = node.value.dims2().1;
                acc(*x, &mut |dx| add_into(&mut dx[start * c..start * c + g.len()], g));
            }
            Op::SliceCols { x, start } => {
                let len = node.value.dims2().1;
                let c = self.value(*x).dims2().1;
                acc(*x, &mut |dx| {
                    for (drow, grow) in dx.chunks_exact_mut(c).zip(g.chunks_exact(len)) {
                        add_into(&mut drow[*start..start + len], grow);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    acc(p, &mut |dp| add_into(dp, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.dims2().1;
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).dims2().1;
                    acc(p, &mut |dp| {
                        for (drow, grow) in dp.chunks_exact_mut(w).zip(g.chunks_exact(total)) {
                            add_into(drow, &grow[col..col + w]);
                        }
                    });
                    col += w;
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (r, c) = node.value.dims2();
                let xhat = &node.saved[..r * c];
                let rstd = &node.saved[r * c..];
                let gam = self.value(*gamma).data();
                acc(*gamma, &mut |dg| {
                    for (grow, xrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        dg.iter_mut().zip(grow.iter().zip(xrow)).for_each(|(d, (gv, xh))| *d += gv * xh);
                    }
                });
                acc(*beta, &mut |db| {
                    for grow in g.chunks_exact(c) {
                        add_into(db, grow);
                    }
                });
                acc(*x, &mut |dx| {
                    let mut dxhat = vec![0.0; c];
                    for i in 0..r {
                        let grow = &g[i * c..(i + 1) * c];
                        let xrow = &xhat[i * c..(i + 1) * c];
                        for j in 0..c {
                            dxhat[j] = grow[j] * gam[j];
                        }
                        let m1 = tensor::sum(&dxhat) / c as f64;
                        let m2 = tensor::dot(&dxhat, xrow) / c as f64;
                        for j in 0..c {
                            dx[i * c + j] += rstd[i] * (dxhat[j] - m1 - xrow[j] * m2);
                        }
                    }
                });
            }
            Op::GatherRows { table, index } => {
                let c = node.value.dims2().1;
                acc(*table, &mut |dt| {
                    for (grow, &src) in g.chunks_exact(c).zip(index) {
                        add_into(&mut dt[src * c..(src + 1) * c], grow);
                    }
                });
            }
            Op::MeanPool { x, group } => {
                let c = node.value.dims2().1;
                let inv = 1.0 / *group as f64;
                acc(*x, &mut |dx| {
                    for (row, drow) in dx.chunks_exact_mut(c).enumerate() {
                        let grow = &g[(row / group) * c..(row / group + 1) * c];
                        drow.iter_mut().zip(grow).for_each(|(d, v)| *d += v * inv);
                    }
                });
            }
            Op::Attention { qkv, batch, seq, heads } => {
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let c3 = self.value(*qkv).dims2().1;
                let d = c3 / 3;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let src = self.value(*qkv).data();
                let probs = &node.saved;
                acc(*qkv, &mut |dq| {
                    let mut dp = vec![0.0; seq];
                    for b in 0..batch {
                        for h in 0..heads {
                            let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
                            for i in 0..seq {
                                let go = &g[(b * seq + i) * d + h * dh..][..dh];
                                let prow = &p[i * seq..(i + 1) * seq];
                                for j in 0..seq {
                                    let vj = &src[(b * seq + j) * c3 + 2 * d + h * dh..][..dh];
                                    dp[j] = tensor::dot(go, vj);
                                    let dvj = &mut dq[(b * seq + j) * c3 + 2 * d + h * dh..][..dh];
                                    dvj.iter_mut().zip(go).for_each(|(dv, gv)| *dv += prow[j] * gv);
                                }
                                let s = tensor::dot(&dp, prow);
                                for j in 0..seq {
                                    let ds = prow[j] * (dp[j] - s) * scale;
                                    let qi_off = (b * seq + i) * c3 + h * dh;
                                    let kj_off = (b * seq + j) * c3 + d + h * dh;
                                    for t in 0..dh {
                                        dq[qi_off + t] += ds * src[kj_off + t];
                                        dq[kj_off + t] += ds * src[qi_off + t];
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Diag(a) => {
                let c = self.value(*a).dims2().1;
                acc(*a, &mut |da| {
                    for (i, gv) in g.iter().enumerate() {
                        da[i * c + i] += gv;
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}
