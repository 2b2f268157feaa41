//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so a node's parents always have
//! smaller ids and a single reverse sweep over the tape is a valid
//! topological traversal. Gradients from multiple consumers are summed.

use std::fmt;

use super::tensor::{matmul_nt, matmul_raw, matmul_tn, softmax_row, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this module.
///
/// Receives the input values, the forward output and the upstream gradient,
/// and returns one gradient buffer per input (`None` for no contribution).
pub trait CustomOp {
    fn name(&self) -> &str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Exp,
    Relu,
}

enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    Softmax(Var),
    Cumsum(Var),
    Transpose(Var),
    Reshape(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    NormalizeRows(Var),
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, count: usize },
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A computation graph recording every operation applied to its nodes.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.nodes.len()).finish()
    }
}

/// How the right operand of a binary op lines up with the left operand.
#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    Row,
    Scalar,
}

fn broadcast_kind(a: &Tensor, b: &Tensor) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        Ok(Broadcast::Same)
    } else if b.numel() == 1 {
        Ok(Broadcast::Scalar)
    } else if b.numel() == a.last_dim() && b.last_dim() == a.last_dim() {
        Ok(Broadcast::Row)
    } else {
        Err(Error::InvalidShape(format!("cannot broadcast {:?} onto {:?}", b.shape(), a.shape())))
    }
}

fn rhs_index(kind: Broadcast, i: usize, n: usize) -> usize {
    match kind {
        Broadcast::Same => i,
        Broadcast::Row => i % n,
        Broadcast::Scalar => 0,
    }
}

fn reduce_to(kind: Broadcast, grad: Vec<f64>, n: usize) -> Vec<f64> {
    match kind {
        Broadcast::Same => grad,
        Broadcast::Row => {
            let mut out = vec![0.0; n];
            for (i, g) in grad.iter().enumerate() {
                out[i % n] += g;
            }
            out
        }
        Broadcast::Scalar => vec![grad.iter().sum()],
    }
}

fn check_matrix(t: &Tensor, what: &str) -> Result<()> {
    if t.is_matrix() {
        Ok(())
    } else {
        Err(Error::InvalidShape(format!("{what} needs a matrix, got {:?}", t.shape())))
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable input (parameter or probe).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_matrix(ta, "matmul")?;
        check_matrix(tb, "matmul")?;
        let (m, k, k2, n) = (ta.rows(), ta.cols(), tb.rows(), tb.cols());
        if k != k2 {
            return Err(Error::InvalidShape(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let out = Tensor::new(vec![m, n], matmul_raw(ta.data(), tb.data(), m, k, n))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let kind = broadcast_kind(ta, tb)?;
        let n = ta.last_dim();
        let data = ta.data().iter().enumerate().map(|(i, &x)| f(x, tb.data()[rhs_index(kind, i, n)])).collect();
        Ok((Tensor::new(ta.shape().to_vec(), data)?, self.rg(&[a, b])))
    }

    /// `a + b`, where `b` may be a scalar or a row broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, rg) = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, rg) = self.binary(a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, rg) = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * factor).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, factor), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x + c).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Var {
        let t = self.value(a);
        let data = t
            .data()
            .iter()
            .map(|&x| match f {
                Unary::Tanh => x.tanh(),
                Unary::Exp => x.exp(),
                Unary::Relu => x.max(0.0),
            })
            .collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(out, Op::Unary(a, f), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    /// Softmax over the last dimension, computed with max subtraction.
    pub fn softmax_lastdim(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.last_dim();
        let mut data = vec![0.0; t.numel()];
        for (row, out) in t.data().chunks(n).zip(data.chunks_mut(n)) {
            softmax_row(row, out);
        }
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Inclusive prefix sum over the last dimension.
    pub fn cumsum_lastdim(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.last_dim();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            for j in 1..n {
                row[j] += row[j - 1];
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(out, Op::Cumsum(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        check_matrix(t, "slice_cols")?;
        let (m, n) = (t.rows(), t.cols());
        if start >= end || end > n {
            return Err(Error::InvalidShape(format!("column range {start}..{end} invalid for {n} columns")));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for r in 0..m {
            data.extend_from_slice(&t.row(r)[start..end]);
        }
        let out = Tensor::new(vec![m, w], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SliceCols(a, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::InvalidShape("concat of nothing".into()))?;
        let m = self.value(*first).rows();
        let mut total = 0;
        for p in parts {
            let t = self.value(*p);
            check_matrix(t, "concat_cols")?;
            if t.rows() != m {
                return Err(Error::InvalidShape("concat row counts differ".into()));
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let out = Tensor::new(vec![m, total], data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Embedding lookup: row `ids[k]` of `table` becomes output row `k`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        check_matrix(t, "gather_rows")?;
        if ids.is_empty() {
            return Err(Error::Empty("gather_rows ids".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * t.cols());
        for &id in ids {
            if id >= t.rows() {
                return Err(Error::IndexOutOfRange { index: id, limit: t.rows() });
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(vec![ids.len(), t.cols()], data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(out, Op::GatherRows(table, ids.to_vec()), rg))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let n = t.last_dim();
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(Error::InvalidShape("layer_norm gain/bias width".into()));
        }
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let mut data = vec![0.0; t.numel()];
        for (row, out) in t.data().chunks(n).zip(data.chunks_mut(n)) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                out[j] = (row[j] - mean) * rstd * gv[j] + bv[j];
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, eps }, rg))
    }

    /// Divides each last-dimension row by its sum.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = t.last_dim();
        let mut data = t.data().to_vec();
        for (r, row) in data.chunks_mut(n).enumerate() {
            let s: f64 = row.iter().sum();
            if s <= 0.0 || !s.is_finite() {
                return Err(Error::DegenerateRow { row: r });
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::NormalizeRows(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Mean negative log-likelihood of `targets` over rows where `mask` is set.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let t = self.value(logits);
        check_matrix(t, "cross_entropy")?;
        let (rows, vocab) = (t.rows(), t.cols());
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::InvalidShape(format!(
                "cross_entropy: {rows} rows, {} targets, {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Empty("cross_entropy: every position masked".into()));
        }
        let mut total = 0.0;
        for (r, (&target, &keep)) in targets.iter().zip(mask).enumerate() {
            if !keep {
                continue;
            }
            if target >= vocab {
                return Err(Error::IndexOutOfRange { index: target, limit: vocab });
            }
            let row = t.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[target];
        }
        let out = Tensor::scalar(total / count as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(out, Op::CrossEntropy { logits, targets: targets.to_vec(), mask: mask.to_vec(), count }, rg))
    }

    /// Records an externally computed value together with its backward rule.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = self.rg(inputs);
        self.push(output, Op::Custom(inputs.to_vec(), op), rg)
    }

    fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contribution) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    /// Reverse sweep from a scalar `root`; replaces gradients of any earlier sweep.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::InvalidShape(format!(
                "backward needs a scalar root, got {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[id];
        let out = &node.value;
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if rg(a) {
                    Self::accumulate(grads, *a, matmul_nt(g, tb.data(), m, n, k));
                }
                if rg(b) {
                    Self::accumulate(grads, *b, matmul_tn(ta.data(), g, m, k, n));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let kind = broadcast_kind(self.value(*a), self.value(*b))?;
                let n = self.value(*a).last_dim();
                if rg(a) {
                    Self::accumulate(grads, *a, g.to_vec());
                }
                if rg(b) {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    let gb = reduce_to(kind, g.iter().map(|v| v * sign).collect(), n);
                    Self::accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let kind = broadcast_kind(ta, tb)?;
                let n = ta.last_dim();
                if rg(a) {
                    let ga = g.iter().enumerate().map(|(i, gv)| gv * tb.data()[rhs_index(kind, i, n)]).collect();
                    Self::accumulate(grads, *a, ga);
                }
                if rg(b) {
                    let gb = g.iter().zip(ta.data()).map(|(gv, av)| gv * av).collect();
                    Self::accumulate(grads, *b, reduce_to(kind, gb, n));
                }
            }
            Op::Scale(a, f) => Self::accumulate(grads, *a, g.iter().map(|v| v * f).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => Self::accumulate(grads, *a, g.to_vec()),
            Op::Unary(a, f) => {
                let x = self.value(*a).data();
                let ga = match f {
                    Unary::Tanh => g.iter().zip(out.data()).map(|(gv, y)| gv * (1.0 - y * y)).collect(),
                    Unary::Exp => g.iter().zip(out.data()).map(|(gv, y)| gv * y).collect(),
                    Unary::Relu => g.iter().zip(x).map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 }).collect(),
                };
                Self::accumulate(grads, *a, ga);
            }
            Op::Softmax(a) => {
                let n = out.last_dim();
                let mut ga = vec![0.0; g.len()];
                for ((y, gr), o) in out.data().chunks(n).zip(g.chunks(n)).zip(ga.chunks_mut(n)) {
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        o[j] = y[j] * (gr[j] - dot);
                    }
                }
                Self::accumulate(grads, *a, ga);
            }
            Op::Cumsum(a) => {
                let n = out.last_dim();
                let mut ga = g.to_vec();
                for row in ga.chunks_mut(n) {
                    for j in (0..n.saturating_sub(1)).rev() {
                        row[j] += row[j + 1];
                    }
                }
                Self::accumulate(grads, *a, ga);
            }
            Op::Transpose(a) => {
                let gt = Tensor::new(out.shape().to_vec(), g.to_vec())?.transpose()?;
                Self::accumulate(grads, *a, gt.into_data());
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let (m, n, w) = (src.rows(), src.cols(), out.cols());
                let mut ga = vec![0.0; m * n];
                for r in 0..m {
                    ga[r * n + start..r * n + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                Self::accumulate(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let (m, total) = (out.rows(), out.cols());
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if rg(p) {
                        let mut gp = Vec::with_capacity(m * w);
                        for r in 0..m {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        Self::accumulate(grads, *p, gp);
                    }
                    offset += w;
                }
            }
            Op::GatherRows(table, ids) => {
                let t = self.value(*table);
                let n = t.cols();
                let mut gt = vec![0.0; t.numel()];
                for (k, &id) in ids.iter().enumerate() {
                    for j in 0..n {
                        gt[id * n + j] += g[k * n + j];
                    }
                }
                Self::accumulate(grads, *table, gt);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let t = self.value(*x);
                let n = t.last_dim();
                let gv = self.value(*gain).data();
                let mut gx = vec![0.0; t.numel()];
                let mut ggain = vec![0.0; n];
                let mut gbias = vec![0.0; n];
                for ((row, gr), ox) in t.data().chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                    let rstd = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * rstd).collect();
                    let dxhat: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                    let m1 = dxhat.iter().sum::<f64>() / n as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        ox[j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                        ggain[j] += gr[j] * xhat[j];
                        gbias[j] += gr[j];
                    }
                }
                if rg(x) {
                    Self::accumulate(grads, *x, gx);
                }
                if rg(gain) {
                    Self::accumulate(grads, *gain, ggain);
                }
                if rg(bias) {
                    Self::accumulate(grads, *bias, gbias);
                }
            }
            Op::NormalizeRows(a) => {
                let src = self.value(*a);
                let n = src.last_dim();
                let mut ga = vec![0.0; g.len()];
                for (((x, y), gr), o) in
                    src.data().chunks(n).zip(out.data().chunks(n)).zip(g.chunks(n)).zip(ga.chunks_mut(n))
                {
                    let s: f64 = x.iter().sum();
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        o[j] = (gr[j] - dot) / s;
                    }
                }
                Self::accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                Self::accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::CrossEntropy { logits, targets, mask, count } => {
                let t = self.value(*logits);
                let vocab = t.cols();
                let scale = g[0] / *count as f64;
                let mut gl = vec![0.0; t.numel()];
                for (r, (&target, &keep)) in targets.iter().zip(mask).enumerate() {
                    if !keep {
                        continue;
                    }
                    let o = &mut gl[r * vocab..(r + 1) * vocab];
                    softmax_row(t.row(r), o);
                    o[target] -= 1.0;
                    for v in o.iter_mut() {
                        *v *= scale;
                    }
                }
                Self::accumulate(grads, *logits, gl);
            }
            Op::Custom(inputs, op) => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let contributions = op.backward(&values, out, g);
                if contributions.len() != inputs.len() {
                    return Err(Error::Contract(format!(
                        "custom op {} returned {} gradients for {} inputs",
                        op.name(),
                        contributions.len(),
                        inputs.len()
                    )));
                }
                for (v, c) in inputs.iter().zip(contributions) {
                    if let (true, Some(c)) = (rg(v), c) {
                        Self::accumulate(grads, *v, c);
                    }
                }
            }
        }
        Ok(())
    }
}
