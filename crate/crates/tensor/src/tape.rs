//! Wengert-list reverse-mode differentiation.
//!
//! Every operation pushes one node holding its forward value. Nodes whose
//! inputs all have `requires_grad == false` are constants for the backward
//! pass, so frozen sub-graphs cost nothing beyond their forward evaluation.

use std::borrow::Cow;

use crate::gemm::gemm;
use crate::ops::{self, KL_FLOOR};
use crate::{Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
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
    MatMulNT(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax {
        x: Var,
        causal_offset: Option<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Select {
        x: Var,
        cols: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
    KlDiv {
        logits: Var,
        teacher: Vec<f64>,
        probs: Vec<f64>,
        unclamped: Vec<bool>,
    },
    Sum(Var),
    Combine(Vec<(Var, f64)>),
    ClampMax(Var, f64),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward computation.
///
/// Leaves may borrow tensors (for example model weights) for the lifetime of
/// the tape, so registering a large frozen parameter set is free.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Result of [`Tape::backward`]: accumulated gradients indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Owned leaf.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf borrowing an existing tensor.
    pub fn leaf_ref(&mut self, value: &'a Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// `[m×k] · [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() > 2 || tb.shape().len() > 2 || ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, 0.0);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    /// `[m×k] · [n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() > 2 || tb.shape().len() > 2 || ta.cols() != tb.cols() {
            return Err(shape_err("matmul_nt", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), true, &mut out, 0.0);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulNT(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds the vector `b` (length `n`) to every row of `a` (`m×n`).
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.len() != ta.cols() {
            return Err(shape_err("add_row", ta, tb));
        }
        let n = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + tb.data()[i % n])
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::AddRow(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * c).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| ops::gelu(x)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(out, Op::Gelu(a), rg)
    }

    /// Row-wise layer normalisation with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let n = tx.cols();
        if tg.len() != n {
            return Err(shape_err("layer_norm", tx, tg));
        }
        if tb.len() != n {
            return Err(shape_err("layer_norm", tx, tb));
        }
        let m = tx.rows();
        let mut out = vec![0.0; m * n];
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        for i in 0..m {
            let row = tx.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        self.softmax_impl(x, None)
    }

    /// Row-wise softmax where row `i` only sees columns `0..=i + offset`.
    /// Masked entries are exactly zero.
    pub fn causal_softmax(&mut self, x: Var, offset: usize) -> Var {
        self.softmax_impl(x, Some(offset))
    }

    fn softmax_impl(&mut self, x: Var, causal_offset: Option<usize>) -> Var {
        let tx = self.value(x);
        let (m, n) = (tx.rows(), tx.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let width = causal_offset.map_or(n, |o| (i + o + 1).min(n));
            ops::softmax_into(&tx.row(i)[..width], &mut out[i * n..i * n + width]);
        }
        let out = Tensor::new(tx.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::Softmax { x, causal_offset }, rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = (tx.rows(), tx.cols());
        if start + len > n || len == 0 {
            return Err(TensorError::Index {
                index: start + len,
                len: n,
            });
        }
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&tx.row(i)[start..start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::matrix(m, len, out)?, Op::SliceCols { x, start }, rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = (tx.rows(), tx.cols());
        if start + len > m || len == 0 {
            return Err(TensorError::Index {
                index: start + len,
                len: m,
            });
        }
        let out = tx.data()[start * n..(start + len) * n].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::matrix(len, n, out)?, Op::SliceRows { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        let m = first.rows();
        for &p in parts {
            if self.value(p).rows() != m {
                return Err(shape_err("concat_cols", first, self.value(p)));
            }
        }
        let n: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Gathers rows of `table` (`V×d`) for each id, giving `len(ids)×d`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, d) = (tt.rows(), tt.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::Index { index: id, len: v });
            }
            out.extend_from_slice(tt.row(id));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::matrix(ids.len(), d, out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Picks the given columns of every row.
    pub fn select(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = (tx.rows(), tx.cols());
        let mut out = Vec::with_capacity(m * cols.len());
        for i in 0..m {
            for &c in cols {
                if c >= n {
                    return Err(TensorError::Index { index: c, len: n });
                }
                out.push(tx.row(i)[c]);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::matrix(m, cols.len(), out)?,
            Op::Select {
                x,
                cols: cols.to_vec(),
            },
            rg,
        ))
    }

    /// `−ln softmax(logits)[target]` over the flattened logits.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let tl = self.value(logits);
        let loss = ops::cross_entropy_nll(tl.data(), target)?;
        let mut probs = vec![0.0; tl.len()];
        ops::softmax_into(tl.data(), &mut probs);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            rg,
        ))
    }

    /// `KL(teacher ‖ softmax(logits))` with the student distribution clamped
    /// at [`KL_FLOOR`]. The teacher distribution is a constant.
    pub fn kl_div(&mut self, teacher: &[f64], logits: Var) -> Result<Var> {
        let tl = self.value(logits);
        if teacher.len() != tl.len() {
            return Err(TensorError::Shape {
                op: "kl_div",
                left: vec![teacher.len()],
                right: tl.shape().to_vec(),
            });
        }
        if !tl.all_finite() {
            return Err(TensorError::NonFinite("kl_div"));
        }
        let lse = ops::log_sum_exp(tl.data());
        let mut probs = vec![0.0; tl.len()];
        ops::softmax_into(tl.data(), &mut probs);
        let floor = KL_FLOOR.ln();
        let mut loss = 0.0;
        let mut unclamped = Vec::with_capacity(tl.len());
        for (i, &p) in teacher.iter().enumerate() {
            let log_q = tl.data()[i] - lse;
            unclamped.push(log_q >= floor);
            if p > 0.0 {
                loss += p * (p.ln() - log_q.max(floor));
            }
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::KlDiv {
                logits,
                teacher: teacher.to_vec(),
                probs,
                unclamped,
            },
            rg,
        ))
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Linear combination `Σ w_i · s_i` of scalar nodes.
    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(TensorError::Shape {
                    op: "combine",
                    left: vec![1],
                    right: t.shape().to_vec(),
                });
            }
            total += w * t.item();
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&vars);
        Ok(self.push(Tensor::scalar(total), Op::Combine(terms.to_vec()), rg))
    }

    /// `min(x, hi)` element-wise; the gradient is zero where clamped.
    pub fn clamp_max(&mut self, x: Var, hi: f64) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| v.min(hi)).collect();
        let out = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::ClampMax(x, hi), rg)
    }

    /// Backpropagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(TensorError::Shape {
                op: "backward",
                left: vec![1],
                right: lt.shape().to_vec(),
            });
        }
        if !lt.item().is_finite() {
            return Err(TensorError::NonFinite("backward"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::new(lt.shape().to_vec(), vec![1.0])?);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<'a>, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                self.accumulate(grads, *a, |ga| {
                    gemm(m, n, k, gd, false, tb.data(), true, ga, 1.0)
                });
                self.accumulate(grads, *b, |gb| {
                    gemm(k, m, n, ta.data(), true, gd, false, gb, 1.0)
                });
            }
            Op::MatMulNT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                self.accumulate(grads, *a, |ga| {
                    gemm(m, n, k, gd, false, tb.data(), false, ga, 1.0)
                });
                self.accumulate(grads, *b, |gb| {
                    gemm(n, m, k, gd, true, ta.data(), false, gb, 1.0)
                });
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    self.accumulate(grads, *v, |gx| add_into(gx, gd));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, |gx| {
                    for ((o, &gi), &y) in gx.iter_mut().zip(gd).zip(tb.data()) {
                        *o += gi * y;
                    }
                });
                self.accumulate(grads, *b, |gx| {
                    for ((o, &gi), &y) in gx.iter_mut().zip(gd).zip(ta.data()) {
                        *o += gi * y;
                    }
                });
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, |gx| add_into(gx, gd));
                let n = self.value(*b).len();
                self.accumulate(grads, *b, |gb| {
                    for (i, &gi) in gd.iter().enumerate() {
                        gb[i % n] += gi;
                    }
                });
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, |gx| {
                    for (o, &gi) in gx.iter_mut().zip(gd) {
                        *o += c * gi;
                    }
                });
            }
            Op::Gelu(a) => {
                let ta = self.value(*a);
                self.accumulate(grads, *a, |gx| {
                    for ((o, &gi), &x) in gx.iter_mut().zip(gd).zip(ta.data()) {
                        *o += gi * ops::gelu_grad(x);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let tg = self.value(*gamma);
                let n = tg.len();
                let m = rstd.len();
                self.accumulate(grads, *gamma, |gg| {
                    for (i, &gi) in gd.iter().enumerate() {
                        gg[i % n] += gi * xhat[i];
                    }
                });
                self.accumulate(grads, *beta, |gb| {
                    for (i, &gi) in gd.iter().enumerate() {
                        gb[i % n] += gi;
                    }
                });
                self.accumulate(grads, *x, |gx| {
                    let mut dxhat = vec![0.0; n];
                    for i in 0..m {
                        let row = i * n..(i + 1) * n;
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..n {
                            let d = gd[i * n + j] * tg.data()[j];
                            dxhat[j] = d;
                            sum_d += d;
                            sum_dx += d * xhat[i * n + j];
                        }
                        let scale = rstd[i] / n as f64;
                        for (j, o) in gx[row].iter_mut().enumerate() {
                            *o += scale
                                * (n as f64 * dxhat[j] - sum_d - xhat[i * n + j] * sum_dx);
                        }
                    }
                });
            }
            Op::Softmax { x, causal_offset } => {
                let y = &node.value;
                let (m, n) = (y.rows(), y.cols());
                self.accumulate(grads, *x, |gx| {
                    for i in 0..m {
                        let width = causal_offset.map_or(n, |o| (i + o + 1).min(n));
                        let yr = &y.row(i)[..width];
                        let gr = &gd[i * n..i * n + width];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..width {
                            gx[i * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let n = self.value(*x).cols();
                let len = node.value.cols();
                self.accumulate(grads, *x, |gx| {
                    for (i, chunk) in gd.chunks(len).enumerate() {
                        add_into(&mut gx[i * n + start..i * n + start + len], chunk);
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let n = self.value(*x).cols();
                self.accumulate(grads, *x, |gx| {
                    add_into(&mut gx[start * n..start * n + gd.len()], gd)
                });
            }
            Op::ConcatCols(parts) => {
                let n = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.accumulate(grads, p, |gx| {
                        for (i, chunk) in gx.chunks_mut(w).enumerate() {
                            add_into(chunk, &gd[i * n + offset..i * n + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).cols();
                self.accumulate(grads, *table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &gd[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Select { x, cols } => {
                let n = self.value(*x).cols();
                let k = cols.len();
                self.accumulate(grads, *x, |gx| {
                    for (i, chunk) in gd.chunks(k).enumerate() {
                        for (&c, &gi) in cols.iter().zip(chunk) {
                            gx[i * n + c] += gi;
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                let g0 = gd[0];
                self.accumulate(grads, *logits, |gx| {
                    for (j, (o, &p)) in gx.iter_mut().zip(probs).enumerate() {
                        let onehot = if j == *target { 1.0 } else { 0.0 };
                        *o += g0 * (p - onehot);
                    }
                });
            }
            Op::KlDiv {
                logits,
                teacher,
                probs,
                unclamped,
            } => {
                let g0 = gd[0];
                let live_mass: f64 = teacher
                    .iter()
                    .zip(unclamped)
                    .filter(|(_, &u)| u)
                    .map(|(p, _)| p)
                    .sum();
                self.accumulate(grads, *logits, |gx| {
                    for j in 0..gx.len() {
                        let own = if unclamped[j] { teacher[j] } else { 0.0 };
                        gx[j] += g0 * (probs[j] * live_mass - own);
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = gd[0];
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|o| *o += g0));
            }
            Op::Combine(terms) => {
                let g0 = gd[0];
                for &(v, w) in terms {
                    self.accumulate(grads, v, |gx| gx[0] += g0 * w);
                }
            }
            Op::ClampMax(x, hi) => {
                let tx = self.value(*x);
                self.accumulate(grads, *x, |gx| {
                    for ((o, &gi), &v) in gx.iter_mut().zip(gd).zip(tx.data()) {
                        if v < *hi {
                            *o += gi;
                        }
                    }
                });
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(node.value.shape()));
        f(slot.data_mut());
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_inputs_receive_no_gradient() {
        let mut tape = Tape::new();
        let w = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let a = tape.leaf_ref(&w, false);
        let b = tape.leaf(Tensor::matrix(2, 1, vec![0.5, -1.0]).unwrap(), true);
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        assert!(g.get(a).is_none());
        // d/db sum(W b) = column sums of W
        assert_eq!(g.get(b).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn causal_mask_zeroes_future() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(2, 3, vec![1.0; 6]).unwrap(), true);
        let y = tape.causal_softmax(x, 0);
        let v = tape.value(y).data().to_vec();
        assert_eq!(&v[..3], &[1.0, 0.0, 0.0]);
        assert_eq!(&v[3..], &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn composite_two_by_two_matches_analytic_jacobian() {
        // f(A) = sum((A x) ⊙ (A x)) with x fixed; df/dA = 2 (A x) xᵀ
        let a = [1.0, -2.0, 0.5, 3.0];
        let x = [2.0, 1.0];
        let mut tape = Tape::new();
        let av = tape.leaf(Tensor::matrix(2, 2, a.to_vec()).unwrap(), true);
        let xv = tape.constant(Tensor::matrix(2, 1, x.to_vec()).unwrap());
        let y = tape.matmul(av, xv).unwrap();
        let sq = tape.mul(y, y).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        let ax = [a[0] * x[0] + a[1] * x[1], a[2] * x[0] + a[3] * x[1]];
        let want = [2.0 * ax[0] * x[0], 2.0 * ax[0] * x[1], 2.0 * ax[1] * x[0], 2.0 * ax[1] * x[1]];
        assert_eq!(g.get(av).unwrap().data(), &want);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let logits = [0.1, -0.4, 2.0];
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::vector(logits.to_vec()), true);
        let l = tape.cross_entropy(z, 2).unwrap();
        let g = tape.backward(l).unwrap();
        let p = ops::softmax(&logits).unwrap();
        let want = [p[0], p[1], p[2] - 1.0];
        for (a, b) in g.get(z).unwrap().data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn clamp_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![5.0, 20.0]), true);
        let c = tape.clamp_max(x, 10.0);
        let s = tape.sum(c);
        assert_eq!(tape.value(s).item(), 15.0);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        assert!(tape.backward(x).is_err());
    }
}
