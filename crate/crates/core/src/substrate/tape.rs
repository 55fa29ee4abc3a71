//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every operation appends a node to the tape; node indices are a valid
//! topological order, so the backward pass is a single reverse sweep.

use super::tensor::{matmul_at_into, matmul_bt_into, matmul_into, Tensor};
use crate::error::{Error, Result};

/// Lower clamp applied to arguments of [`Tape::log`].
pub const LOG_CLAMP: f64 = 1e-12;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows { x: Var, inv_std: Vec<f64> },
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Reshape(Var),
    Transpose(Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    BlockAttention(Box<AttentionSaved>),
}

#[derive(Debug)]
struct AttentionSaved {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    blocks: usize,
    // [blocks][heads][bq][bk]
    probs: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradient tape. Operations are recorded in creation order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; exactly zero when `v` does not reach the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf, honoring the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    /// Records a leaf that gradients flow into.
    pub fn var(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).expect_matrix("matmul_bt")?;
        let (n, k2) = self.value(b).expect_matrix("matmul_bt")?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul_bt inner dimensions disagree: {:?} x {:?}ᵀ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_bt_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulBt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a row vector (`numel == cols(a)`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let av = self.value(a);
        let rv = self.value(row);
        let c = av.cols();
        if rv.numel() != c {
            return Err(Error::shape(format!(
                "add_row: row of {} values against {:?}",
                rv.numel(),
                av.shape()
            )));
        }
        let mut data = av.data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (x, b) in chunk.iter_mut().zip(rv.data()) {
                *x += b;
            }
        }
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    /// Multiplies every element of `a` by the single-element tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape(format!(
                "mul_scalar: expected a single-element factor, got {:?}",
                self.shape(s)
            )));
        }
        let sv = self.value(s).item();
        let out = self.value(a).map(|x| x * sv);
        let rg = self.rg(&[a, s]);
        Ok(self.push(out, Op::MulScalar(a, s), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(out, Op::Exp(a), rg)
    }

    /// Natural log with arguments clamped below at [`LOG_CLAMP`].
    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(LOG_CLAMP).ln());
        let rg = self.rg(&[a]);
        self.push(out, Op::Log(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(out, Op::Sigmoid(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        let rg = self.rg(&[a]);
        self.push(out, Op::Gelu(a), rg)
    }

    /// Softmax over the last dimension.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let c = av.cols();
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let out = Tensor::new(av.shape().to_vec(), data).expect("shape preserved");
        let rg = self.rg(&[a]);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    /// Log-softmax over the last dimension.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let c = av.cols();
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(c) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let out = Tensor::new(av.shape().to_vec(), data).expect("shape preserved");
        let rg = self.rg(&[a]);
        self.push(out, Op::LogSoftmaxRows(a), rg)
    }

    /// Zero-mean, unit-variance normalization of each row (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let av = self.value(a);
        let c = av.cols();
        let mut data = av.data().to_vec();
        let mut inv_std = Vec::with_capacity(av.rows());
        for row in data.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * is);
            inv_std.push(is);
        }
        let out = Tensor::new(av.shape().to_vec(), data).expect("shape preserved");
        let rg = self.rg(&[a]);
        self.push(out, Op::LayerNormRows { x: a, inv_std }, rg)
    }

    /// Scales each row to unit Euclidean norm; a zero row is a numeric error.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let c = av.cols();
        let mut data = av.data().to_vec();
        let mut norms = Vec::with_capacity(av.rows());
        for (i, row) in data.chunks_mut(c).enumerate() {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::Numeric(format!(
                    "cannot normalize row {i} with norm {n}"
                )));
            }
            row.iter_mut().for_each(|x| *x /= n);
            norms.push(n);
        }
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::L2NormalizeRows { x: a, norms }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = Tensor::scalar(av.sum() / av.numel() as f64);
        let rg = self.rg(&[a]);
        self.push(out, Op::Mean(a), rg)
    }

    /// Mean over rows, giving a `[1, cols]` tensor.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        let mut data = vec![0.0; c];
        for row in av.data().chunks(c) {
            for (o, x) in data.iter_mut().zip(row) {
                *o += x;
            }
        }
        data.iter_mut().for_each(|x| *x /= r as f64);
        let out = Tensor::new(vec![1, c], data).expect("shape");
        let rg = self.rg(&[a]);
        self.push(out, Op::MeanRows(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    /// Selects rows by index (repeats allowed); output is `[indices.len(), cols]`.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = (av.rows(), av.cols());
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(Error::shape(format!("gather_rows: row {i} out of {r}")));
            }
            data.extend_from_slice(av.row(i));
        }
        let out = Tensor::new(vec![indices.len(), c], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::GatherRows(a, indices.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| Error::shape("concat_rows of nothing"))?;
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != c {
                return Err(Error::shape(format!(
                    "concat_rows: {:?} does not have {c} columns",
                    pv.shape()
                )));
            }
            data.extend_from_slice(pv.data());
        }
        let rows = data.len() / c.max(1);
        let out = Tensor::new(vec![rows, c], data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| Error::shape("concat_cols of nothing"))?;
        if let Some(&bad) = parts.iter().find(|&&p| self.value(p).rows() != r) {
            return Err(Error::shape(format!(
                "concat_cols: {:?} does not have {r} rows",
                self.shape(bad)
            )));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![r, total], data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        let c = av.cols();
        if start > end || end > c {
            return Err(Error::shape(format!(
                "slice_cols {start}..{end} of {:?}",
                av.shape()
            )));
        }
        let data: Vec<f64> = av
            .data()
            .chunks(c)
            .flat_map(|row| row[start..end].iter().copied())
            .collect();
        let out = Tensor::new(vec![av.rows(), end - start], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SliceCols(a, start, end), rg))
    }

    /// Multi-head scaled dot-product attention restricted to aligned blocks.
    ///
    /// Query rows are split into `blocks` equal contiguous groups, as are key/value
    /// rows; block `b` of the queries attends only to block `b` of the keys.
    pub fn block_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        blocks: usize,
    ) -> Result<Var> {
        let (nq, d) = self.value(q).expect_matrix("attention queries")?;
        let (nk, dk) = self.value(k).expect_matrix("attention keys")?;
        let (nv, dv) = self.value(v).expect_matrix("attention values")?;
        if dk != d || dv != d || nv != nk {
            return Err(Error::shape(format!(
                "attention shapes q {:?} k {:?} v {:?}",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape(format!("model dim {d} not divisible by {heads} heads")));
        }
        if blocks == 0 || nq % blocks != 0 || nk % blocks != 0 {
            return Err(Error::shape(format!(
                "{blocks} blocks do not tile {nq} queries and {nk} keys"
            )));
        }
        let (bq, bk, dh) = (nq / blocks, nk / blocks, d / heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![0.0; blocks * heads * bq * bk];
        let mut out = vec![0.0; nq * d];
        for b in 0..blocks {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * bq * bk..(b * heads + h + 1) * bq * bk];
                for i in 0..bq {
                    let qi = &qd[(b * bq + i) * d + h * dh..(b * bq + i) * d + (h + 1) * dh];
                    let prow = &mut p[i * bk..(i + 1) * bk];
                    for (j, pj) in prow.iter_mut().enumerate() {
                        let kj = &kd[(b * bk + j) * d + h * dh..(b * bk + j) * d + (h + 1) * dh];
                        *pj = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
                    }
                    softmax_in_place(prow);
                    let orow = &mut out[(b * bq + i) * d + h * dh..(b * bq + i) * d + (h + 1) * dh];
                    for (j, &pj) in prow.iter().enumerate() {
                        let vj = &vd[(b * bk + j) * d + h * dh..(b * bk + j) * d + (h + 1) * dh];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += pj * x;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![nq, d], out)?;
        let rg = self.rg(&[q, k, v]);
        let saved = AttentionSaved {
            q,
            k,
            v,
            heads,
            blocks,
            probs,
        };
        Ok(self.push(out, Op::BlockAttention(Box::new(saved)), rg))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.backprop_node(idx, &dy, &mut grads)?;
            grads[idx] = Some(dy);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_with(
        &self,
        grads: &mut [Option<Tensor>],
        v: Var,
        f: impl FnOnce(&mut [f64]),
    ) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        f(slot.as_mut().expect("initialized").data_mut());
    }

    fn backprop_node(&self, idx: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.value(a).expect_matrix("matmul")?;
                let n = self.value(b).shape()[1];
                self.accumulate_with(grads, a, |ga| {
                    matmul_bt_into(dy.data(), self.value(b).data(), ga, m, n, k)
                });
                self.accumulate_with(grads, b, |gb| {
                    matmul_at_into(self.value(a).data(), dy.data(), gb, m, k, n)
                });
            }
            &Op::MatMulBt(a, b) => {
                let (m, k) = self.value(a).expect_matrix("matmul_bt")?;
                let n = self.value(b).shape()[0];
                // y = a·bᵀ: da = dy·b, db = dyᵀ·a
                self.accumulate_with(grads, a, |ga| {
                    matmul_into(dy.data(), self.value(b).data(), ga, m, n, k)
                });
                self.accumulate_with(grads, b, |gb| {
                    matmul_at_into(dy.data(), self.value(a).data(), gb, m, n, k)
                });
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, dy.clone());
                self.accumulate(grads, b, dy.clone());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, dy.clone());
                self.accumulate(grads, b, dy.map(|x| -x));
            }
            &Op::Mul(a, b) => {
                self.accumulate(grads, a, dy.zip_map(self.value(b), |g, x| g * x)?);
                self.accumulate(grads, b, dy.zip_map(self.value(a), |g, x| g * x)?);
            }
            &Op::AddRow(a, row) => {
                self.accumulate(grads, a, dy.clone());
                let c = dy.cols();
                self.accumulate_with(grads, row, |gr| {
                    for chunk in dy.data().chunks(c) {
                        for (o, g) in gr.iter_mut().zip(chunk) {
                            *o += g;
                        }
                    }
                });
            }
            &Op::MulScalar(a, s) => {
                let sv = self.value(s).item();
                self.accumulate(grads, a, dy.map(|g| g * sv));
                let ds: f64 = dy
                    .data()
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(g, x)| g * x)
                    .sum();
                self.accumulate_with(grads, s, |gs| gs[0] += ds);
            }
            &Op::Scale(a, c) => self.accumulate(grads, a, dy.map(|g| g * c)),
            &Op::Exp(a) => self.accumulate(grads, a, dy.zip_map(y, |g, e| g * e)?),
            &Op::Log(a) => {
                let g = dy.zip_map(self.value(a), |g, x| if x > LOG_CLAMP { g / x } else { 0.0 })?;
                self.accumulate(grads, a, g);
            }
            &Op::Sigmoid(a) => {
                self.accumulate(grads, a, dy.zip_map(y, |g, s| g * s * (1.0 - s))?)
            }
            &Op::Gelu(a) => {
                let g = dy.zip_map(self.value(a), |g, x| {
                    let inner = GELU_C * (x + 0.044715 * x * x * x);
                    let t = inner.tanh();
                    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                    g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)
                })?;
                self.accumulate(grads, a, g);
            }
            &Op::SoftmaxRows(a) => {
                let c = y.cols();
                self.accumulate_with(grads, a, |ga| {
                    for ((gr, yr), dr) in ga
                        .chunks_mut(c)
                        .zip(y.data().chunks(c))
                        .zip(dy.data().chunks(c))
                    {
                        let dot: f64 = yr.iter().zip(dr).map(|(p, g)| p * g).sum();
                        for ((o, p), g) in gr.iter_mut().zip(yr).zip(dr) {
                            *o += p * (g - dot);
                        }
                    }
                });
            }
            &Op::LogSoftmaxRows(a) => {
                let c = y.cols();
                self.accumulate_with(grads, a, |ga| {
                    for ((gr, yr), dr) in ga
                        .chunks_mut(c)
                        .zip(y.data().chunks(c))
                        .zip(dy.data().chunks(c))
                    {
                        let total: f64 = dr.iter().sum();
                        for ((o, ly), g) in gr.iter_mut().zip(yr).zip(dr) {
                            *o += g - ly.exp() * total;
                        }
                    }
                });
            }
            Op::LayerNormRows { x, inv_std } => {
                let c = y.cols();
                let cf = c as f64;
                self.accumulate_with(grads, *x, |ga| {
                    for (((gr, yr), dr), is) in ga
                        .chunks_mut(c)
                        .zip(y.data().chunks(c))
                        .zip(dy.data().chunks(c))
                        .zip(inv_std)
                    {
                        let mean_g = dr.iter().sum::<f64>() / cf;
                        let mean_gy = dr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / cf;
                        for ((o, yv), g) in gr.iter_mut().zip(yr).zip(dr) {
                            *o += is * (g - mean_g - yv * mean_gy);
                        }
                    }
                });
            }
            Op::L2NormalizeRows { x, norms } => {
                let c = y.cols();
                self.accumulate_with(grads, *x, |ga| {
                    for (((gr, yr), dr), n) in ga
                        .chunks_mut(c)
                        .zip(y.data().chunks(c))
                        .zip(dy.data().chunks(c))
                        .zip(norms)
                    {
                        let dot: f64 = yr.iter().zip(dr).map(|(p, g)| p * g).sum();
                        for ((o, yv), g) in gr.iter_mut().zip(yr).zip(dr) {
                            *o += (g - yv * dot) / n;
                        }
                    }
                });
            }
            &Op::Sum(a) => {
                let g = dy.item();
                self.accumulate(grads, a, Tensor::full(self.shape(a), g));
            }
            &Op::Mean(a) => {
                let g = dy.item() / self.value(a).numel() as f64;
                self.accumulate(grads, a, Tensor::full(self.shape(a), g));
            }
            &Op::MeanRows(a) => {
                let av = self.value(a);
                let r = av.rows() as f64;
                let c = av.cols();
                self.accumulate_with(grads, a, |ga| {
                    for chunk in ga.chunks_mut(c) {
                        for (o, g) in chunk.iter_mut().zip(dy.data()) {
                            *o += g / r;
                        }
                    }
                });
            }
            &Op::Reshape(a) => self.accumulate(grads, a, dy.reshape(self.shape(a))?),
            &Op::Transpose(a) => self.accumulate(grads, a, dy.transpose()?),
            Op::GatherRows(a, indices) => {
                let c = dy.cols();
                self.accumulate_with(grads, *a, |ga| {
                    for (k, &i) in indices.iter().enumerate() {
                        for (o, g) in ga[i * c..(i + 1) * c].iter_mut().zip(dy.row(k)) {
                            *o += g;
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    let slice = &dy.data()[offset..offset + len];
                    self.accumulate_with(grads, p, |gp| {
                        for (o, g) in gp.iter_mut().zip(slice) {
                            *o += g;
                        }
                    });
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = dy.cols();
                let mut start = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    self.accumulate_with(grads, p, |gp| {
                        for (i, chunk) in gp.chunks_mut(c).enumerate() {
                            let src = &dy.data()[i * total + start..i * total + start + c];
                            for (o, g) in chunk.iter_mut().zip(src) {
                                *o += g;
                            }
                        }
                    });
                    start += c;
                }
            }
            &Op::SliceCols(a, start, end) => {
                let c = self.value(a).cols();
                let w = end - start;
                self.accumulate_with(grads, a, |ga| {
                    for (i, chunk) in ga.chunks_mut(c).enumerate() {
                        for (o, g) in chunk[start..end].iter_mut().zip(&dy.data()[i * w..(i + 1) * w]) {
                            *o += g;
                        }
                    }
                });
            }
            Op::BlockAttention(saved) => self.attention_backward(saved, dy, grads)?,
        }
        Ok(())
    }

    fn attention_backward(
        &self,
        s: &AttentionSaved,
        dy: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let (nq, d) = self.value(s.q).expect_matrix("attention")?;
        let nk = self.value(s.k).shape()[0];
        let (bq, bk, dh) = (nq / s.blocks, nk / s.blocks, d / s.heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(s.q).data(),
            self.value(s.k).data(),
            self.value(s.v).data(),
        );
        let mut dq = vec![0.0; nq * d];
        let mut dk = vec![0.0; nk * d];
        let mut dv = vec![0.0; nk * d];
        let mut dscore = vec![0.0; bk];
        for b in 0..s.blocks {
            for h in 0..s.heads {
                let p = &s.probs[(b * s.heads + h) * bq * bk..(b * s.heads + h + 1) * bq * bk];
                for i in 0..bq {
                    let qrow = (b * bq + i) * d + h * dh;
                    let dyi = &dy.data()[qrow..qrow + dh];
                    let prow = &p[i * bk..(i + 1) * bk];
                    // dP_ij = dy_i · v_j ; dV_j += P_ij dy_i
                    for j in 0..bk {
                        let vrow = (b * bk + j) * d + h * dh;
                        let vj = &vd[vrow..vrow + dh];
                        dscore[j] = dyi.iter().zip(vj).map(|(g, x)| g * x).sum();
                        for (o, g) in dv[vrow..vrow + dh].iter_mut().zip(dyi) {
                            *o += prow[j] * g;
                        }
                    }
                    let dot: f64 = prow.iter().zip(&dscore).map(|(p, g)| p * g).sum();
                    for j in 0..bk {
                        let ds = prow[j] * (dscore[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let krow = (b * bk + j) * d + h * dh;
                        for t in 0..dh {
                            dq[qrow + t] += ds * kd[krow + t];
                            dk[krow + t] += ds * qd[qrow + t];
                        }
                    }
                }
            }
        }
        self.accumulate(grads, s.q, Tensor::new(vec![nq, d], dq)?);
        self.accumulate(grads, s.k, Tensor::new(vec![nk, d], dk)?);
        self.accumulate(grads, s.v, Tensor::new(vec![nk, d], dv)?);
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
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
