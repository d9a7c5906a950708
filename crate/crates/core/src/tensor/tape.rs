use super::kernels::{self, gelu_grad_scalar, row_stats};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softmax { x: Var, mask: Option<Vec<bool>> },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize, end: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    Gather { table: Var, ids: Vec<usize> },
    Reshape { x: Var, shape: Vec<usize> },
    Sum(Var),
    LogProbAt { probs: Var, index: usize, eps: f64 },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::Gelu(x)
            | Op::Softmax { x, .. }
            | Op::SliceCols { x, .. }
            | Op::Reshape { x, .. }
            | Op::Sum(x) => vec![*x],
            Op::ConcatCols(xs) => xs.clone(),
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Gather { table, .. } => vec![*table],
            Op::LogProbAt { probs, .. } => vec![*probs],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run computation record. Nodes are appended in execution order,
/// so every node's inputs precede it.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
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

    /// A constant input; no gradient is tracked for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, false)
    }

    /// A trainable input; `grad` is populated for it by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, true)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_node(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = self.eval(&op)?;
        debug_assert!(value.is_finite() || !self.inputs_finite(&op), "non-finite forward");
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_node(value, op, requires_grad))
    }

    fn inputs_finite(&self, op: &Op) -> bool {
        op.inputs().iter().all(|v| self.nodes[v.0].value.is_finite())
    }

    fn eval(&self, op: &Op) -> Result<Tensor> {
        let val = |v: &Var| &self.nodes[v.0].value;
        match op {
            Op::Leaf => Err(Error::Contract("leaf nodes carry their own value".into())),
            Op::MatMul(a, b) => kernels::matmul(val(a), val(b)),
            Op::Transpose(x) => kernels::transpose(val(x)),
            Op::Add(a, b) => kernels::add(val(a), val(b)),
            Op::AddRow(x, b) => kernels::add_row(val(x), val(b)),
            Op::Mul(a, b) => {
                let (a, b) = (val(a), val(b));
                if a.shape() != b.shape() {
                    return Err(Error::shape("mul", a.shape(), b.shape()));
                }
                let values = a.values().iter().zip(b.values()).map(|(x, y)| x * y).collect();
                Tensor::new(a.shape().to_vec(), values)
            }
            Op::Scale(x, s) => Ok(kernels::scale(val(x), *s)),
            Op::Gelu(x) => Ok(kernels::gelu(val(x))),
            Op::Softmax { x, mask } => kernels::masked_softmax_rows(val(x), mask.as_deref()),
            Op::ConcatCols(xs) => {
                let parts: Vec<&Tensor> = xs.iter().map(val).collect();
                kernels::concat_cols(&parts)
            }
            Op::SliceCols { x, start, end } => kernels::slice_cols(val(x), *start, *end),
            Op::LayerNorm { x, gamma, beta, eps } => {
                kernels::layer_norm_rows(val(x), val(gamma), val(beta), *eps)
            }
            Op::Gather { table, ids } => {
                let t = val(table);
                let (rows, cols) = t.expect_matrix("gather")?;
                let mut out = Vec::with_capacity(ids.len() * cols);
                for &id in ids {
                    if id >= rows {
                        return Err(Error::TokenOutOfRange {
                            id,
                            vocab_size: rows,
                        });
                    }
                    out.extend_from_slice(t.row(id));
                }
                Tensor::new(vec![ids.len(), cols], out)
            }
            Op::Reshape { x, shape } => val(x).reshape(shape),
            Op::Sum(x) => Ok(Tensor::scalar(val(x).values().iter().sum())),
            Op::LogProbAt { probs, index, eps } => {
                let p = val(probs);
                let v = p.values().get(*index).copied().ok_or_else(|| {
                    Error::Contract(format!(
                        "gold index {index} outside distribution of {} entries",
                        p.numel()
                    ))
                })?;
                Ok(Tensor::scalar(v.max(*eps).ln()))
            }
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Transpose(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    /// `x + b`, broadcasting the vector `b` across the rows of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        self.push(Op::AddRow(x, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.push(Op::Scale(x, s))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Gelu(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Softmax { x, mask: None })
    }

    pub fn masked_softmax_rows(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        self.push(Op::Softmax { x, mask: Some(mask) })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.push(Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        self.push(Op::SliceCols { x, start, end })
    }

    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.push(Op::LayerNorm { x, gamma, beta, eps })
    }

    /// `xW + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.push(Op::Gather {
            table,
            ids: ids.to_vec(),
        })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.push(Op::Reshape {
            x,
            shape: shape.to_vec(),
        })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sum(x))
    }

    /// `ln(max(p[index], eps))` for a probability tensor `p`.
    pub fn log_prob_at(&mut self, probs: Var, index: usize, eps: f64) -> Result<Var> {
        self.push(Op::LogProbAt { probs, index, eps })
    }

    /// Recomputes every non-leaf value from the current leaves, in tape order.
    pub fn replay(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            self.nodes[i].value = self.eval(&op)?;
        }
        Ok(())
    }

    /// Replaces a leaf's value. Callers must [`Tape::replay`] afterwards.
    pub fn set_leaf(&mut self, v: Var, value: Tensor) -> Result<()> {
        let node = &mut self.nodes[v.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::Contract("set_leaf on a non-leaf node".into()));
        }
        if node.value.shape() != value.shape() {
            return Err(Error::shape("set_leaf", node.value.shape(), value.shape()));
        }
        node.value = value;
        Ok(())
    }

    /// Reverse pass from a single-element `loss`. Previous gradients are
    /// discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(loss_node.value.shape()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !node.requires_grad {
                *g = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, d) in g.values_mut().iter_mut().zip(delta.values()) {
                    *a += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |v: &Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    let bt = kernels::transpose(val(b))?;
                    self.accumulate(grads, *a, kernels::matmul(g, &bt)?);
                }
                if self.requires_grad(*b) {
                    let at = kernels::transpose(val(a))?;
                    self.accumulate(grads, *b, kernels::matmul(&at, g)?);
                }
            }
            Op::Transpose(x) => self.accumulate(grads, *x, kernels::transpose(g)?),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.requires_grad(*b) {
                    let n = g.cols();
                    let mut db = vec![0.0; n];
                    for r in 0..g.rows() {
                        for (d, v) in db.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(val(b).shape().to_vec(), db)?);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let da = g.values().iter().zip(bv.values()).map(|(g, y)| g * y).collect();
                let db = g.values().iter().zip(av.values()).map(|(g, x)| g * x).collect();
                self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da)?);
                self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db)?);
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, kernels::scale(g, *s)),
            Op::Gelu(x) => {
                let xv = val(x);
                let dx = g
                    .values()
                    .iter()
                    .zip(xv.values())
                    .map(|(g, &x)| g * gelu_grad_scalar(x))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::Softmax { x, .. } => {
                let y = &node.value;
                let n = y.cols();
                let mut dx = vec![0.0; y.numel()];
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dx[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::ConcatCols(xs) => {
                let mut offset = 0;
                for x in xs {
                    let w = val(x).cols();
                    if self.requires_grad(*x) {
                        self.accumulate(grads, *x, kernels::slice_cols(g, offset, offset + w)?);
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start, end } => {
                let xv = val(x);
                let n = xv.cols();
                let mut dx = vec![0.0; xv.numel()];
                for r in 0..xv.rows() {
                    dx[r * n + start..r * n + end].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (xv, gv) = (val(x), val(gamma));
                let n = xv.cols();
                let nf = n as f64;
                let mut dx = vec![0.0; xv.numel()];
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                let mut xhat = vec![0.0; n];
                let mut dxhat = vec![0.0; n];
                for r in 0..xv.rows() {
                    let row = xv.row(r);
                    let gr = g.row(r);
                    let (mean, inv_std) = row_stats(row, *eps);
                    for j in 0..n {
                        xhat[j] = (row[j] - mean) * inv_std;
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                        dxhat[j] = gr[j] * gv.values()[j];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / nf;
                    let mean_dx = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / nf;
                    for j in 0..n {
                        dx[r * n + j] = inv_std * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                self.accumulate(grads, *gamma, Tensor::new(gv.shape().to_vec(), dgamma)?);
                self.accumulate(grads, *beta, Tensor::new(val(beta).shape().to_vec(), dbeta)?);
            }
            Op::Gather { table, ids } => {
                let t = val(table);
                let cols = t.cols();
                let mut dt = vec![0.0; t.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for (d, v) in dt[id * cols..(id + 1) * cols].iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                self.accumulate(grads, *table, Tensor::new(t.shape().to_vec(), dt)?);
            }
            Op::Reshape { x, .. } => {
                self.accumulate(grads, *x, g.reshape(val(x).shape())?);
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, Tensor::filled(val(x).shape(), g.values()[0]));
            }
            Op::LogProbAt { probs, index, eps } => {
                let p = val(probs);
                let mut dp = vec![0.0; p.numel()];
                let pi = p.values()[*index];
                if pi > *eps {
                    dp[*index] = g.values()[0] / pi;
                }
                self.accumulate(grads, *probs, Tensor::new(p.shape().to_vec(), dp)?);
            }
        }
        Ok(())
    }
}
