//! Reverse-mode automatic differentiation over a fixed op set.
//!
//! A [`Tape`] records a define-by-run graph of matrix-valued nodes. Ops
//! validate shapes at build time and store their result eagerly, so node
//! values can be inspected mid-graph (batch-hard mining reads distances
//! before the loss is assembled). `backward` walks the node list in
//! reverse with hand-derived adjoints per op.
//!
//! Values are plain [`Matrix`]es; scalars are 1×1, row vectors 1×n.

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    /// Leaf that never receives a gradient.
    Constant,
    /// Leaf whose gradient is reported by `backward`.
    Param,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Broadcast-add a 1×c row vector to every row.
    AddRowVec(NodeId, NodeId),
    /// Broadcast-add an n×1 column vector to every column.
    AddColVec(NodeId, NodeId),
    ScaleConst(NodeId, T),
    AddConst(NodeId, T),
    /// Broadcast-multiply by a 1×1 node.
    MulScalarNode(NodeId, NodeId),
    Relu(NodeId),
    Gelu(NodeId),
    Exp(NodeId),
    Sqrt(NodeId),
    /// Row-wise layer normalization with learnable 1×c gamma/beta.
    LayerNorm(NodeId, NodeId, NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    L2NormalizeRows(NodeId),
    /// n×c → n×1 sum over each row.
    RowSums(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    StackRows(Vec<NodeId>),
    StackCols(Vec<NodeId>),
    SliceRows(NodeId, usize),
    SliceCols(NodeId, usize),
    /// Embedding lookup: output row i = input row indices[i].
    GatherRows(NodeId, Vec<usize>),
}

struct Node<T: Scalar> {
    op: Op<T>,
    value: Matrix<T>,
    needs_grad: bool,
}

/// Gradients per node, produced by [`Tape::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. the given node; zeros if the node did not
    /// influence the loss.
    pub fn get(&self, id: NodeId, tape: &Tape<T>) -> Matrix<T> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = tape.nodes[id.0].value.shape();
                Matrix::zeros(r, c)
            }
        }
    }
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

const LAYER_NORM_EPS: f64 = 1e-5;
const L2_NORM_EPS: f64 = 1e-12;

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix<T> {
        &self.nodes[id.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar_value(&self, id: NodeId) -> Result<T> {
        let v = self.value(id);
        if v.shape() != (1, 1) {
            return Err(Error::Dim(format!(
                "expected 1x1 scalar node, got {}x{}",
                v.rows(),
                v.cols()
            )));
        }
        Ok(v[(0, 0)])
    }

    fn push(&mut self, op: Op<T>, value: Matrix<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn constant(&mut self, value: Matrix<T>) -> NodeId {
        self.push(Op::Constant, value, false)
    }

    pub fn param(&mut self, value: Matrix<T>) -> NodeId {
        self.push(Op::Param, value, true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), value, needs))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).transpose();
        let needs = self.needs(a);
        self.push(Op::Transpose(a), value, needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), value, needs))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).sub(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), value, needs))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).hadamard(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), value, needs))
    }

    pub fn add_row_vec(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (x, b) = (self.value(a), self.value(bias));
        if b.rows() != 1 || b.cols() != x.cols() {
            return Err(Error::Dim(format!(
                "bias add: {}x{} with row vector {}x{}",
                x.rows(),
                x.cols(),
                b.rows(),
                b.cols()
            )));
        }
        let mut value = x.clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            for (v, &bv) in row.iter_mut().zip(b.row(0)) {
                *v += bv;
            }
        }
        let needs = self.needs(a) || self.needs(bias);
        Ok(self.push(Op::AddRowVec(a, bias), value, needs))
    }

    pub fn add_col_vec(&mut self, a: NodeId, col: NodeId) -> Result<NodeId> {
        let (x, v) = (self.value(a), self.value(col));
        if v.cols() != 1 || v.rows() != x.rows() {
            return Err(Error::Dim(format!(
                "column add: {}x{} with column vector {}x{}",
                x.rows(),
                x.cols(),
                v.rows(),
                v.cols()
            )));
        }
        let mut value = x.clone();
        for r in 0..value.rows() {
            let add = v[(r, 0)];
            for e in value.row_mut(r) {
                *e += add;
            }
        }
        let needs = self.needs(a) || self.needs(col);
        Ok(self.push(Op::AddColVec(a, col), value, needs))
    }

    pub fn scale_const(&mut self, a: NodeId, c: T) -> NodeId {
        let value = self.value(a).scale(c);
        let needs = self.needs(a);
        self.push(Op::ScaleConst(a, c), value, needs)
    }

    pub fn add_const(&mut self, a: NodeId, c: T) -> NodeId {
        let value = self.value(a).map(|x| x + c);
        let needs = self.needs(a);
        self.push(Op::AddConst(a, c), value, needs)
    }

    pub fn mul_scalar_node(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).shape() != (1, 1) {
            return Err(Error::Dim("scalar node must be 1x1".into()));
        }
        let sv = self.value(s)[(0, 0)];
        let value = self.value(a).scale(sv);
        let needs = self.needs(a) || self.needs(s);
        Ok(self.push(Op::MulScalarNode(a, s), value, needs))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| x.max(T::zero()));
        let needs = self.needs(a);
        self.push(Op::Relu(a), value, needs)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(gelu);
        let needs = self.needs(a);
        self.push(Op::Gelu(a), value, needs)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| x.exp());
        let needs = self.needs(a);
        self.push(Op::Exp(a), value, needs)
    }

    /// Elementwise square root. Inputs must be strictly positive; callers
    /// guard with `add_const(eps)`.
    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| x.sqrt());
        let needs = self.needs(a);
        self.push(Op::Sqrt(a), value, needs)
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (xv, g, b) = (self.value(x), self.value(gamma), self.value(beta));
        let c = xv.cols();
        if g.shape() != (1, c) || b.shape() != (1, c) {
            return Err(Error::Dim(format!(
                "layer_norm over {c} columns needs 1x{c} gamma/beta"
            )));
        }
        let mut value = Matrix::zeros(xv.rows(), c);
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let (hat, _) = normalize_row(row);
            let out = value.row_mut(r);
            for j in 0..c {
                out[j] = g[(0, j)] * hat[j] + b[(0, j)];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(Op::LayerNorm(x, gamma, beta), value, needs))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut value = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            softmax_row(x.row(r), value.row_mut(r));
        }
        let needs = self.needs(a);
        self.push(Op::SoftmaxRows(a), value, needs)
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut value = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            log_softmax_row(x.row(r), value.row_mut(r));
        }
        let needs = self.needs(a);
        self.push(Op::LogSoftmaxRows(a), value, needs)
    }

    pub fn l2_normalize_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut value = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let row = x.row(r);
            let n = row_norm(row);
            let out = value.row_mut(r);
            for j in 0..row.len() {
                out[j] = row[j] / n;
            }
        }
        let needs = self.needs(a);
        self.push(Op::L2NormalizeRows(a), value, needs)
    }

    pub fn row_sums(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut value = Matrix::zeros(x.rows(), 1);
        for r in 0..x.rows() {
            value[(r, 0)] = x.row(r).iter().copied().sum();
        }
        let needs = self.needs(a);
        self.push(Op::RowSums(a), value, needs)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: T = self.value(a).data().iter().copied().sum();
        let needs = self.needs(a);
        self.push(Op::SumAll(a), Matrix::filled(1, 1, s), needs)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let n = T::from_f64((x.rows() * x.cols()) as f64);
        let s: T = x.data().iter().copied().sum();
        let needs = self.needs(a);
        self.push(Op::MeanAll(a), Matrix::filled(1, 1, s / n), needs)
    }

    pub fn stack_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Empty("stack_rows".into()));
        }
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::Dim("stack_rows column mismatch".into()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let value = Matrix::from_vec(rows, cols, data)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Op::StackRows(parts.to_vec()), value, needs))
    }

    pub fn stack_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Empty("stack_cols".into()));
        }
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(Error::Dim("stack_cols row mismatch".into()));
            }
            cols += self.value(p).cols();
        }
        let mut value = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            for r in 0..rows {
                value.row_mut(r)[offset..offset + v.cols()].copy_from_slice(v.row(r));
            }
            offset += v.cols();
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Op::StackCols(parts.to_vec()), value, needs))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let x = self.value(a);
        if start + len > x.rows() {
            return Err(Error::Index(format!(
                "slice_rows {start}..{} of {} rows",
                start + len,
                x.rows()
            )));
        }
        let value = Matrix::from_vec(
            len,
            x.cols(),
            x.data()[start * x.cols()..(start + len) * x.cols()].to_vec(),
        )?;
        let needs = self.needs(a);
        Ok(self.push(Op::SliceRows(a, start), value, needs))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let x = self.value(a);
        if start + len > x.cols() {
            return Err(Error::Index(format!(
                "slice_cols {start}..{} of {} cols",
                start + len,
                x.cols()
            )));
        }
        let mut value = Matrix::zeros(x.rows(), len);
        for r in 0..x.rows() {
            value.row_mut(r).copy_from_slice(&x.row(r)[start..start + len]);
        }
        let needs = self.needs(a);
        Ok(self.push(Op::SliceCols(a, start), value, needs))
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let x = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.rows()) {
            return Err(Error::Index(format!(
                "gather_rows index {bad} of {} rows",
                x.rows()
            )));
        }
        let mut value = Matrix::zeros(indices.len(), x.cols());
        for (r, &i) in indices.iter().enumerate() {
            value.row_mut(r).copy_from_slice(x.row(i));
        }
        let needs = self.needs(a);
        Ok(self.push(Op::GatherRows(a, indices.to_vec()), value, needs))
    }

    /// Reverse pass from a 1×1 loss node. Returns per-node gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Dim(format!(
                "backward needs a 1x1 loss node, got {}x{}",
                self.value(loss).rows(),
                self.value(loss).cols()
            )));
        }
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::filled(1, 1, T::one()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn add_grad(&self, grads: &mut [Option<Matrix<T>>], id: NodeId, delta: Matrix<T>) {
        if !self.needs(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => g.add_assign(&delta).expect("gradient shape"),
            slot => *slot = Some(delta),
        }
    }

    fn accumulate(
        &self,
        i: usize,
        g: &Matrix<T>,
        grads: &mut Vec<Option<Matrix<T>>>,
    ) -> Result<()> {
        match &self.nodes[i].op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    self.add_grad(grads, *a, g.matmul_nt(bv)?);
                }
                if self.needs(*b) {
                    self.add_grad(grads, *b, av.matmul_tn(g)?);
                }
            }
            Op::Transpose(a) => self.add_grad(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, g.scale(-T::one()));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.add_grad(grads, *a, g.hadamard(self.value(*b))?);
                }
                if self.needs(*b) {
                    self.add_grad(grads, *b, g.hadamard(self.value(*a))?);
                }
            }
            Op::AddRowVec(a, bias) => {
                self.add_grad(grads, *a, g.clone());
                if self.needs(*bias) {
                    let mut db = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (acc, &gv) in db.row_mut(0).iter_mut().zip(g.row(r)) {
                            *acc += gv;
                        }
                    }
                    self.add_grad(grads, *bias, db);
                }
            }
            Op::AddColVec(a, col) => {
                self.add_grad(grads, *a, g.clone());
                if self.needs(*col) {
                    let mut dv = Matrix::zeros(g.rows(), 1);
                    for r in 0..g.rows() {
                        dv[(r, 0)] = g.row(r).iter().copied().sum();
                    }
                    self.add_grad(grads, *col, dv);
                }
            }
            Op::ScaleConst(a, c) => self.add_grad(grads, *a, g.scale(*c)),
            Op::AddConst(a, _) => self.add_grad(grads, *a, g.clone()),
            Op::MulScalarNode(a, s) => {
                let sv = self.value(*s)[(0, 0)];
                if self.needs(*a) {
                    self.add_grad(grads, *a, g.scale(sv));
                }
                if self.needs(*s) {
                    let dot: T = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(&gv, &av)| gv * av)
                        .sum();
                    self.add_grad(grads, *s, Matrix::filled(1, 1, dot));
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let mut dx = g.clone();
                for (d, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
                    if xv <= T::zero() {
                        *d = T::zero();
                    }
                }
                self.add_grad(grads, *a, dx);
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let mut dx = g.clone();
                for (d, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
                    *d *= gelu_derivative(xv);
                }
                self.add_grad(grads, *a, dx);
            }
            Op::Exp(a) => {
                self.add_grad(grads, *a, g.hadamard(&self.nodes[i].value)?);
            }
            Op::Sqrt(a) => {
                let y = &self.nodes[i].value;
                let half = T::from_f64(0.5);
                let mut dx = g.clone();
                for (d, &yv) in dx.data_mut().iter_mut().zip(y.data()) {
                    *d *= half / yv;
                }
                self.add_grad(grads, *a, dx);
            }
            Op::LayerNorm(x, gamma, beta) => {
                let (xv, gv) = (self.value(*x), self.value(*gamma));
                let c = xv.cols();
                let cn = T::from_f64(c as f64);
                let mut dx = Matrix::zeros(xv.rows(), c);
                let mut dgamma = Matrix::zeros(1, c);
                let mut dbeta = Matrix::zeros(1, c);
                for r in 0..xv.rows() {
                    let row = xv.row(r);
                    let (hat, inv_std) = normalize_row(row);
                    let grow = g.row(r);
                    // dL/dx̂ = dY ⊙ γ, then the standard layer-norm pullback.
                    let mut sum_dhat = T::zero();
                    let mut sum_dhat_hat = T::zero();
                    for j in 0..c {
                        let dhat = grow[j] * gv[(0, j)];
                        sum_dhat += dhat;
                        sum_dhat_hat += dhat * hat[j];
                        dgamma[(0, j)] += grow[j] * hat[j];
                        dbeta[(0, j)] += grow[j];
                    }
                    let mean_dhat = sum_dhat / cn;
                    let mean_dhat_hat = sum_dhat_hat / cn;
                    let out = dx.row_mut(r);
                    for j in 0..c {
                        let dhat = grow[j] * gv[(0, j)];
                        out[j] = inv_std * (dhat - mean_dhat - hat[j] * mean_dhat_hat);
                    }
                }
                self.add_grad(grads, *x, dx);
                self.add_grad(grads, *gamma, dgamma);
                self.add_grad(grads, *beta, dbeta);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[i].value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: T = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                    let out = dx.row_mut(r);
                    for j in 0..yr.len() {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.add_grad(grads, *a, dx);
            }
            Op::LogSoftmaxRows(a) => {
                let y = &self.nodes[i].value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let gsum: T = gr.iter().copied().sum();
                    let out = dx.row_mut(r);
                    for j in 0..yr.len() {
                        out[j] = gr[j] - yr[j].exp() * gsum;
                    }
                }
                self.add_grad(grads, *a, dx);
            }
            Op::L2NormalizeRows(a) => {
                let x = self.value(*a);
                let y = &self.nodes[i].value;
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let n = row_norm(x.row(r));
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: T = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                    let out = dx.row_mut(r);
                    for j in 0..yr.len() {
                        out[j] = (gr[j] - yr[j] * dot) / n;
                    }
                }
                self.add_grad(grads, *a, dx);
            }
            Op::RowSums(a) => {
                let x = self.value(*a);
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let gv = g[(r, 0)];
                    for d in dx.row_mut(r) {
                        *d = gv;
                    }
                }
                self.add_grad(grads, *a, dx);
            }
            Op::SumAll(a) => {
                let (r, c) = self.value(*a).shape();
                self.add_grad(grads, *a, Matrix::filled(r, c, g[(0, 0)]));
            }
            Op::MeanAll(a) => {
                let (r, c) = self.value(*a).shape();
                let scale = g[(0, 0)] / T::from_f64((r * c) as f64);
                self.add_grad(grads, *a, Matrix::filled(r, c, scale));
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.needs(p) {
                        let mut dp = Matrix::zeros(rows, g.cols());
                        for r in 0..rows {
                            dp.row_mut(r).copy_from_slice(g.row(offset + r));
                        }
                        self.add_grad(grads, p, dp);
                    }
                    offset += rows;
                }
            }
            Op::StackCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    if self.needs(p) {
                        let mut dp = Matrix::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        self.add_grad(grads, p, dp);
                    }
                    offset += cols;
                }
            }
            Op::SliceRows(a, start) => {
                let x = self.value(*a);
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                for r in 0..g.rows() {
                    dx.row_mut(start + r).copy_from_slice(g.row(r));
                }
                self.add_grad(grads, *a, dx);
            }
            Op::SliceCols(a, start) => {
                let x = self.value(*a);
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                for r in 0..g.rows() {
                    dx.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                }
                self.add_grad(grads, *a, dx);
            }
            Op::GatherRows(a, indices) => {
                let x = self.value(*a);
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                for (r, &idx) in indices.iter().enumerate() {
                    for (d, &gv) in dx.row_mut(idx).iter_mut().zip(g.row(r)) {
                        *d += gv;
                    }
                }
                self.add_grad(grads, *a, dx);
            }
        }
        Ok(())
    }
}

fn gelu<T: Scalar>(x: T) -> T {
    // tanh approximation of GELU
    let c = T::from_f64(0.7978845608028654); // sqrt(2/pi)
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let inner = c * (x + k * x * x * x);
    half * x * (T::one() + inner.tanh())
}

fn gelu_derivative<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654);
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let d_inner = c * (T::one() + three * k * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * d_inner
}

/// Row mean/variance normalization used by layer norm; returns (x̂, 1/std).
fn normalize_row<T: Scalar>(row: &[T]) -> (Vec<T>, T) {
    let n = T::from_f64(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row
        .iter()
        .map(|&x| (x - mean) * (x - mean))
        .sum::<T>()
        / n;
    let inv_std = T::one() / (var + T::from_f64(LAYER_NORM_EPS)).sqrt();
    let hat = row.iter().map(|&x| (x - mean) * inv_std).collect();
    (hat, inv_std)
}

fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut sum = T::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn log_softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let sum: T = row.iter().map(|&x| (x - max).exp()).sum();
    let log_z = max + sum.ln();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - log_z;
    }
}

fn row_norm<T: Scalar>(row: &[T]) -> T {
    (row.iter().map(|&x| x * x).sum::<T>() + T::from_f64(L2_NORM_EPS)).sqrt()
}
