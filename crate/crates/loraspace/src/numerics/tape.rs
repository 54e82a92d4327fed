//! Reverse-mode automatic differentiation over whole arrays.
//!
//! A [`Graph`] records every operation of a forward pass; [`Graph::backward`]
//! replays the tape in reverse and accumulates vector-Jacobian products.
//! Nodes whose inputs are all constants skip gradient work entirely, which is
//! what makes frozen-model training stages cheap.
//!
//! The graph is generic over the element type: training runs in `f32`, the
//! finite-difference checks in [`super::grad_check`] run the identical graph
//! in `f64`.

use crate::error::{Error, Result};

use super::array::{Array, Scalar};
use super::ops;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Node(usize);

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, T),
    AddRow(usize, usize),
    MulRow(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    SoftmaxRows(usize),
    NormRows { x: usize, inv_std: Vec<T> },
    Gelu(usize),
    MeanAll(usize),
    SumAll(usize),
    Reshape(usize),
    SliceRows { x: usize, r0: usize },
    SliceCols { x: usize, c0: usize },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    GatherRows { table: usize, idx: Vec<usize> },
}

pub struct Graph<T: Scalar> {
    values: Vec<Array<T>>,
    records: Vec<Op<T>>,
    needs: Vec<bool>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            records: Vec::new(),
            needs: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Array<T>, op: Op<T>, needs: bool) -> Node {
        self.values.push(value);
        self.records.push(op);
        self.needs.push(needs);
        Node(self.values.len() - 1)
    }

    /// A leaf that participates in gradient computation.
    pub fn param(&mut self, value: Array<T>) -> Node {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant; no gradient flows into it.
    pub fn constant(&mut self, value: Array<T>) -> Node {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Array<T>, needs_grad: bool) -> Node {
        self.push(value, Op::Leaf, needs_grad)
    }

    pub fn value(&self, n: Node) -> &Array<T> {
        &self.values[n.0]
    }

    /// Value of a single-element node.
    pub fn scalar_value(&self, n: Node) -> T {
        debug_assert_eq!(self.values[n.0].len(), 1);
        self.values[n.0].data()[0]
    }

    pub fn needs_grad(&self, n: Node) -> bool {
        self.needs[n.0]
    }

    fn needs2(&self, a: Node, b: Node) -> bool {
        self.needs[a.0] || self.needs[b.0]
    }

    pub fn add(&mut self, a: Node, b: Node) -> Result<Node> {
        let v = self.values[a.0].add(&self.values[b.0])?;
        let needs = self.needs2(a, b);
        Ok(self.push(v, Op::Add(a.0, b.0), needs))
    }

    pub fn sub(&mut self, a: Node, b: Node) -> Result<Node> {
        let v = self.values[a.0].sub(&self.values[b.0])?;
        let needs = self.needs2(a, b);
        Ok(self.push(v, Op::Sub(a.0, b.0), needs))
    }

    pub fn mul(&mut self, a: Node, b: Node) -> Result<Node> {
        let v = self.values[a.0].mul_elem(&self.values[b.0])?;
        let needs = self.needs2(a, b);
        Ok(self.push(v, Op::Mul(a.0, b.0), needs))
    }

    pub fn neg(&mut self, a: Node) -> Node {
        let v = self.values[a.0].map(|x| -x);
        let needs = self.needs[a.0];
        self.push(v, Op::Neg(a.0), needs)
    }

    pub fn scale(&mut self, a: Node, c: T) -> Node {
        let v = self.values[a.0].scale(c);
        let needs = self.needs[a.0];
        self.push(v, Op::Scale(a.0, c), needs)
    }

    /// Broadcast-add a row vector `b: [d]` to every row of `a: [n, d]`.
    pub fn add_row(&mut self, a: Node, b: Node) -> Result<Node> {
        let (av, bv) = (&self.values[a.0], &self.values[b.0]);
        if bv.len() != av.cols() {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let c = av.cols();
        let mut out = av.clone();
        for i in 0..out.rows() {
            for j in 0..c {
                let v = out.at2(i, j) + bv.data()[j];
                out.set2(i, j, v);
            }
        }
        let needs = self.needs2(a, b);
        Ok(self.push(out, Op::AddRow(a.0, b.0), needs))
    }

    /// Broadcast-multiply every row of `a: [n, d]` by a row vector `b: [d]`.
    pub fn mul_row(&mut self, a: Node, b: Node) -> Result<Node> {
        let (av, bv) = (&self.values[a.0], &self.values[b.0]);
        if bv.len() != av.cols() {
            return Err(Error::ShapeMismatch {
                op: "mul_row",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let c = av.cols();
        let mut out = av.clone();
        for i in 0..out.rows() {
            for j in 0..c {
                let v = out.at2(i, j) * bv.data()[j];
                out.set2(i, j, v);
            }
        }
        let needs = self.needs2(a, b);
        Ok(self.push(out, Op::MulRow(a.0, b.0), needs))
    }

    pub fn matmul(&mut self, a: Node, b: Node) -> Result<Node> {
        let v = self.values[a.0].matmul(&self.values[b.0])?;
        let needs = self.needs2(a, b);
        Ok(self.push(v, Op::MatMul(a.0, b.0), needs))
    }

    pub fn transpose(&mut self, a: Node) -> Result<Node> {
        let v = self.values[a.0].transpose()?;
        let needs = self.needs[a.0];
        Ok(self.push(v, Op::Transpose(a.0), needs))
    }

    pub fn softmax_rows(&mut self, a: Node) -> Node {
        let v = ops::softmax_rows(&self.values[a.0]);
        let needs = self.needs[a.0];
        self.push(v, Op::SoftmaxRows(a.0), needs)
    }

    /// Per-row standardization (the layer-norm core).
    pub fn norm_rows(&mut self, a: Node, eps: T) -> Node {
        let (v, inv_std) = ops::normalize_rows(&self.values[a.0], eps);
        let needs = self.needs[a.0];
        self.push(v, Op::NormRows { x: a.0, inv_std }, needs)
    }

    pub fn gelu(&mut self, a: Node) -> Node {
        let v = ops::gelu(&self.values[a.0]);
        let needs = self.needs[a.0];
        self.push(v, Op::Gelu(a.0), needs)
    }

    pub fn mean_all(&mut self, a: Node) -> Node {
        let v = Array::scalar(self.values[a.0].mean());
        let needs = self.needs[a.0];
        self.push(v, Op::MeanAll(a.0), needs)
    }

    pub fn sum_all(&mut self, a: Node) -> Node {
        let v = Array::scalar(self.values[a.0].sum());
        let needs = self.needs[a.0];
        self.push(v, Op::SumAll(a.0), needs)
    }

    pub fn reshape(&mut self, a: Node, shape: Vec<usize>) -> Result<Node> {
        let v = self.values[a.0].clone().reshape(shape)?;
        let needs = self.needs[a.0];
        Ok(self.push(v, Op::Reshape(a.0), needs))
    }

    pub fn slice_rows(&mut self, a: Node, r0: usize, r1: usize) -> Result<Node> {
        let v = self.values[a.0].slice_rows(r0, r1)?;
        let needs = self.needs[a.0];
        Ok(self.push(v, Op::SliceRows { x: a.0, r0 }, needs))
    }

    pub fn slice_cols(&mut self, a: Node, c0: usize, c1: usize) -> Result<Node> {
        let v = self.values[a.0].slice_cols(c0, c1)?;
        let needs = self.needs[a.0];
        Ok(self.push(v, Op::SliceCols { x: a.0, c0 }, needs))
    }

    pub fn concat_rows(&mut self, parts: &[Node]) -> Result<Node> {
        let vals: Vec<&Array<T>> = parts.iter().map(|n| &self.values[n.0]).collect();
        let v = Array::concat_rows(&vals)?;
        let needs = parts.iter().any(|n| self.needs[n.0]);
        Ok(self.push(v, Op::ConcatRows(parts.iter().map(|n| n.0).collect()), needs))
    }

    pub fn concat_cols(&mut self, parts: &[Node]) -> Result<Node> {
        let vals: Vec<&Array<T>> = parts.iter().map(|n| &self.values[n.0]).collect();
        let v = Array::concat_cols(&vals)?;
        let needs = parts.iter().any(|n| self.needs[n.0]);
        Ok(self.push(v, Op::ConcatCols(parts.iter().map(|n| n.0).collect()), needs))
    }

    /// Row lookup into a table (token embedding). Gradient scatter-adds.
    pub fn gather_rows(&mut self, table: Node, idx: &[usize]) -> Result<Node> {
        let t = &self.values[table.0];
        let c = t.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= t.rows() {
                return Err(Error::InvalidDimensions {
                    op: "gather_rows",
                    message: format!("row {} out of {}", i, t.rows()),
                });
            }
            data.extend_from_slice(t.row(i));
        }
        let v = Array::from_vec(vec![idx.len(), c], data)?;
        let needs = self.needs[table.0];
        Ok(self.push(
            v,
            Op::GatherRows {
                table: table.0,
                idx: idx.to_vec(),
            },
            needs,
        ))
    }

    // Composite helpers.

    /// `x @ w + b`.
    pub fn linear(&mut self, x: Node, w: Node, b: Node) -> Result<Node> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Layer norm over the last dimension with affine gain and bias.
    pub fn layer_norm(&mut self, x: Node, gain: Node, bias: Node, eps: T) -> Result<Node> {
        let n = self.norm_rows(x, eps);
        let scaled = self.mul_row(n, gain)?;
        self.add_row(scaled, bias)
    }

    /// Scaled dot-product attention over recorded nodes.
    pub fn attention(&mut self, q: Node, k: Node, v: Node) -> Result<Node> {
        let d = self.values[q.0].cols();
        if d == 0 || self.values[k.0].cols() != d || self.values[v.0].rows() != self.values[k.0].rows()
        {
            return Err(Error::ShapeMismatch {
                op: "attention",
                left: self.values[q.0].shape().to_vec(),
                right: self.values[k.0].shape().to_vec(),
            });
        }
        let kt = self.transpose(k)?;
        let scores = self.matmul(q, kt)?;
        let scaled = self.scale(scores, T::of_f64(1.0 / (d as f64).sqrt()));
        let weights = self.softmax_rows(scaled);
        self.matmul(weights, v)
    }

    /// Mean squared error between two same-shape nodes.
    pub fn mse(&mut self, pred: Node, target: Node) -> Result<Node> {
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean_all(sq))
    }

    /// Backpropagate from a scalar root node.
    pub fn backward(&self, root: Node) -> Grads<T> {
        assert_eq!(
            self.values[root.0].len(),
            1,
            "backward root must be a scalar node"
        );
        let mut grads: Vec<Option<Array<T>>> = vec![None; self.values.len()];
        grads[root.0] = Some(Array::scalar(T::one()));

        for i in (0..self.values.len()).rev() {
            if !self.needs[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn accum(&self, grads: &mut [Option<Array<T>>], target: usize, delta: &Array<T>) {
        if !self.needs[target] {
            return;
        }
        match &mut grads[target] {
            Some(existing) => existing
                .axpy(T::one(), delta)
                .expect("gradient shapes agree"),
            slot @ None => *slot = Some(delta.clone()),
        }
    }

    fn propagate(&self, i: usize, g: &Array<T>, grads: &mut [Option<Array<T>>]) {
        match &self.records[i] {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g);
                self.accum(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g);
                let neg = g.scale(-T::one());
                self.accum(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                if self.needs[*a] {
                    let da = g.mul_elem(&self.values[*b]).expect("shapes agree");
                    self.accum(grads, *a, &da);
                }
                if self.needs[*b] {
                    let db = g.mul_elem(&self.values[*a]).expect("shapes agree");
                    self.accum(grads, *b, &db);
                }
            }
            Op::Neg(a) => {
                let da = g.scale(-T::one());
                self.accum(grads, *a, &da);
            }
            Op::Scale(a, c) => {
                let da = g.scale(*c);
                self.accum(grads, *a, &da);
            }
            Op::AddRow(a, b) => {
                self.accum(grads, *a, g);
                if self.needs[*b] {
                    let c = g.cols();
                    let mut db = Array::zeros(vec![c]);
                    for r in 0..g.rows() {
                        for j in 0..c {
                            db.data_mut()[j] = db.data_mut()[j] + g.at2(r, j);
                        }
                    }
                    self.accum(grads, *b, &db);
                }
            }
            Op::MulRow(a, b) => {
                if self.needs[*a] {
                    let bv = &self.values[*b];
                    let c = g.cols();
                    let mut da = g.clone();
                    for r in 0..da.rows() {
                        for j in 0..c {
                            let v = da.at2(r, j) * bv.data()[j];
                            da.set2(r, j, v);
                        }
                    }
                    self.accum(grads, *a, &da);
                }
                if self.needs[*b] {
                    let av = &self.values[*a];
                    let c = g.cols();
                    let mut db = Array::zeros(vec![c]);
                    for r in 0..g.rows() {
                        for j in 0..c {
                            db.data_mut()[j] = db.data_mut()[j] + g.at2(r, j) * av.at2(r, j);
                        }
                    }
                    self.accum(grads, *b, &db);
                }
            }
            Op::MatMul(a, b) => {
                if self.needs[*a] {
                    // dA = dY @ B^T
                    let bt = self.values[*b].transpose().expect("2-D by construction");
                    let da = g.matmul(&bt).expect("shapes agree");
                    self.accum(grads, *a, &da);
                }
                if self.needs[*b] {
                    // dB = A^T @ dY
                    let at = self.values[*a].transpose().expect("2-D by construction");
                    let db = at.matmul(g).expect("shapes agree");
                    self.accum(grads, *b, &db);
                }
            }
            Op::Transpose(a) => {
                let da = g.transpose().expect("2-D by construction");
                self.accum(grads, *a, &da);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.values[i];
                let (r, c) = (y.rows(), y.cols());
                let mut da = Array::zeros(vec![r, c]);
                for row in 0..r {
                    let mut dot = T::zero();
                    for j in 0..c {
                        dot = dot + g.at2(row, j) * y.at2(row, j);
                    }
                    for j in 0..c {
                        da.set2(row, j, y.at2(row, j) * (g.at2(row, j) - dot));
                    }
                }
                self.accum(grads, *a, &da);
            }
            Op::NormRows { x, inv_std } => {
                let y = &self.values[i];
                let (r, c) = (y.rows(), y.cols());
                let n = T::of_f64(c as f64);
                let mut da = Array::zeros(vec![r, c]);
                for row in 0..r {
                    let mut gsum = T::zero();
                    let mut gydot = T::zero();
                    for j in 0..c {
                        gsum = gsum + g.at2(row, j);
                        gydot = gydot + g.at2(row, j) * y.at2(row, j);
                    }
                    let gmean = gsum / n;
                    let gymean = gydot / n;
                    for j in 0..c {
                        let v = inv_std[row] * (g.at2(row, j) - gmean - y.at2(row, j) * gymean);
                        da.set2(row, j, v);
                    }
                }
                self.accum(grads, *x, &da);
            }
            Op::Gelu(a) => {
                let x = &self.values[*a];
                let da = Array::from_vec(
                    x.shape().to_vec(),
                    x.data()
                        .iter()
                        .zip(g.data())
                        .map(|(&xv, &gv)| gv * ops::gelu_grad_scalar(xv))
                        .collect(),
                )
                .expect("same shape");
                self.accum(grads, *a, &da);
            }
            Op::MeanAll(a) => {
                let len = self.values[*a].len();
                let c = g.data()[0] / T::of_f64(len as f64);
                let da = Array::filled(self.values[*a].shape().to_vec(), c);
                self.accum(grads, *a, &da);
            }
            Op::SumAll(a) => {
                let da = Array::filled(self.values[*a].shape().to_vec(), g.data()[0]);
                self.accum(grads, *a, &da);
            }
            Op::Reshape(a) => {
                let da = g
                    .clone()
                    .reshape(self.values[*a].shape().to_vec())
                    .expect("same length");
                self.accum(grads, *a, &da);
            }
            Op::SliceRows { x, r0 } => {
                if self.needs[*x] {
                    let mut da = Array::zeros(self.values[*x].shape().to_vec());
                    let c = da.cols();
                    let off = r0 * c;
                    for (t, &s) in da.data_mut()[off..off + g.len()].iter_mut().zip(g.data()) {
                        *t = s;
                    }
                    self.accum(grads, *x, &da);
                }
            }
            Op::SliceCols { x, c0 } => {
                if self.needs[*x] {
                    let mut da = Array::zeros(self.values[*x].shape().to_vec());
                    let (rows, w) = (g.rows(), g.cols());
                    let c = da.cols();
                    for r in 0..rows {
                        for j in 0..w {
                            da.data_mut()[r * c + c0 + j] = g.at2(r, j);
                        }
                    }
                    self.accum(grads, *x, &da);
                }
            }
            Op::ConcatRows(parts) => {
                let mut r = 0;
                for &p in parts {
                    let rows = self.values[p].rows();
                    if self.needs[p] {
                        let slice = g.slice_rows(r, r + rows).expect("within bounds");
                        let da = slice
                            .reshape(self.values[p].shape().to_vec())
                            .expect("same length");
                        self.accum(grads, p, &da);
                    }
                    r += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut c = 0;
                for &p in parts {
                    let cols = self.values[p].cols();
                    if self.needs[p] {
                        let da = g.slice_cols(c, c + cols).expect("within bounds");
                        self.accum(grads, p, &da);
                    }
                    c += cols;
                }
            }
            Op::GatherRows { table, idx } => {
                if self.needs[*table] {
                    let mut da = Array::zeros(self.values[*table].shape().to_vec());
                    let c = da.cols();
                    for (r, &row) in idx.iter().enumerate() {
                        for j in 0..c {
                            let off = row * c + j;
                            da.data_mut()[off] = da.data_mut()[off] + g.at2(r, j);
                        }
                    }
                    self.accum(grads, *table, &da);
                }
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Array<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, n: Node) -> Option<&Array<T>> {
        self.grads[n.0].as_ref()
    }

    pub fn take(&mut self, n: Node) -> Option<Array<T>> {
        self.grads[n.0].take()
    }
}
