//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass in execution
//! order. Each recorded node keeps its value and enough information about
//! its inputs to produce the local vector-Jacobian product, so
//! [`Tape::backward`] is a single sweep over the nodes in reverse.
//!
//! Parameters are borrowed rather than copied onto the tape, which keeps a
//! forward pass over a large model cheap:
//!
//! ```
//! use vtqa_core::tape::Tape;
//! use vtqa_core::tensor::Tensor;
//!
//! let w = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
//! let mut tape = Tape::new();
//! let wv = tape.param(&w);
//! let x = tape.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
//! let y = tape.matmul(wv, x).unwrap();
//! let loss = tape.sum(y);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(wv).unwrap().data(), &[3.0, 4.0]);
//! ```

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::{self, require_matrix, require_same_shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBroadcast(Var, Var),
    MulRowBroadcast(Var, Var),
    OuterAdd(Var, Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    SelectRow(Var, usize),
    StackRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    SumList(Vec<Var>),
    MeanList(Vec<Var>),
    /// Element `i` of the output came from list entry `winners[i]`.
    MaxList(Vec<Var>, Vec<usize>),
    CrossEntropy(Var, usize),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward pass. Not shared between threads; run one tape
/// per concurrent evaluation.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the node did not influence the output or does not
    /// require a gradient.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), op, requires_grad)
    }

    /// A trainable leaf borrowed from outside the tape.
    pub fn param(&mut self, value: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, true)
    }

    /// A trainable leaf owned by the tape.
    pub fn var(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push_op(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`; the natural form for applying an `out × in` weight to rows.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push_op(out, Op::MatMulNt(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = tensor::transpose(self.value(a))?;
        Ok(self.push_op(out, Op::Transpose(a), &[a]))
    }

    pub fn elementwise(&mut self, a: Var, b: Var, kind: Elementwise) -> Result<Var> {
        match kind {
            Elementwise::Add => self.add(a, b),
            Elementwise::Mul => self.mul(a, b),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        require_same_shape("add", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push_op(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        require_same_shape("sub", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push_op(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        require_same_shape("mul", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push_op(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).scale(k);
        self.push_op(out, Op::Scale(a, k), &[a])
    }

    /// Adds the `1 × n` row `b` to every row of `a: m × n`.
    pub fn add_row_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = row_broadcast("add_row_broadcast", self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push_op(out, Op::AddRowBroadcast(a, b), &[a, b]))
    }

    /// Multiplies every row of `a: m × n` elementwise by the `1 × n` row `w`.
    pub fn mul_row_broadcast(&mut self, a: Var, w: Var) -> Result<Var> {
        let out = row_broadcast("mul_row_broadcast", self.value(a), self.value(w), |x, y| x * y)?;
        Ok(self.push_op(out, Op::MulRowBroadcast(a, w), &[a, w]))
    }

    /// `out[i][j] = a[i] + b[j]` for column vectors `a: m × 1`, `b: n × 1`.
    pub fn outer_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, one_a) = require_matrix("outer_add", self.value(a))?;
        let (n, one_b) = require_matrix("outer_add", self.value(b))?;
        if one_a != 1 || one_b != 1 {
            return Err(Error::dim("outer_add", self.shape(a), self.shape(b)));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let data = (0..m).flat_map(|i| bv.iter().map(move |y| av[i] + y)).collect();
        let out = Tensor::matrix(m, n, data)?;
        Ok(self.push_op(out, Op::OuterAdd(a, b), &[a, b]))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p) = require_matrix("concat_cols", self.value(a))?;
        let (m2, q) = require_matrix("concat_cols", self.value(b))?;
        if m != m2 {
            return Err(Error::dim("concat_cols", self.shape(a), self.shape(b)));
        }
        let mut data = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            data.extend_from_slice(self.value(a).row_slice(i));
            data.extend_from_slice(self.value(b).row_slice(i));
        }
        let out = Tensor::matrix(m, p + q, data)?;
        Ok(self.push_op(out, Op::ConcatCols(a, b), &[a, b]))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = require_matrix("slice_cols", self.value(a))?;
        if start >= end || end > n {
            return Err(Error::Argument(format!(
                "column range {start}..{end} out of bounds for width {n}"
            )));
        }
        let data = (0..m)
            .flat_map(|i| self.value(a).row_slice(i)[start..end].to_vec())
            .collect();
        let out = Tensor::matrix(m, end - start, data)?;
        Ok(self.push_op(out, Op::SliceCols(a, start), &[a]))
    }

    pub fn select_row(&mut self, a: Var, i: usize) -> Result<Var> {
        let (m, _) = require_matrix("select_row", self.value(a))?;
        if i >= m {
            return Err(Error::Argument(format!("row {i} out of bounds for {m} rows")));
        }
        let out = Tensor::row(self.value(a).row_slice(i).to_vec());
        Ok(self.push_op(out, Op::SelectRow(a, i), &[a]))
    }

    /// Stacks `1 × n` rows into a `k × n` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let first = rows
            .first()
            .ok_or_else(|| Error::Argument("stack_rows of an empty list".into()))?;
        let width = self.value(*first).len();
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            if self.value(r).len() != width || self.value(r).rows() != 1 {
                return Err(Error::dim("stack_rows", self.shape(*first), self.shape(r)));
            }
            data.extend_from_slice(self.value(r).data());
        }
        let out = Tensor::matrix(rows.len(), width, data)?;
        Ok(self.push_op(out, Op::StackRows(rows.to_vec()), rows))
    }

    /// Embedding lookup: the listed rows of `table`, in order.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (m, n) = require_matrix("gather_rows", self.value(table))?;
        if indices.is_empty() {
            return Err(Error::Argument("gather_rows with no indices".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(Error::Argument(format!("row {bad} out of bounds for {m} rows")));
        }
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.value(table).row_slice(i));
        }
        let out = Tensor::matrix(indices.len(), n, data)?;
        Ok(self.push_op(out, Op::GatherRows(table, indices.to_vec()), &[table]))
    }

    /// `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push_op(out, Op::Relu(a), &[a])
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        match kind {
            Activation::Sigmoid => self.sigmoid(a),
            Activation::Tanh => self.tanh(a),
        }
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(tensor::sigmoid);
        self.push_op(out, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push_op(out, Op::Tanh(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = tensor::softmax_rows(self.value(a))?;
        Ok(self.push_op(out, Op::SoftmaxRows(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push_op(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        self.push_op(out, Op::Mean(a), &[a])
    }

    fn check_list(&self, op: &'static str, list: &[Var]) -> Result<()> {
        let first = list
            .first()
            .ok_or_else(|| Error::Argument(format!("{op} of an empty list")))?;
        for &v in &list[1..] {
            require_same_shape(op, self.value(*first), self.value(v))?;
        }
        Ok(())
    }

    /// Elementwise sum over a list of same-shape tensors.
    pub fn sum_list(&mut self, list: &[Var]) -> Result<Var> {
        self.check_list("sum_list", list)?;
        let mut out = self.value(list[0]).clone();
        for &v in &list[1..] {
            out.add_assign(self.value(v));
        }
        Ok(self.push_op(out, Op::SumList(list.to_vec()), list))
    }

    /// Elementwise mean over a list of same-shape tensors.
    pub fn mean_list(&mut self, list: &[Var]) -> Result<Var> {
        self.check_list("mean_list", list)?;
        let mut out = self.value(list[0]).clone();
        for &v in &list[1..] {
            out.add_assign(self.value(v));
        }
        let out = out.scale(1.0 / list.len() as f64);
        Ok(self.push_op(out, Op::MeanList(list.to_vec()), list))
    }

    /// Elementwise max over a list; ties route the gradient to the first
    /// maximiser.
    pub fn max_list(&mut self, list: &[Var]) -> Result<Var> {
        self.check_list("max_list", list)?;
        let mut out = self.value(list[0]).clone();
        let mut winners = vec![0; out.len()];
        for (k, &v) in list.iter().enumerate().skip(1) {
            for (i, (&x, o)) in self.value(v).data().iter().zip(out.data_mut()).enumerate() {
                if x > *o {
                    *o = x;
                    winners[i] = k;
                }
            }
        }
        Ok(self.push_op(out, Op::MaxList(list.to_vec(), winners), list))
    }

    /// `-log softmax(logits)[target]` over all entries of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let x = self.value(logits).data();
        if target >= x.len() {
            return Err(Error::Argument(format!(
                "target index {target} out of range for {} classes",
                x.len()
            )));
        }
        let out = Tensor::scalar(tensor::cross_entropy(x, target));
        Ok(self.push_op(out, Op::CrossEntropy(logits, target), &[logits]))
    }

    /// Backpropagates from a single-element output with seed 1.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::Argument(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        self.backward_with(output, Tensor::full(self.shape(output), 1.0))
    }

    /// Backpropagates an arbitrary upstream gradient `seed` from `output`.
    pub fn backward_with(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        require_same_shape("backward", self.value(output), &seed)?;
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient buffer of `v`, zero-filled on first use; `None` when `v`
    /// needs no gradient.
    fn acc<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut [f64]> {
        if !self.needs(v) {
            return None;
        }
        Some(
            grads[v.0]
                .get_or_insert_with(|| Tensor::zeros(self.shape(v)))
                .data_mut(),
        )
    }

    /// Adds the vector-Jacobian products of node `i` for upstream gradient
    /// `g` into the buffers of its inputs.
    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = &*self.nodes[i].value;
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if let Some(acc) = self.acc(grads, *a) {
                    tensor::matmul_nt_acc(acc, g, self.value(*b))?;
                }
                if let Some(acc) = self.acc(grads, *b) {
                    tensor::matmul_tn_acc(acc, self.value(*a), g)?;
                }
            }
            Op::MatMulNt(a, b) => {
                if let Some(acc) = self.acc(grads, *a) {
                    tensor::matmul_acc(acc, g, self.value(*b))?;
                }
                if let Some(acc) = self.acc(grads, *b) {
                    tensor::matmul_tn_acc(acc, g, self.value(*a))?;
                }
            }
            Op::Transpose(a) => {
                if let Some(acc) = self.acc(grads, *a) {
                    add_into(acc, tensor::transpose(g)?.data());
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(acc) = self.acc(grads, v) {
                        add_into(acc, gd);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(acc) = self.acc(grads, *a) {
                    add_into(acc, gd);
                }
                if let Some(acc) = self.acc(grads, *b) {
                    tensor::axpy(acc, -1.0, gd);
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if let Some(acc) = self.acc(grads, v) {
                        for ((o, &gx), &y) in acc.iter_mut().zip(gd).zip(self.value(other).data()) {
                            *o += gx * y;
                        }
                    }
                }
            }
            Op::Scale(a, k) => {
                if let Some(acc) = self.acc(grads, *a) {
                    tensor::axpy(acc, *k, gd);
                }
            }
            Op::AddRowBroadcast(a, b) => {
                if let Some(acc) = self.acc(grads, *a) {
                    add_into(acc, gd);
                }
                if let Some(acc) = self.acc(grads, *b) {
                    for row in gd.chunks_exact(g.cols()) {
                        add_into(acc, row);
                    }
                }
            }
            Op::MulRowBroadcast(a, w) => {
                let n = g.cols();
                if let Some(acc) = self.acc(grads, *a) {
                    let wd = self.value(*w).data();
                    for (acc_row, g_row) in acc.chunks_exact_mut(n).zip(gd.chunks_exact(n)) {
                        for ((o, &gx), &y) in acc_row.iter_mut().zip(g_row).zip(wd) {
                            *o += gx * y;
                        }
                    }
                }
                if let Some(acc) = self.acc(grads, *w) {
                    let ad = self.value(*a).data();
                    for (g_row, a_row) in gd.chunks_exact(n).zip(ad.chunks_exact(n)) {
                        for ((o, &gx), &x) in acc.iter_mut().zip(g_row).zip(a_row) {
                            *o += gx * x;
                        }
                    }
                }
            }
            Op::OuterAdd(a, b) => {
                let n = g.cols();
                if let Some(acc) = self.acc(grads, *a) {
                    for (o, row) in acc.iter_mut().zip(gd.chunks_exact(n)) {
                        *o += row.iter().sum::<f64>();
                    }
                }
                if let Some(acc) = self.acc(grads, *b) {
                    for row in gd.chunks_exact(n) {
                        add_into(acc, row);
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let n = g.cols();
                let p = self.value(*a).cols();
                for (v, start, width) in [(*a, 0, p), (*b, p, n - p)] {
                    if let Some(acc) = self.acc(grads, v) {
                        for (acc_row, g_row) in acc.chunks_exact_mut(width).zip(gd.chunks_exact(n)) {
                            add_into(acc_row, &g_row[start..start + width]);
                        }
                    }
                }
            }
            Op::SliceCols(a, start) => {
                if let Some(acc) = self.acc(grads, *a) {
                    let n = self.value(*a).cols();
                    let w = g.cols();
                    for (acc_row, g_row) in acc.chunks_exact_mut(n).zip(gd.chunks_exact(w)) {
                        add_into(&mut acc_row[*start..*start + w], g_row);
                    }
                }
            }
            Op::SelectRow(a, r) => {
                if let Some(acc) = self.acc(grads, *a) {
                    let n = gd.len();
                    add_into(&mut acc[r * n..(r + 1) * n], gd);
                }
            }
            Op::StackRows(rows) => {
                for (k, &r) in rows.iter().enumerate() {
                    if let Some(acc) = self.acc(grads, r) {
                        add_into(acc, g.row_slice(k));
                    }
                }
            }
            Op::GatherRows(table, indices) => {
                if let Some(acc) = self.acc(grads, *table) {
                    let n = g.cols();
                    for (k, &row) in indices.iter().enumerate() {
                        add_into(&mut acc[row * n..(row + 1) * n], g.row_slice(k));
                    }
                }
            }
            Op::Relu(a) => {
                if let Some(acc) = self.acc(grads, *a) {
                    for ((o, &gx), &x) in acc.iter_mut().zip(gd).zip(self.value(*a).data()) {
                        if x > 0.0 {
                            *o += gx;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(acc) = self.acc(grads, *a) {
                    for ((o, &gx), &s) in acc.iter_mut().zip(gd).zip(out.data()) {
                        *o += gx * s * (1.0 - s);
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(acc) = self.acc(grads, *a) {
                    for ((o, &gx), &t) in acc.iter_mut().zip(gd).zip(out.data()) {
                        *o += gx * (1.0 - t * t);
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if let Some(acc) = self.acc(grads, *a) {
                    let n = g.cols();
                    let rows = acc.chunks_exact_mut(n).zip(gd.chunks_exact(n));
                    for ((acc_row, g_row), y_row) in rows.zip(out.data().chunks_exact(n)) {
                        let inner = tensor::dot(g_row, y_row);
                        for ((o, &gx), &y) in acc_row.iter_mut().zip(g_row).zip(y_row) {
                            *o += y * (gx - inner);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(acc) = self.acc(grads, *a) {
                    acc.iter_mut().for_each(|o| *o += gd[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(acc) = self.acc(grads, *a) {
                    let k = gd[0] / acc.len() as f64;
                    acc.iter_mut().for_each(|o| *o += k);
                }
            }
            Op::SumList(list) => {
                for &v in list {
                    if let Some(acc) = self.acc(grads, v) {
                        add_into(acc, gd);
                    }
                }
            }
            Op::MeanList(list) => {
                let k = 1.0 / list.len() as f64;
                for &v in list {
                    if let Some(acc) = self.acc(grads, v) {
                        tensor::axpy(acc, k, gd);
                    }
                }
            }
            Op::MaxList(list, winners) => {
                for (k, &v) in list.iter().enumerate() {
                    if let Some(acc) = self.acc(grads, v) {
                        for ((o, &gx), &w) in acc.iter_mut().zip(gd).zip(winners) {
                            if w == k {
                                *o += gx;
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy(logits, target) => {
                if let Some(acc) = self.acc(grads, *logits) {
                    let x = self.value(*logits).data();
                    let lse = tensor::log_sum_exp(x);
                    let scale = gd[0];
                    for (o, &v) in acc.iter_mut().zip(x) {
                        *o += (v - lse).exp() * scale;
                    }
                    acc[*target] -= scale;
                }
            }
        }
        Ok(())
    }
}

fn add_into(acc: &mut [f64], src: &[f64]) {
    for (o, &x) in acc.iter_mut().zip(src) {
        *o += x;
    }
}

fn row_broadcast(
    op: &'static str,
    a: &Tensor,
    row: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let (m, n) = require_matrix(op, a)?;
    if row.rows() != 1 || row.len() != n {
        return Err(Error::dim(op, a.shape(), row.shape()));
    }
    let r = row.data();
    let data = (0..m)
        .flat_map(|i| a.row_slice(i).iter().zip(r).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>())
        .collect();
    Tensor::matrix(m, n, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut tape = Tape::new();
        let eye = tape.constant(m(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let b = tape.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let out = tape.matmul(eye, b).unwrap();
        assert_eq!(tape.value(out), &m(&[&[1.0, 2.0], &[3.0, 4.0]]));

        let a = tape.constant(m(&[&[1.0, 2.0]]));
        let c = tape.constant(m(&[&[3.0], &[4.0]]));
        let out = tape.matmul(a, c).unwrap();
        assert_eq!(tape.value(out).data(), &[11.0]);
    }

    #[test]
    fn matmul_gradient_of_sum() {
        let mut tape = Tape::new();
        let a = tape.var(m(&[&[1.0, 1.0]]));
        let b = tape.constant(m(&[&[2.0], &[5.0]]));
        let y = tape.matmul(a, b).unwrap();
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[2.0, 5.0]);
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
        let c = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(tape.add(a, c).is_err());
        assert!(tape.concat_cols(a, c).is_err());
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::row(vec![1.0, 2.0, 3.0]));
        let z = tape.constant(Tensor::row(vec![0.0; 3]));
        let p = tape.elementwise(a, z, Elementwise::Mul).unwrap();
        assert_eq!(tape.value(p).data(), &[0.0; 3]);
        let s = tape.elementwise(a, z, Elementwise::Add).unwrap();
        assert_eq!(tape.value(s), tape.value(a));
        let x = tape.constant(Tensor::row(vec![1.0, 2.0]));
        let y = tape.constant(Tensor::row(vec![3.0, 4.0]));
        let p = tape.mul(x, y).unwrap();
        assert_eq!(tape.value(p).data(), &[3.0, 8.0]);
    }

    #[test]
    fn concat_and_gradient_split() {
        let mut tape = Tape::new();
        let a = tape.var(m(&[&[1.0, 2.0]]));
        let b = tape.var(m(&[&[3.0]]));
        let c = tape.concat_cols(a, b).unwrap();
        assert_eq!(tape.value(c), &m(&[&[1.0, 2.0, 3.0]]));
        let grads = tape.backward_with(c, m(&[&[1.0, 1.0, 1.0]])).unwrap();
        assert_eq!(grads.get(a).unwrap(), &m(&[&[1.0, 1.0]]));
        assert_eq!(grads.get(b).unwrap(), &m(&[&[1.0]]));
    }

    #[test]
    fn relu_examples() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::row(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let grads = tape
            .backward_with(y, Tensor::row(vec![1.0, 1.0, 1.0]))
            .unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);

        let neg = tape.constant(Tensor::row(vec![-3.0, -0.5]));
        let r = tape.relu(neg);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0]);
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(m(&[&[0.0, 0.0]]));
        let s = tape.softmax_rows(a).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);

        let b = tape.constant(m(&[&[1000.0, 1000.0 + 3f64.ln()]]));
        let s = tape.softmax_rows(b).unwrap();
        let d = tape.value(s).data();
        assert!((d[0] - 0.25).abs() < 1e-12 && (d[1] - 0.75).abs() < 1e-12);

        let c = tape.constant(m(&[&[1f64.ln(), 2f64.ln()]]));
        let s = tape.softmax_rows(c).unwrap();
        let d = tape.value(s).data();
        assert!((d[0] - 1.0 / 3.0).abs() < 1e-12 && (d[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn reduction_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(m(&[&[1.0, 3.0]]));
        let b = tape.constant(m(&[&[3.0, 1.0]]));
        let mx = tape.max_list(&[a, b]).unwrap();
        assert_eq!(tape.value(mx).data(), &[3.0, 3.0]);
        let mean = tape.mean_list(&[a]).unwrap();
        assert_eq!(tape.value(mean), tape.value(a));
        let v = tape.constant(Tensor::row(vec![1.0, 2.0, 3.0]));
        let s = tape.sum(v);
        assert_eq!(tape.value(s).data(), &[6.0]);
        assert!(matches!(tape.max_list(&[]), Err(Error::Argument(_))));
        assert!(tape.mean_list(&[]).is_err());
    }

    #[test]
    fn max_list_ties_go_to_first() {
        let mut tape = Tape::new();
        let a = tape.var(Tensor::row(vec![2.0, 1.0]));
        let b = tape.var(Tensor::row(vec![2.0, 5.0]));
        let mx = tape.max_list(&[a, b]).unwrap();
        let grads = tape.backward_with(mx, Tensor::row(vec![1.0, 1.0])).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 0.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn activation_examples() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::scalar(0.0));
        let s = tape.activation(x, Activation::Sigmoid);
        let t = tape.activation(x, Activation::Tanh);
        assert_eq!(tape.value(s).data(), &[0.5]);
        assert_eq!(tape.value(t).data(), &[0.0]);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.25]);
    }

    #[test]
    fn cross_entropy_values() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::row(vec![0.7; 5]));
        let ce = tape.cross_entropy(l, 2).unwrap();
        assert!((tape.value(ce).data()[0] - 5f64.ln()).abs() < 1e-12);
        let l = tape.constant(Tensor::row(vec![30.0, 0.0]));
        let ce = tape.cross_entropy(l, 0).unwrap();
        let v = tape.value(ce).data()[0];
        let expected = (-30f64).exp();
        assert!(((v - expected) / expected).abs() < 1e-9, "{v}");
        assert!(tape.cross_entropy(l, 2).is_err());
    }

    #[test]
    fn zero_seed_gives_zero_gradients() {
        let mut tape = Tape::new();
        let x = tape.var(m(&[&[0.3, -0.2], &[1.0, 0.5]]));
        let w = tape.var(m(&[&[0.1, 0.4], &[-0.3, 0.2]]));
        let h = tape.matmul_nt(x, w).unwrap();
        let s = tape.softmax_rows(h).unwrap();
        let grads = tape.backward_with(s, Tensor::zeros(&[2, 2])).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&g| g == 0.0));
        assert!(grads.get(w).unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::row(vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }
}
