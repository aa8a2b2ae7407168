//! Reverse-mode automatic differentiation over rank-2 `f64` tensors.
//!
//! A [`Tape`] records every operation as it executes. Parameters live in a
//! [`ParamStore`] and enter a tape through [`Tape::param`]; after
//! [`Tape::backward`] their gradients are added into the store, so repeated
//! backward passes accumulate until [`ParamStore::zero_grad`].

mod checkpoint;
pub mod gradcheck;
mod optim;
mod sparse;
mod tensor;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng as _;

pub use checkpoint::Checkpoint;
pub use optim::{sgd_step, Adam};
pub use sparse::SparseAdj;
pub use tensor::Tensor;

use crate::error::{Error, Result};
use crate::rng::Rng;
use tensor::{gemm_acc, shape_error};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Handle to a parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// Named trainable tensors and their accumulated gradients.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Option<Tensor>>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::contract(format!("parameter `{name}` already exists")));
        }
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        self.grads.push(None);
        Ok(id)
    }

    /// Glorot-uniform initialised `rows × cols` weight.
    pub fn glorot(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut Rng) -> Result<ParamId> {
        let a = (6.0 / (rows + cols).max(1) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
        self.add(name, Tensor::from_vec(rows, cols, data)?)
    }

    pub fn zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> Result<ParamId> {
        self.add(name, Tensor::zeros(rows, cols))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Gives every parameter without a gradient an explicit zero one, for
    /// steps that train only part of a store.
    pub fn fill_missing_grads(&mut self) {
        for (g, v) in self.grads.iter_mut().zip(&self.values) {
            if g.is_none() {
                *g = Some(Tensor::zeros(v.rows(), v.cols()));
            }
        }
    }

    fn accumulate(&mut self, id: ParamId, g: &Tensor) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.axpy(1.0, g),
            slot => *slot = Some(g.clone()),
        }
    }

    /// Number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Snapshot of all values keyed by name.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        for (name, v) in self.names.iter().zip(&self.values) {
            ck.tensors.insert(name.clone(), v.clone());
        }
        ck
    }

    /// Overwrites values from `ck`; every parameter must be present with its shape.
    pub fn load(&mut self, ck: &Checkpoint) -> Result<()> {
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let t = ck
                .tensors
                .get(name)
                .ok_or_else(|| Error::Validation(format!("checkpoint lacks parameter `{name}`")))?;
            if t.shape() != value.shape() {
                return Err(Error::Validation(format!(
                    "parameter `{name}` has shape {:?} in checkpoint, expected {:?}",
                    t.shape(),
                    value.shape()
                )));
            }
            *value = t.clone();
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    SpMM(Arc<SparseAdj>, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    DivCol(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Square(Var),
    Sqrt(Var),
    RowSoftmax(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather(Var, Arc<Vec<usize>>),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    ColMean(Var),
    BceLogits(Var, Arc<Tensor>, Arc<Tensor>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    /// False when no parameter or input leaf feeds this value.
    grad: bool,
}

/// Record of executed operations for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn check_same(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_error(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let grad = match &op {
            Op::Input | Op::Param(_) => true,
            Op::Constant => false,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) | Op::MulCol(a, b) | Op::DivCol(a, b) => {
                self.nodes[a.0].grad || self.nodes[b.0].grad
            }
            Op::ConcatCols(parts) | Op::ConcatRows(parts) => parts.iter().any(|p| self.nodes[p.0].grad),
            Op::SpMM(_, a)
            | Op::Scale(a, _)
            | Op::Shift(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::RowSoftmax(a)
            | Op::Gather(a, _)
            | Op::Transpose(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::RowSum(a)
            | Op::ColMean(a)
            | Op::BceLogits(a, ..) => self.nodes[a.0].grad,
        };
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    /// A leaf that is not a parameter. Its gradient is still reported by
    /// [`Tape::backward`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    /// A leaf that receives no gradient; backward work feeding only
    /// constants is skipped.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn sparse_matmul(&mut self, adj: &Arc<SparseAdj>, x: Var) -> Result<Var> {
        let v = adj.matmul(self.value(x))?;
        Ok(self.push(v, Op::SpMM(Arc::clone(adj), x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("add", self.value(a), self.value(b))?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("sub", self.value(a), self.value(b))?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("mul", self.value(a), self.value(b))?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// Adds the `1 × c` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.rows() != 1 || tb.cols() != ta.cols() {
            return Err(shape_error("add_row", ta.shape(), tb.shape()));
        }
        let mut v = ta.clone();
        for r in 0..v.rows() {
            for (x, &y) in v.row_mut(r).iter_mut().zip(tb.data()) {
                *x += y;
            }
        }
        Ok(self.push(v, Op::AddRow(a, b)))
    }

    fn col_broadcast(&mut self, a: Var, c: Var, divide: bool) -> Result<Var> {
        let (ta, tc) = (self.value(a), self.value(c));
        if tc.cols() != 1 || tc.rows() != ta.rows() {
            return Err(shape_error(if divide { "div_col" } else { "mul_col" }, ta.shape(), tc.shape()));
        }
        let mut v = ta.clone();
        for r in 0..v.rows() {
            let s = tc.data()[r];
            for x in v.row_mut(r) {
                if divide {
                    *x /= s;
                } else {
                    *x *= s;
                }
            }
        }
        let op = if divide { Op::DivCol(a, c) } else { Op::MulCol(a, c) };
        Ok(self.push(v, op))
    }

    /// Scales row `i` of `a` by `c[i]` where `c` is `r × 1`.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        self.col_broadcast(a, c, false)
    }

    /// Divides row `i` of `a` by `c[i]`.
    pub fn div_col(&mut self, a: Var, c: Var) -> Result<Var> {
        self.col_broadcast(a, c, true)
    }

    pub fn scalar_mul(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    /// Adds the constant `s` to every entry.
    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::Shift(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    /// Elementwise square root. Inputs must be non-negative; the gradient at 0 is taken as 0.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x < 0.0) {
            return Err(Error::contract("sqrt of a negative entry"));
        }
        let v = self.value(a).map(f64::sqrt);
        Ok(self.push(v, Op::Sqrt(a)))
    }

    /// Softmax over each row, computed with max subtraction.
    pub fn row_softmax(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        self.push(v, Op::RowSoftmax(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols of nothing"));
        }
        let ts: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::hcat(&ts).map_err(|_| {
            Error::contract(format!(
                "concat_cols: row counts differ {:?}",
                ts.iter().map(|t| t.shape()).collect::<Vec<_>>()
            ))
        })?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::contract("concat_rows of nothing"));
        };
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(shape_error("concat_rows", self.value(first).shape(), t.shape()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let v = Tensor::from_vec(rows, cols, data)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    /// Row `k` of the result is row `idx[k]` of `a`.
    pub fn gather_rows(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let t = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::contract(format!("gather_rows: row {bad} out of {} rows", t.rows())));
        }
        let mut data = Vec::with_capacity(idx.len() * t.cols());
        for &i in idx.iter() {
            data.extend_from_slice(t.row(i));
        }
        let v = Tensor::from_vec(idx.len(), t.cols(), data)?;
        Ok(self.push(v, Op::Gather(a, idx)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    /// Sum of all entries as a `1 × 1` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Mean of all entries as a `1 × 1` tensor.
    pub fn reduce_mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::contract("mean of an empty tensor"));
        }
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        Ok(self.push(v, Op::Mean(a)))
    }

    /// Per-row sums as an `r × 1` column.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::column((0..t.rows()).map(|r| t.row(r).iter().sum()).collect());
        self.push(v, Op::RowSum(a))
    }

    /// Per-column means as a `1 × c` row.
    pub fn col_mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rows() == 0 {
            return Err(Error::contract("col_mean of a tensor without rows"));
        }
        let mut v = Tensor::zeros(1, t.cols());
        for r in 0..t.rows() {
            for (o, &x) in v.data_mut().iter_mut().zip(t.row(r)) {
                *o += x;
            }
        }
        let n = t.rows() as f64;
        v.data_mut().iter_mut().for_each(|x| *x /= n);
        Ok(self.push(v, Op::ColMean(a)))
    }

    /// `Σ_i w_i · (softplus(z_i) − t_i z_i)`: weighted binary cross-entropy on
    /// logits, with soft targets allowed.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Arc<Tensor>, weights: Arc<Tensor>) -> Result<Var> {
        let z = self.value(logits);
        check_same("bce_with_logits", z, &targets)?;
        check_same("bce_with_logits", z, &weights)?;
        let loss: f64 = z
            .data()
            .iter()
            .zip(targets.data())
            .zip(weights.data())
            .map(|((&z, &t), &w)| if w == 0.0 { 0.0 } else { w * (softplus(z) - t * z) })
            .sum();
        Ok(self.push(Tensor::scalar(loss), Op::BceLogits(logits, targets, weights)))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != [1, 1] {
            return Err(Error::contract(format!("backward needs a scalar loss, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        if !node.grad {
            return;
        }
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let need = |v: Var| self.nodes[v.0].grad;
        // products accumulate straight into the operand's gradient buffer
        fn buffer<'g>(grads: &'g mut [Option<Tensor>], v: Var, shape: [usize; 2]) -> &'g mut Tensor {
            grads[v.0].get_or_insert_with(|| Tensor::zeros(shape[0], shape[1]))
        }
        match &node.op {
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if need(*a) {
                    gemm_acc(buffer(grads, *a, ta.shape()), g, false, tb, true);
                }
                if need(*b) {
                    gemm_acc(buffer(grads, *b, tb.shape()), ta, true, g, false);
                }
                return;
            }
            Op::SpMM(adj, x) => {
                if need(*x) {
                    adj.t_matmul_acc(g, buffer(grads, *x, val(*x).shape()));
                }
                return;
            }
            _ => {}
        }
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].grad {
                return;
            }
            match &mut grads[v.0] {
                Some(a) => a.axpy(1.0, &t),
                slot => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Input | Op::Constant | Op::Param(_) => {}
            Op::MatMul(..) | Op::SpMM(..) => unreachable!("handled above"),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(val(*b), |x, y| x * y));
                acc(*b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::AddRow(a, b) => {
                let mut gb = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, &x) in gb.data_mut().iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                acc(*a, g.clone());
                acc(*b, gb);
            }
            Op::MulCol(a, c) | Op::DivCol(a, c) => {
                let divide = matches!(node.op, Op::DivCol(..));
                let (ta, tc) = (val(*a), val(*c));
                let mut ga = g.clone();
                let mut gc = Tensor::zeros(tc.rows(), 1);
                for r in 0..g.rows() {
                    let s = tc.data()[r];
                    let dot: f64 = g.row(r).iter().zip(ta.row(r)).map(|(x, y)| x * y).sum();
                    if divide {
                        ga.row_mut(r).iter_mut().for_each(|x| *x /= s);
                        gc.data_mut()[r] = -dot / (s * s);
                    } else {
                        ga.row_mut(r).iter_mut().for_each(|x| *x *= s);
                        gc.data_mut()[r] = dot;
                    }
                }
                acc(*a, ga);
                acc(*c, gc);
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
            Op::Shift(a) => acc(*a, g.clone()),
            Op::Relu(a) => acc(*a, g.zip_map(val(*a), |d, x| if x > 0.0 { d } else { 0.0 })),
            Op::Sigmoid(a) => acc(*a, g.zip_map(y, |d, s| d * s * (1.0 - s))),
            Op::Tanh(a) => acc(*a, g.zip_map(y, |d, t| d * (1.0 - t * t))),
            Op::Square(a) => acc(*a, g.zip_map(val(*a), |d, x| 2.0 * d * x)),
            Op::Sqrt(a) => acc(*a, g.zip_map(y, |d, s| if s > 0.0 { d / (2.0 * s) } else { 0.0 })),
            Op::RowSoftmax(a) => {
                let mut ga = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, d)| p * d).sum();
                    for ((o, &p), &d) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = p * (d - dot);
                    }
                }
                acc(*a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let c = val(p).cols();
                    if !need(p) {
                        off += c;
                        continue;
                    }
                    let mut gp = Tensor::zeros(g.rows(), c);
                    for r in 0..g.rows() {
                        gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + c]);
                    }
                    off += c;
                    acc(p, gp);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let [r, c] = val(p).shape();
                    if !need(p) {
                        off += r;
                        continue;
                    }
                    let gp = Tensor::from_vec(r, c, g.data()[off * c..(off + r) * c].to_vec())
                        .expect("shape recorded at forward time");
                    off += r;
                    acc(p, gp);
                }
            }
            Op::Gather(a, _) if !need(*a) => {}
            Op::Gather(a, idx) => {
                let ta = val(*a);
                let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                for (k, &src) in idx.iter().enumerate() {
                    for (o, &x) in ga.row_mut(src).iter_mut().zip(g.row(k)) {
                        *o += x;
                    }
                }
                acc(*a, ga);
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Sum(a) => {
                let [r, c] = val(*a).shape();
                acc(*a, Tensor::full(r, c, g.item()));
            }
            Op::Mean(a) => {
                let [r, c] = val(*a).shape();
                acc(*a, Tensor::full(r, c, g.item() / (r * c) as f64));
            }
            Op::RowSum(a) => {
                let [r, c] = val(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                for i in 0..r {
                    let d = g.data()[i];
                    ga.row_mut(i).iter_mut().for_each(|x| *x = d);
                }
                acc(*a, ga);
            }
            Op::ColMean(a) => {
                let [r, c] = val(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                for i in 0..r {
                    for (o, &d) in ga.row_mut(i).iter_mut().zip(g.data()) {
                        *o = d / r as f64;
                    }
                }
                acc(*a, ga);
            }
            Op::BceLogits(z, t, w) => {
                let d = g.item();
                let tz = val(*z);
                let mut gz = Tensor::zeros(tz.rows(), tz.cols());
                for (((o, &zi), &ti), &wi) in gz.data_mut().iter_mut().zip(tz.data()).zip(t.data()).zip(w.data()) {
                    *o = d * wi * (sigmoid(zi) - ti);
                }
                acc(*z, gz);
            }
        }
    }
}

/// Result of a backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` influenced it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds the gradient of every parameter bound on `tape` into `store`.
    /// Parameters bound but not reached receive zeros.
    pub fn accumulate(&self, tape: &Tape, store: &mut ParamStore) {
        for (i, node) in tape.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                match self.get(Var(i)) {
                    Some(g) => store.accumulate(id, g),
                    None => store.accumulate(id, &Tensor::zeros(node.value.rows(), node.value.cols())),
                }
            }
        }
    }
}

#[cfg(test)]
mod tests;
