//! Reverse-mode gradients over a recorded sequence of matrix primitives.
//!
//! Only what dense networks need is supported: affine maps, elementwise
//! activations, column concatenation and grouped row means (used for token
//! pooling). Every value is a [`Matrix`]; batches are stacked as rows.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::matrix::{gemm, Matrix};
use crate::error::{input_err, state_err, Result};

/// Identity of a trainable parameter: which network, which layer, and
/// whether it is the weight matrix or the bias row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamKey {
    pub net: u32,
    pub layer: u32,
    pub kind: ParamKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
}

impl ParamKey {
    pub fn weight(net: u32, layer: u32) -> Self {
        Self {
            net,
            layer,
            kind: ParamKind::Weight,
        }
    }

    pub fn bias(net: u32, layer: u32) -> Self {
        Self {
            net,
            layer,
            kind: ParamKind::Bias,
        }
    }
}

/// Handle to a value recorded on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamKey),
    /// `x · wᵀ`
    MatMulT(Var, Var),
    /// `x + b` with `b` a single row broadcast over all rows of `x`.
    AddRow(Var, Var),
    Add(Var, Var),
    Tanh(Var),
    Relu(Var),
    Concat(Vec<Var>),
    /// Mean over consecutive groups of `n` rows.
    GroupMean(Var, usize),
    /// Repeats every row `n` times consecutively.
    RepeatRows(Var, usize),
    /// Vertical concatenation.
    StackRows(Vec<Var>),
    Scale(Var, f64),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Matrix,
}

/// Records primitives during a forward pass; [`GradTape::backward`] walks
/// them in exact reverse order.
#[derive(Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

/// Parameter gradients keyed by [`ParamKey`]. Parameters that appear more
/// than once on a tape (shared weights) have their contributions summed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<ParamKey, Matrix>,
}

impl Gradients {
    pub fn get(&self, key: &ParamKey) -> Option<&Matrix> {
        self.map.get(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamKey, &Matrix)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        self.map.values().map(Matrix::frobenius_sq).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        for m in self.map.values_mut() {
            m.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }

    /// Adds `other` into `self`, key by key.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (k, g) in &other.map {
            match self.map.get_mut(k) {
                Some(acc) => acc.add_assign(g),
                None => {
                    self.map.insert(*k, g.clone());
                }
            }
        }
    }

    fn add(&mut self, key: ParamKey, g: &Matrix) {
        match self.map.get_mut(&key) {
            Some(acc) => acc.add_assign(g),
            None => {
                self.map.insert(key, g.clone());
            }
        }
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// The most recently recorded value.
    pub fn last(&self) -> Option<Var> {
        self.nodes.len().checked_sub(1).map(Var)
    }

    fn push(&mut self, op: Op, value: Matrix) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(Op::Constant, value)
    }

    pub fn param(&mut self, key: ParamKey, value: Matrix) -> Var {
        self.push(Op::Param(key), value)
    }

    pub fn matmul_t(&mut self, x: Var, w: Var) -> Result<Var> {
        let value = self.value(x).matmul_t(self.value(w))?;
        Ok(self.push(Op::MatMulT(x, w), value))
    }

    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return input_err(format!("add_row of {:?} and {:?}", xv.shape(), bv.shape()));
        }
        let mut value = xv.clone();
        for r in 0..value.rows() {
            for (v, b) in value.row_mut(r).iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        Ok(self.push(Op::AddRow(x, b), value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        self.push(Op::Tanh(x), value)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(Op::Relu(x), value)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).scale(c);
        self.push(Op::Scale(x, c), value)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(p) => self.value(*p).rows(),
            None => return input_err("concat of nothing"),
        };
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            return input_err("concat of values with different row counts");
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let src = self.value(*p).row(r);
                value.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(self.push(Op::Concat(parts.to_vec()), value))
    }

    pub fn group_mean(&mut self, x: Var, n: usize) -> Result<Var> {
        let xv = self.value(x);
        if n == 0 || !xv.rows().is_multiple_of(n) {
            return input_err(format!("group_mean of {} rows by {}", xv.rows(), n));
        }
        let groups = xv.rows() / n;
        let mut value = Matrix::zeros(groups, xv.cols());
        for g in 0..groups {
            for i in 0..n {
                let src = xv.row(g * n + i);
                for (v, s) in value.row_mut(g).iter_mut().zip(src) {
                    *v += s;
                }
            }
            value.row_mut(g).iter_mut().for_each(|v| *v /= n as f64);
        }
        Ok(self.push(Op::GroupMean(x, n), value))
    }

    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Var {
        let xv = self.value(x);
        let mut value = Matrix::zeros(xv.rows() * n, xv.cols());
        for r in 0..xv.rows() {
            for i in 0..n {
                value.row_mut(r * n + i).copy_from_slice(xv.row(r));
            }
        }
        self.push(Op::RepeatRows(x, n), value)
    }

    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = match parts.first() {
            Some(p) => self.value(*p).cols(),
            None => return input_err("stack of nothing"),
        };
        if parts.iter().any(|p| self.value(*p).cols() != cols) {
            return input_err("stack of values with different column counts");
        }
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(self.value(*p).data());
        }
        let value = Matrix::from_vec(data.len() / cols.max(1), cols, data)?;
        Ok(self.push(Op::StackRows(parts.to_vec()), value))
    }

    /// Back-propagates `output_grad` from the last recorded value.
    pub fn backward(&self, output_grad: &Matrix) -> Result<Gradients> {
        match self.last() {
            Some(out) => self.backward_from(out, output_grad),
            None => state_err("backward over an empty tape"),
        }
    }

    /// Back-propagates `output_grad` from `output`. Every parameter recorded
    /// on the tape gets an entry, zero if it did not influence `output`.
    pub fn backward_from(&self, output: Var, output_grad: &Matrix) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return state_err("backward over an empty tape");
        }
        if self.value(output).shape() != output_grad.shape() {
            return input_err(format!(
                "output gradient {:?} does not match output {:?}",
                output_grad.shape(),
                self.value(output).shape()
            ));
        }
        let mut adj: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[output.0] = Some(output_grad.clone());
        let mut grads = Gradients::default();

        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            let Some(g) = adj[idx].take() else {
                if let Op::Param(key) = node.op {
                    grads.add(key, &Matrix::zeros(node.value.rows(), node.value.cols()));
                }
                continue;
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(key) => grads.add(*key, &g),
                Op::MatMulT(x, w) => {
                    // y = x wᵀ: dx = g w, dw = gᵀ x
                    let dx = gemm(&g, false, self.value(*w), false);
                    let dw = gemm(&g, true, self.value(*x), false);
                    accumulate(&mut adj, *x, dx);
                    accumulate(&mut adj, *w, dw);
                }
                Op::AddRow(x, b) => {
                    let mut db = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, v) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut adj, *b, db);
                    accumulate(&mut adj, *x, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *b, g.clone());
                    accumulate(&mut adj, *a, g);
                }
                Op::Tanh(x) => {
                    let dx = g.zip_with(&node.value, |g, y| g * (1.0 - y * y))?;
                    accumulate(&mut adj, *x, dx);
                }
                Op::Relu(x) => {
                    let dx = g.zip_with(&node.value, |g, y| if y > 0.0 { g } else { 0.0 })?;
                    accumulate(&mut adj, *x, dx);
                }
                Op::Scale(x, c) => accumulate(&mut adj, *x, g.scale(*c)),
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let cols = self.value(*p).cols();
                        let mut dp = Matrix::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                        }
                        off += cols;
                        accumulate(&mut adj, *p, dp);
                    }
                }
                Op::GroupMean(x, n) => {
                    let xv = self.value(*x);
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    let inv = 1.0 / *n as f64;
                    for r in 0..xv.rows() {
                        let src = g.row(r / n);
                        for (d, s) in dx.row_mut(r).iter_mut().zip(src) {
                            *d = s * inv;
                        }
                    }
                    accumulate(&mut adj, *x, dx);
                }
                Op::StackRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let (rows, cols) = self.value(*p).shape();
                        let slice = g.data()[off * cols..(off + rows) * cols].to_vec();
                        off += rows;
                        accumulate(&mut adj, *p, Matrix::from_vec(rows, cols, slice)?);
                    }
                }
                Op::RepeatRows(x, n) => {
                    let xv = self.value(*x);
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for r in 0..g.rows() {
                        for (d, s) in dx.row_mut(r / n).iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                    accumulate(&mut adj, *x, dx);
                }
            }
        }
        Ok(grads)
    }
}

fn accumulate(adj: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut adj[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
