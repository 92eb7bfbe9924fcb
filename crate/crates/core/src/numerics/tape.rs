//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation applied during a forward pass.
//! [`Graph::backward`] then replays the record in reverse and returns one
//! gradient per parameter of the [`ParamStore`] the graph was built from.
//! A graph is single-use: build it, take values, call `backward`, drop it.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::matrix::{gemm, SparseRows};
use super::{Gradients, Matrix, ParamStore};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Fixed-width table of row indices: row `i` lists `width` indices.
/// Used for attention sample sets and row gathers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexTable {
    width: usize,
    data: Vec<usize>,
}

impl IndexTable {
    pub fn new(width: usize, data: Vec<usize>) -> Result<Self> {
        if width == 0 || data.len() % width != 0 {
            return Err(Error::Shape(format!(
                "index table of width {width} cannot hold {} entries",
                data.len()
            )));
        }
        Ok(Self { width, data })
    }

    pub fn from_rows(rows: &[Vec<usize>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::Shape("index table rows differ in length".into()));
        }
        Self::new(width, rows.concat())
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.data.len() / self.width
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[usize] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn max_index(&self) -> Option<usize> {
        self.data.iter().copied().max()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    SparseMatMul(Arc<SparseRows>, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    RowSoftmax(Var),
    LayerNorm(Var, Vec<f64>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Arc<[usize]>),
    GatherDot(Var, Var, Arc<IndexTable>),
    GatherCombine(Var, Var, Arc<IndexTable>),
    RowSum(Var),
    RowNorm(Var),
    Sum(Var),
    Mean(Var),
    WeightedBce {
        logits: Var,
        labels: Arc<[f64]>,
        pos_weight: f64,
        divisor: f64,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    /// Whether any parameter lies upstream, so backward has to visit it.
    needs_grad: bool,
}

impl Op {
    fn any_input(&self, f: impl Fn(Var) -> bool) -> bool {
        match self {
            Op::Leaf => false,
            Op::Param => true,
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulCol(a, b)
            | Op::GatherDot(a, b, _)
            | Op::GatherCombine(a, b, _) => f(*a) || f(*b),
            Op::SparseMatMul(_, a)
            | Op::Scale(a, _)
            | Op::Shift(a)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::RowSoftmax(a)
            | Op::LayerNorm(a, _)
            | Op::SliceCols(a, _)
            | Op::SliceRows(a, _)
            | Op::GatherRows(a, _)
            | Op::RowSum(a)
            | Op::RowNorm(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::WeightedBce { logits: a, .. } => f(*a),
            Op::ConcatCols(parts) | Op::ConcatRows(parts) => parts.iter().any(|&p| f(p)),
        }
    }
}

/// Operation record for one forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<Option<Var>>,
}

fn same_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dimension(op, a.shape(), b.shape()));
    }
    Ok(())
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        let needs_grad = op.any_input(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// The named parameter as a differentiable leaf. Repeated calls return
    /// the same node so gradients accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let idx = store
            .index_of(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if self.params.len() < store.len() {
            self.params.resize(store.len(), None);
        }
        if let Some(v) = self.params[idx] {
            return Ok(v);
        }
        let v = self.push(store.by_index(idx).1.clone(), Op::Param);
        self.params[idx] = Some(v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// Product of a constant sparse operator with `x`.
    pub fn sparse_matmul(&mut self, s: &Arc<SparseRows>, x: Var) -> Result<Var> {
        let out = s.matmul_dense(self.value(x))?;
        Ok(self.push(out, Op::SparseMatMul(Arc::clone(s), x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let mut out = self.value(a).clone();
        for (o, b) in out.as_mut_slice().iter_mut().zip(self.value(b).as_slice()) {
            *o -= b;
        }
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let mut out = self.value(a).clone();
        for (o, b) in out.as_mut_slice().iter_mut().zip(self.value(b).as_slice()) {
            *o *= b;
        }
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Adds the 1xC row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(bias) != (1, c) {
            return Err(Error::dimension("add_row", (r, c), self.shape(bias)));
        }
        let mut out = self.value(a).clone();
        let b = self.value(bias).as_slice().to_vec();
        for i in 0..r {
            for (o, b) in out.row_mut(i).iter_mut().zip(&b) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, bias)))
    }

    /// Scales row `i` of `a` by `col[i]` (col is Rx1).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(col) != (r, 1) {
            return Err(Error::dimension("mul_col", (r, c), self.shape(col)));
        }
        let mut out = self.value(a).clone();
        for i in 0..r {
            let s = self.value(col).get(i, 0);
            for o in out.row_mut(i) {
                *o *= s;
            }
        }
        Ok(self.push(out, Op::MulCol(a, col)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|v| v * factor);
        self.push(out, Op::Scale(a, factor))
    }

    /// `a + offset` elementwise.
    pub fn shift(&mut self, a: Var, offset: f64) -> Var {
        let out = self.value(a).map(|v| v + offset);
        self.push(out, Op::Shift(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    /// Softmax along each row, stabilized by subtracting the row maximum.
    pub fn row_softmax(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        self.push(out, Op::RowSoftmax(a))
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)`, no affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let mut out = self.value(a).clone();
        let cols = out.cols() as f64;
        let mut inv_std = Vec::with_capacity(out.rows());
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let mean = row.iter().sum::<f64>() / cols;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols;
            let s = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * s;
            }
            inv_std.push(s);
        }
        self.push(out, Op::LayerNorm(a, inv_std))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0]).0;
        let mut cols = 0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(Error::dimension("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            cols += self.shape(p).1;
        }
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(i);
                out.row_mut(i)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        for &p in parts {
            if self.shape(p).1 != cols {
                return Err(Error::dimension("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            data.extend_from_slice(self.value(p).as_slice());
        }
        let rows = data.len() / cols.max(1);
        let out = Matrix::from_vec(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start >= end || end > c {
            return Err(Error::Shape(format!("column slice {start}..{end} of {r}x{c}")));
        }
        let idx: Vec<usize> = (start..end).collect();
        let out = self.value(a).select_cols(&idx);
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start >= end || end > r {
            return Err(Error::Shape(format!("row slice {start}..{end} of {r}x{c}")));
        }
        let out = Matrix::from_vec(end - start, c, self.value(a).as_slice()[start * c..end * c].to_vec())?;
        Ok(self.push(out, Op::SliceRows(a, start)))
    }

    /// Row `t` of the output is row `index[t]` of `a`.
    pub fn gather_rows(&mut self, a: Var, index: &Arc<[usize]>) -> Result<Var> {
        let r = self.shape(a).0;
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(Error::Shape(format!("gather index {bad} out of range for {r} rows")));
        }
        let out = self.value(a).select_rows(index);
        Ok(self.push(out, Op::GatherRows(a, Arc::clone(index))))
    }

    /// `out[i][t] = <a_i, b_{index[i][t]}>`.
    pub fn gather_dot(&mut self, a: Var, b: Var, index: &Arc<IndexTable>) -> Result<Var> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ca != cb || index.rows() != ra || index.max_index().is_some_and(|m| m >= rb) {
            return Err(Error::dimension("gather_dot", (ra, ca), (rb, cb)));
        }
        let w = index.width();
        let mut out = Matrix::zeros(ra, w);
        let (av, bv) = (self.value(a), self.value(b));
        for i in 0..ra {
            let ai = av.row(i);
            for (t, &j) in index.row(i).iter().enumerate() {
                out.set(i, t, ai.iter().zip(bv.row(j)).map(|(x, y)| x * y).sum());
            }
        }
        Ok(self.push(out, Op::GatherDot(a, b, Arc::clone(index))))
    }

    /// `out_i = sum_t weights[i][t] * values_{index[i][t]}`.
    pub fn gather_combine(&mut self, weights: Var, values: Var, index: &Arc<IndexTable>) -> Result<Var> {
        let (rw, cw) = self.shape(weights);
        let (rv, cv) = self.shape(values);
        if cw != index.width() || rw != index.rows() || index.max_index().is_some_and(|m| m >= rv) {
            return Err(Error::dimension("gather_combine", (rw, cw), (rv, cv)));
        }
        let mut out = Matrix::zeros(rw, cv);
        let (wv, vv) = (self.value(weights), self.value(values));
        for i in 0..rw {
            for (t, &j) in index.row(i).iter().enumerate() {
                let w = wv.get(i, t);
                for (o, v) in out.row_mut(i).iter_mut().zip(vv.row(j)) {
                    *o += w * v;
                }
            }
        }
        Ok(self.push(out, Op::GatherCombine(weights, values, Arc::clone(index))))
    }

    /// Rx1 column of row sums.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let sums: Vec<f64> = (0..m.rows()).map(|i| m.row(i).iter().sum()).collect();
        self.push(Matrix::column(&sums), Op::RowSum(a))
    }

    /// Rx1 column of Euclidean row norms. The (sub)gradient at a zero row is 0.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let norms: Vec<f64> = (0..m.rows())
            .map(|i| m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        self.push(Matrix::column(&norms), Op::RowNorm(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).as_slice().iter().sum();
        self.push(Matrix::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        if m.is_empty() {
            return Err(Error::Shape("mean of an empty matrix".into()));
        }
        let s = m.as_slice().iter().sum::<f64>() / m.len() as f64;
        Ok(self.push(Matrix::scalar(s), Op::Mean(a)))
    }

    /// Positive-weighted binary cross-entropy on raw logits:
    /// `w*y*softplus(-z) + (1-y)*softplus(z)`, reduced over entries.
    pub fn weighted_bce(&mut self, logits: Var, labels: &Arc<[f64]>, pos_weight: f64, reduction: Reduction) -> Result<Var> {
        let z = self.value(logits);
        if z.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} logits for {} labels",
                z.len(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::Shape("cross-entropy over an empty pair list".into()));
        }
        let total: f64 = z
            .as_slice()
            .iter()
            .zip(labels.iter())
            .map(|(&z, &y)| pos_weight * y * softplus(-z) + (1.0 - y) * softplus(z))
            .sum();
        let divisor = match reduction {
            Reduction::Mean => labels.len() as f64,
            Reduction::Sum => 1.0,
        };
        Ok(self.push(
            Matrix::scalar(total / divisor),
            Op::WeightedBce {
                logits,
                labels: Arc::clone(labels),
                pos_weight,
                divisor,
            },
        ))
    }

    /// Gradients of the scalar `loss` with respect to every parameter in
    /// `store`; parameters that did not take part get zeros.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        let needs = |v: Var| self.nodes[v.0].needs_grad;
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param => grads[id] = Some(g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if needs(*a) {
                        let mut ga = Matrix::zeros(av.rows(), av.cols());
                        gemm(&g, false, bv, true, &mut ga, false);
                        accumulate(&mut grads, *a, ga);
                    }
                    if needs(*b) {
                        let mut gb = Matrix::zeros(bv.rows(), bv.cols());
                        gemm(av, true, &g, false, &mut gb, false);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::SparseMatMul(_, x) if !needs(*x) => {}
                Op::SparseMatMul(s, x) => {
                    let (r, c) = self.shape(*x);
                    let mut gx = Matrix::zeros(r, c);
                    s.transpose_matmul_into(&g, &mut gx);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|v| -v));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        accumulate(&mut grads, *a, zip_map(&g, self.value(*b), |g, b| g * b));
                    }
                    if needs(*b) {
                        accumulate(&mut grads, *b, zip_map(&g, self.value(*a), |g, a| g * a));
                    }
                }
                Op::AddRow(a, bias) => {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (o, v) in gb.as_mut_slice().iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *bias, gb);
                    accumulate(&mut grads, *a, g);
                }
                Op::MulCol(a, col) => {
                    let (av, cv) = (self.value(*a), self.value(*col));
                    let mut ga = g.clone();
                    let mut gc = Matrix::zeros(cv.rows(), 1);
                    for i in 0..g.rows() {
                        let s = cv.get(i, 0);
                        gc.set(i, 0, g.row(i).iter().zip(av.row(i)).map(|(g, a)| g * a).sum());
                        for v in ga.row_mut(i) {
                            *v *= s;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *col, gc);
                }
                Op::Scale(a, f) => accumulate(&mut grads, *a, g.map(|v| v * f)),
                Op::Shift(a) => accumulate(&mut grads, *a, g),
                Op::Relu(a) => {
                    let ga = zip_map(&g, self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = zip_map(&g, &node.value, |g, y| g * (1.0 - y * y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = zip_map(&g, &node.value, |g, y| g * y * (1.0 - y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowSoftmax(a) => {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let dot: f64 = g.row(i).iter().zip(y.row(i)).map(|(g, y)| g * y).sum();
                        for ((o, gv), yv) in ga.row_mut(i).iter_mut().zip(g.row(i)).zip(y.row(i)) {
                            *o = yv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm(a, inv_std) => {
                    let y = &node.value;
                    let n = y.cols() as f64;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let (gi, yi) = (g.row(i), y.row(i));
                        let mean_g = gi.iter().sum::<f64>() / n;
                        let mean_gy = gi.iter().zip(yi).map(|(g, y)| g * y).sum::<f64>() / n;
                        for ((o, gv), yv) in ga.row_mut(i).iter_mut().zip(gi).zip(yi) {
                            *o = inv_std[i] * (gv - mean_g - yv * mean_gy);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let c = self.shape(p).1;
                        let idx: Vec<usize> = (off..off + c).collect();
                        accumulate(&mut grads, p, g.select_cols(&idx));
                        off += c;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (r, c) = self.shape(p);
                        let part = Matrix::from_vec(r, c, g.as_slice()[off * c..(off + r) * c].to_vec())?;
                        accumulate(&mut grads, p, part);
                        off += r;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Matrix::zeros(r, c);
                    for i in 0..r {
                        ga.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Matrix::zeros(r, c);
                    ga.as_mut_slice()[start * c..start * c + g.len()].copy_from_slice(g.as_slice());
                    accumulate(&mut grads, *a, ga);
                }
                Op::GatherRows(a, index) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Matrix::zeros(r, c);
                    for (t, &i) in index.iter().enumerate() {
                        for (o, v) in ga.row_mut(i).iter_mut().zip(g.row(t)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::GatherDot(a, b, index) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut ga = Matrix::zeros(av.rows(), av.cols());
                    let mut gb = Matrix::zeros(bv.rows(), bv.cols());
                    for i in 0..av.rows() {
                        for (t, &j) in index.row(i).iter().enumerate() {
                            let w = g.get(i, t);
                            if w == 0.0 {
                                continue;
                            }
                            for (o, v) in ga.row_mut(i).iter_mut().zip(bv.row(j)) {
                                *o += w * v;
                            }
                            for (o, v) in gb.row_mut(j).iter_mut().zip(av.row(i)) {
                                *o += w * v;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::GatherCombine(w, v, index) => {
                    let (wv, vv) = (self.value(*w), self.value(*v));
                    let mut gw = Matrix::zeros(wv.rows(), wv.cols());
                    let mut gv = Matrix::zeros(vv.rows(), vv.cols());
                    for i in 0..wv.rows() {
                        let gi = g.row(i);
                        for (t, &j) in index.row(i).iter().enumerate() {
                            gw.set(i, t, gi.iter().zip(vv.row(j)).map(|(a, b)| a * b).sum());
                            let weight = wv.get(i, t);
                            for (o, x) in gv.row_mut(j).iter_mut().zip(gi) {
                                *o += weight * x;
                            }
                        }
                    }
                    accumulate(&mut grads, *w, gw);
                    accumulate(&mut grads, *v, gv);
                }
                Op::RowSum(a) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Matrix::zeros(r, c);
                    for i in 0..r {
                        ga.row_mut(i).fill(g.get(i, 0));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowNorm(a) => {
                    let av = self.value(*a);
                    let mut ga = Matrix::zeros(av.rows(), av.cols());
                    for i in 0..av.rows() {
                        let norm = node.value.get(i, 0);
                        if norm > 0.0 {
                            let s = g.get(i, 0) / norm;
                            for (o, x) in ga.row_mut(i).iter_mut().zip(av.row(i)) {
                                *o = s * x;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let (r, c) = self.shape(*a);
                    accumulate(&mut grads, *a, Matrix::filled(r, c, g.get(0, 0)));
                }
                Op::Mean(a) => {
                    let (r, c) = self.shape(*a);
                    let n = (r * c) as f64;
                    accumulate(&mut grads, *a, Matrix::filled(r, c, g.get(0, 0) / n));
                }
                Op::WeightedBce {
                    logits,
                    labels,
                    pos_weight,
                    divisor,
                } => {
                    let z = self.value(*logits);
                    let scale = g.get(0, 0) / divisor;
                    let gz: Vec<f64> = z
                        .as_slice()
                        .iter()
                        .zip(labels.iter())
                        .map(|(&z, &y)| {
                            let p = sigmoid(z);
                            scale * (pos_weight * y * (p - 1.0) + (1.0 - y) * p)
                        })
                        .collect();
                    accumulate(&mut grads, *logits, Matrix::from_vec(z.rows(), z.cols(), gz)?);
                }
            }
        }

        let mut out = store.zeros_like();
        for (idx, var) in self.params.iter().enumerate() {
            if let Some(var) = var {
                if let Some(g) = grads[var.0].take() {
                    out.tensors[idx] = g;
                }
            }
        }
        Ok(out)
    }
}

fn zip_map(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a.as_slice().iter().zip(b.as_slice()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}
