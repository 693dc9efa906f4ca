use std::collections::HashMap;

use rand::Rng;

use super::params::{Gradients, ParamId, ParamStore};
use super::{Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Dropout(Var, Vec<T>),
    Normalize(Var, Vec<T>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    MeanRows(Var),
    Sum(Var),
    /// Per-element derivative of the loss w.r.t. the prediction.
    Bce(Var, Vec<T>),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records forward operations in execution order and replays them backwards.
///
/// A tape is single-use: build the forward pass, call [`Tape::backward`] once,
/// then read gradients. Parameters are bound by id and their gradients
/// collected with [`Tape::param_grads`].
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &Tensor<impl Real>, b: &Tensor<impl Real>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// `a (m x k) * b (k x n)`
fn mm<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `a (m x k) * b^T` where `b` is `n x k`
fn mm_nt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).fold(T::zero(), |s, (&x, &y)| s + x * y);
        }
    }
    out
}

/// `a^T * b` where `a` is `k x m` and `b` is `k x n`
fn mm_tn<T: Real>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            bound: HashMap::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFiniteValue(name));
        }
        let requires_grad = match &op {
            Op::Leaf | Op::Param => false,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) | Op::MulRow(a, b) => {
                self.rg(*a) || self.rg(*b)
            }
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Softmax(a)
            | Op::Dropout(a, _)
            | Op::Normalize(a, _)
            | Op::GatherRows(a, _)
            | Op::MeanRows(a)
            | Op::Sum(a)
            | Op::Bce(a, _) => self.rg(*a),
            Op::ConcatRows(xs) | Op::ConcatCols(xs) => xs.iter().any(|x| self.rg(*x)),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    /// Records a constant (no gradient) matrix.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value.as_matrix(), Op::Leaf, "constant")
    }

    /// Records a leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor<T>) -> Result<Var> {
        let v = self.push(value.as_matrix(), Op::Leaf, "leaf")?;
        self.nodes[v.0].requires_grad = true;
        Ok(v)
    }

    /// Binds a parameter; repeated binds of the same id return the same handle.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.bound.get(&id) {
            return Ok(v);
        }
        let p = store.get(id);
        let v = self.push(p.value.as_matrix(), Op::Param, "param")?;
        self.nodes[v.0].requires_grad = !p.frozen;
        self.bound.insert(id, v);
        Ok(v)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Result<Var> {
        self.constant(Tensor::zeros(&[rows, cols]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        if tb.rows() != k {
            return Err(mismatch("matmul", ta, tb));
        }
        let out = Tensor::matrix(m, n, mm(ta.data(), tb.data(), m, k, n))?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let out = Tensor::matrix(c, r, transpose(t.data(), r, c))?;
        self.push(out, Op::Transpose(a), "transpose")
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if (ta.rows(), ta.cols()) != (tb.rows(), tb.cols()) {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::matrix(ta.rows(), ta.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    fn zip_row(&mut self, x: Var, row: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (tx, tr) = (self.value(x), self.value(row));
        if tr.rows() != 1 || tr.cols() != tx.cols() {
            return Err(mismatch(name, tx, tr));
        }
        let c = tx.cols();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, tr.data()[i % c]))
            .collect();
        Tensor::matrix(tx.rows(), c, data)
    }

    /// Adds a `1 x n` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let out = self.zip_row(x, row, "add_row", |a, b| a + b)?;
        self.push(out, Op::AddRow(x, row), "add_row")
    }

    /// Multiplies every row of `x` elementwise by a `1 x n` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let out = self.zip_row(x, row, "mul_row", |a, b| a * b)?;
        self.push(out, Op::MulRow(x, row), "mul_row")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let c = T::of(factor);
        let t = self.value(x);
        let out = Tensor::matrix(t.rows(), t.cols(), t.data().iter().map(|&v| v * c).collect())?;
        self.push(out, Op::Scale(x, c), "scale")
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T) -> Result<Tensor<T>> {
        let t = self.value(x);
        Tensor::matrix(t.rows(), t.cols(), t.data().iter().map(|&v| f(v)).collect())
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, |v| if v > T::zero() { v } else { T::zero() })?;
        self.push(out, Op::Relu(x), "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, |v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        })?;
        self.push(out, Op::Sigmoid(x), "sigmoid")
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.softmax_rows_masked(x, None)
    }

    /// Row softmax where `keep[j] == false` excludes column `j`, as if its
    /// logit were minus infinity. Excluded columns get probability zero.
    pub fn softmax_rows_masked(&mut self, x: Var, keep: Option<&[bool]>) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        if let Some(keep) = keep {
            if keep.len() != c {
                return Err(TensorError::ShapeMismatch {
                    op: "softmax_rows_masked",
                    lhs: vec![r, c],
                    rhs: vec![keep.len()],
                });
            }
        }
        let live = |j: usize| keep.is_none_or(|k| k[j]);
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            let row = t.row(i);
            let max = (0..c)
                .filter(|&j| live(j))
                .map(|j| row[j])
                .fold(T::neg_infinity(), T::max);
            if max == T::neg_infinity() {
                return Err(TensorError::NonFiniteValue("softmax over fully masked row"));
            }
            let mut sum = T::zero();
            for j in (0..c).filter(|&j| live(j)) {
                let e = (row[j] - max).exp();
                data[i * c + j] = e;
                sum = sum + e;
            }
            data[i * c..(i + 1) * c].iter_mut().for_each(|v| *v = *v / sum);
        }
        let out = Tensor::matrix(r, c, data)?;
        self.push(out, Op::Softmax(x), "softmax")
    }

    /// Inverted dropout. Returns `x` itself when not training or `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64, train: bool, rng: &mut impl Rng) -> Result<Var> {
        if !train || rate <= 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let n = self.value(x).len();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::matrix(t.rows(), t.cols(), data)?;
        self.push(out, Op::Dropout(x, mask), "dropout")
    }

    /// Per-row standardisation `(x - mean) / sqrt(var + eps)` without affine terms.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        let n = T::of(c as f64);
        let mut data = vec![T::zero(); r * c];
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = t.row(i);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + T::of(eps)).sqrt();
            for j in 0..c {
                data[i * c + j] = (row[j] - mean) * inv;
            }
            inv_std.push(inv);
        }
        let out = Tensor::matrix(r, c, data)?;
        self.push(out, Op::Normalize(x, inv_std), "normalize_rows")
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let n = self.normalize_rows(x, eps)?;
        let g = self.mul_row(n, gain)?;
        self.add_row(g, bias)
    }

    /// Stacks matrices vertically. Inputs with zero rows are allowed.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or(TensorError::ShapeMismatch {
            op: "concat_rows",
            lhs: vec![],
            rhs: vec![],
        })?;
        let c = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let t = self.value(x);
            if t.cols() != c {
                return Err(mismatch("concat_rows", self.value(*first), t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        if xs.len() == 1 {
            return Ok(*first);
        }
        let out = Tensor::matrix(rows, c, data)?;
        self.push(out, Op::ConcatRows(xs.to_vec()), "concat_rows")
    }

    /// Joins matrices side by side.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or(TensorError::ShapeMismatch {
            op: "concat_cols",
            lhs: vec![],
            rhs: vec![],
        })?;
        if xs.len() == 1 {
            return Ok(*first);
        }
        let r = self.value(*first).rows();
        let widths: Vec<usize> = xs.iter().map(|&x| self.value(x).cols()).collect();
        for &x in xs {
            if self.value(x).rows() != r {
                return Err(mismatch("concat_cols", self.value(*first), self.value(x)));
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &x in xs {
                data.extend_from_slice(self.value(x).row(i));
            }
        }
        let out = Tensor::matrix(r, total, data)?;
        self.push(out, Op::ConcatCols(xs.to_vec()), "concat_cols")
    }

    /// Selects rows by index, e.g. an embedding lookup into a table parameter.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let c = t.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= t.rows() {
                return Err(TensorError::IndexOutOfRange { index: i, len: t.rows() });
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::matrix(idx.len(), c, data)?;
        self.push(out, Op::GatherRows(table, idx.to_vec()), "gather_rows")
    }

    pub fn embedding_lookup(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        self.gather_rows(table, idx)
    }

    /// Arithmetic mean over rows, giving `1 x n`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        if r == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "mean_rows",
                lhs: vec![r, c],
                rhs: vec![],
            });
        }
        let mut data = vec![T::zero(); c];
        for i in 0..r {
            for (d, &v) in data.iter_mut().zip(t.row(i)) {
                *d = *d + v;
            }
        }
        let n = T::of(r as f64);
        data.iter_mut().for_each(|d| *d = *d / n);
        let out = Tensor::matrix(1, c, data)?;
        self.push(out, Op::MeanRows(x), "mean_rows")
    }

    /// Elementwise mean of equally shaped matrices.
    pub fn mean_of(&mut self, xs: &[Var]) -> Result<Var> {
        let mut acc = *xs.first().ok_or(TensorError::ShapeMismatch {
            op: "mean_of",
            lhs: vec![],
            rhs: vec![],
        })?;
        if xs.len() == 1 {
            return Ok(acc);
        }
        for &x in &xs[1..] {
            acc = self.add(acc, x)?;
        }
        self.scale(acc, 1.0 / xs.len() as f64)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::matrix(1, 1, vec![s])?, Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean binary cross-entropy of predictions in (0, 1) against 0/1 targets.
    /// Predictions are clamped to `[eps, 1 - eps]`; the clamped region has zero
    /// gradient. Optional per-sample weights multiply each term.
    pub fn bce_mean(&mut self, pred: Var, targets: &[T], weights: Option<&[T]>, eps: f64) -> Result<Var> {
        let t = self.value(pred);
        let b = t.len();
        if targets.len() != b || weights.is_some_and(|w| w.len() != b) {
            return Err(TensorError::ShapeMismatch {
                op: "bce_mean",
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let (lo, hi) = (T::of(eps), T::of(1.0 - eps));
        let inv_b = T::one() / T::of(b as f64);
        let mut loss = T::zero();
        let mut coeff = Vec::with_capacity(b);
        for (i, (&p, &y)) in t.data().iter().zip(targets).enumerate() {
            let w = weights.map_or(T::one(), |w| w[i]);
            let pc = p.max(lo).min(hi);
            loss = loss - w * (y * pc.ln() + (T::one() - y) * (T::one() - pc).ln());
            let d = if p > lo && p < hi {
                w * (p - y) / (p * (T::one() - p)) * inv_b
            } else {
                T::zero()
            };
            coeff.push(d);
        }
        let out = Tensor::matrix(1, 1, vec![loss * inv_b])?;
        self.push(out, Op::Bce(pred, coeff), "bce_mean")
    }

    /// Reverse pass from a `1 x 1` loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(TensorError::NotScalar(lt.shape().to_vec()));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        for (&id, &v) in &self.bound {
            if let Some(g) = &self.grads[v.0] {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(TensorError::NonFiniteGradient(format!("parameter #{}", id.0)));
                }
            }
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, contribution: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.iter_mut().zip(contribution).for_each(|(a, c)| *a = *a + c),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn backprop_node(&mut self, i: usize, g: &[T]) {
        // ops are immutable once recorded; borrow the pieces we need up front
        let node = &self.nodes[i];
        let (rows, cols) = (node.value.rows(), node.value.cols());
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (ta, tb) = (self.value(a), self.value(b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                let da = self.rg(a).then(|| mm_nt(g, tb.data(), m, n, k));
                let db = self.rg(b).then(|| mm_tn(ta.data(), g, m, k, n));
                if let Some(da) = da {
                    self.acc(a, da);
                }
                if let Some(db) = db {
                    self.acc(b, db);
                }
            }
            Op::Transpose(a) => {
                let a = *a;
                self.acc(a, transpose(g, rows, cols));
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.acc(a, g.to_vec());
                self.acc(b, g.to_vec());
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.acc(a, g.to_vec());
                self.acc(b, g.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let da: Vec<T> = g.iter().zip(self.value(b).data()).map(|(&g, &y)| g * y).collect();
                let db: Vec<T> = g.iter().zip(self.value(a).data()).map(|(&g, &x)| g * x).collect();
                self.acc(a, da);
                self.acc(b, db);
            }
            Op::AddRow(x, r) => {
                let (x, r) = (*x, *r);
                let mut dr = vec![T::zero(); cols];
                for (j, &gv) in g.iter().enumerate() {
                    dr[j % cols] = dr[j % cols] + gv;
                }
                self.acc(x, g.to_vec());
                self.acc(r, dr);
            }
            Op::MulRow(x, r) => {
                let (x, r) = (*x, *r);
                let (tx, tr) = (self.value(x), self.value(r));
                let dx: Vec<T> = g.iter().enumerate().map(|(j, &gv)| gv * tr.data()[j % cols]).collect();
                let mut dr = vec![T::zero(); cols];
                for (j, (&gv, &xv)) in g.iter().zip(tx.data()).enumerate() {
                    dr[j % cols] = dr[j % cols] + gv * xv;
                }
                self.acc(x, dx);
                self.acc(r, dr);
            }
            Op::Scale(x, c) => {
                let (x, c) = (*x, *c);
                self.acc(x, g.iter().map(|&v| v * c).collect());
            }
            Op::Relu(x) => {
                let x = *x;
                let dx = g
                    .iter()
                    .zip(self.value(x).data())
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                self.acc(x, dx);
            }
            Op::Sigmoid(x) => {
                let x = *x;
                let dx = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gv, &y)| gv * y * (T::one() - y))
                    .collect();
                self.acc(x, dx);
            }
            Op::Softmax(x) => {
                let x = *x;
                let y = node.value.data();
                let mut dx = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    let (yr, gr) = (&y[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&a, &b)| s + a * b);
                    for j in 0..cols {
                        dx[r * cols + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(x, dx);
            }
            Op::Dropout(x, mask) => {
                let x = *x;
                let dx = g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                self.acc(x, dx);
            }
            Op::Normalize(x, inv_std) => {
                let x = *x;
                let y = node.value.data();
                let n = T::of(cols as f64);
                let mut dx = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    let (yr, gr) = (&y[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    let mean_g = gr.iter().copied().sum::<T>() / n;
                    let mean_gy = yr.iter().zip(gr).fold(T::zero(), |s, (&a, &b)| s + a * b) / n;
                    for j in 0..cols {
                        dx[r * cols + j] = inv_std[r] * (gr[j] - mean_g - yr[j] * mean_gy);
                    }
                }
                self.acc(x, dx);
            }
            Op::ConcatRows(xs) => {
                let xs = xs.clone();
                let mut offset = 0;
                for x in xs {
                    let n = self.value(x).len();
                    self.acc(x, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::ConcatCols(xs) => {
                let xs = xs.clone();
                let mut start = 0;
                for x in xs {
                    let w = self.value(x).cols();
                    let mut dx = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        dx.extend_from_slice(&g[r * cols + start..r * cols + start + w]);
                    }
                    self.acc(x, dx);
                    start += w;
                }
            }
            Op::GatherRows(table, idx) => {
                let table = *table;
                let mut dt = vec![T::zero(); self.value(table).len()];
                for (r, &ix) in idx.iter().enumerate() {
                    for j in 0..cols {
                        dt[ix * cols + j] = dt[ix * cols + j] + g[r * cols + j];
                    }
                }
                self.acc(table, dt);
            }
            Op::MeanRows(x) => {
                let x = *x;
                let r = self.value(x).rows();
                let inv = T::one() / T::of(r as f64);
                let dx = (0..r * cols).map(|j| g[j % cols] * inv).collect();
                self.acc(x, dx);
            }
            Op::Sum(x) => {
                let x = *x;
                let n = self.value(x).len();
                self.acc(x, vec![g[0]; n]);
            }
            Op::Bce(x, coeff) => {
                let x = *x;
                let dx = coeff.iter().map(|&c| c * g[0]).collect();
                self.acc(x, dx);
            }
        }
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every bound, non-frozen parameter.
    pub fn param_grads(&self, store: &ParamStore<T>) -> Gradients<T> {
        let mut out = Gradients::with_len(store.len());
        let mut bound: Vec<(ParamId, Var)> = self.bound.iter().map(|(&p, &v)| (p, v)).collect();
        bound.sort_unstable_by_key(|(p, _)| *p);
        for (id, v) in bound {
            if let Some(g) = self.grad(v) {
                out.accumulate(id, g);
            }
        }
        out
    }
}
