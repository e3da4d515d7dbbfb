//! Reverse-mode automatic differentiation over a recorded operation list.
//!
//! A [`Graph`] borrows a [`ParamStore`] read-only, records every operation
//! as a node in creation order (which is a topological order), and
//! [`Graph::backward`] walks the nodes once in reverse.

use std::borrow::Cow;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{log_softmax_rows, softmax_rows, Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Gather(ParamId, Vec<usize>),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Elu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Sum(Var),
    SumRows(Var),
    Pick(Var, Vec<usize>),
    BroadcastRows(Var),
    Reshape(Var),
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op,
}

/// A single-use computation graph.
pub struct Graph<'a, T: Scalar = f32> {
    params: &'a ParamStore<T>,
    nodes: Vec<Node<'a, T>>,
}

fn elu<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        x
    } else {
        x.exp() - T::one()
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new(params: &'a ParamStore<T>) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'a ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, value: Tensor<T>, op: Op) -> Var {
        self.push(Cow::Owned(value), op)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    /// A constant input; receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        let value = value.as_matrix();
        self.push_owned(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let params = self.params;
        self.push(Cow::Borrowed(params.get(id)), Op::Param(id))
    }

    /// Selects rows of a parameter matrix (embedding lookup).
    pub fn gather(&mut self, id: ParamId, rows: &[usize]) -> Result<Var> {
        let table = self.params.get(id);
        if rows.is_empty() {
            return Err(Error::Graph("gather: empty index list".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * table.cols());
        for &r in rows {
            if r >= table.rows() {
                return Err(Error::IndexOutOfRange {
                    table: self.params.name(id).to_string(),
                    index: r,
                    size: table.rows(),
                });
            }
            data.extend_from_slice(table.row_slice(r));
        }
        let value = Tensor::matrix(rows.len(), table.cols(), data)?;
        Ok(self.push_owned(value, Op::Gather(id, rows.to_vec())))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push_owned(value, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push_owned(value, Op::MatMulT(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push_owned(value, Op::Add(a, b)))
    }

    /// Adds a `1 × k` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, cols) = self.shape(a);
        if self.shape(row) != (1, cols) {
            return Err(Error::shape(
                "add_row",
                self.value(a).shape(),
                self.value(row).shape(),
            ));
        }
        let r = self.value(row).data().to_vec();
        let mut value = self.value(a).clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v = *v + r[i % cols];
        }
        Ok(self.push_owned(value, Op::AddRow(a, row)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push_owned(value, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push_owned(value, Op::Mul(a, b)))
    }

    /// `scale · a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let (s, b) = (T::of(scale), T::of(shift));
        let value = self.value(a).map(|x| s * x + b);
        self.push_owned(value, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.affine(a, k, 0.0)
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push_owned(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.tanh());
        self.push_owned(value, Op::Tanh(a))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(elu);
        self.push_owned(value, Op::Elu(a))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        self.push_owned(value, Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let value = log_softmax_rows(self.value(a));
        self.push_owned(value, Op::LogSoftmax(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Graph("concat_cols: no inputs".into()))?;
        let rows = self.shape(first).0;
        let mut cols = 0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(Error::shape(
                    "concat_cols",
                    self.value(first).shape(),
                    self.value(p).shape(),
                ));
            }
            cols += self.shape(p).1;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let value = Tensor::matrix(rows, cols, data)?;
        Ok(self.push_owned(value, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Graph("concat_rows: no inputs".into()))?;
        let cols = self.shape(first).1;
        let mut data = Vec::new();
        for &p in parts {
            if self.shape(p).1 != cols {
                return Err(Error::shape(
                    "concat_rows",
                    self.value(first).shape(),
                    self.value(p).shape(),
                ));
            }
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / cols;
        let value = Tensor::matrix(rows, cols, data)?;
        Ok(self.push_owned(value, Op::ConcatRows(parts.to_vec())))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if start >= end || end > cols {
            return Err(Error::Graph(format!(
                "slice_cols: {start}..{end} out of 0..{cols}"
            )));
        }
        let src = self.value(a);
        let value = Tensor::from_fn(rows, end - start, |r, c| src.get(r, start + c));
        Ok(self.push_owned(value, Op::SliceCols(a, start)))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if start >= end || end > rows {
            return Err(Error::Graph(format!(
                "slice_rows: {start}..{end} out of 0..{rows}"
            )));
        }
        let data = self.value(a).data()[start * cols..end * cols].to_vec();
        let value = Tensor::matrix(end - start, cols, data)?;
        Ok(self.push_owned(value, Op::SliceRows(a, start)))
    }

    pub fn row(&mut self, a: Var, r: usize) -> Result<Var> {
        self.slice_rows(a, r, r + 1)
    }

    /// Sum of all entries as a `1 × 1` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push_owned(value, Op::Sum(a))
    }

    /// Column sums: `n × k → 1 × k`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut out = Tensor::zeros(1, src.cols());
        for r in 0..src.rows() {
            for (o, &v) in out.data_mut().iter_mut().zip(src.row_slice(r)) {
                *o = *o + v;
            }
        }
        self.push_owned(out, Op::SumRows(a))
    }

    /// Picks entry `indices[r]` from each row `r`, giving an `n × 1` column.
    pub fn pick(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if indices.len() != rows || indices.iter().any(|&i| i >= cols) {
            return Err(Error::Graph(format!(
                "pick: {} indices for a {rows}×{cols} input",
                indices.len()
            )));
        }
        let src = self.value(a);
        let data = indices
            .iter()
            .enumerate()
            .map(|(r, &c)| src.get(r, c))
            .collect();
        let value = Tensor::matrix(rows, 1, data)?;
        Ok(self.push_owned(value, Op::Pick(a, indices.to_vec())))
    }

    /// Repeats a `1 × k` row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if rows != 1 || n == 0 {
            return Err(Error::shape(
                "broadcast_rows",
                self.value(a).shape(),
                &[n, cols],
            ));
        }
        let row = self.value(a).data().to_vec();
        let value = Tensor::from_fn(n, cols, |_, c| row[c]);
        Ok(self.push_owned(value, Op::BroadcastRows(a)))
    }

    /// Same data, new `rows × cols` layout.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let src = self.value(a);
        if rows * cols != src.len() {
            return Err(Error::shape("reshape", src.shape(), &[rows, cols]));
        }
        let value = Tensor::matrix(rows, cols, src.data().to_vec())?;
        Ok(self.push_owned(value, Op::Reshape(a)))
    }

    /// Inverted dropout: kept units are scaled by `1 / (1 - p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(a);
        }
        let (rows, cols) = self.shape(a);
        let mask = dropout_mask(rows, cols, p, rng);
        let m = self.constant(mask);
        self.mul(a, m)
    }

    /// Runs reverse accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Graph(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        let mut out = Gradients::new(self.params.len());

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let y = &*node.value;
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.accumulate(*id, &gy),
                Op::Gather(id, rows) => {
                    let table = self.params.get(*id);
                    let slot = out.slot_mut(*id, table.rows(), table.cols());
                    for (r, &src) in rows.iter().enumerate() {
                        for (g, &d) in slot.row_slice_mut(src).iter_mut().zip(gy.row_slice(r)) {
                            *g = *g + d;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let ga = gy.matmul_t(self.value(*b))?;
                    let gb = self.value(*a).t_matmul(&gy)?;
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = gy.matmul(self.value(*b))?;
                    let gb = gy.t_matmul(self.value(*a))?;
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, gy.clone());
                    acc(&mut grads, *b, gy);
                }
                Op::AddRow(a, row) => {
                    acc(&mut grads, *row, column_sums(&gy));
                    acc(&mut grads, *a, gy);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, gy.clone());
                    acc(&mut grads, *b, gy.map(|g| -g));
                }
                Op::Mul(a, b) => {
                    let ga = gy.zip_map(self.value(*b), |g, v| g * v);
                    let gb = gy.zip_map(self.value(*a), |g, v| g * v);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Affine(a, scale) => {
                    let s = T::of(*scale);
                    acc(&mut grads, *a, gy.map(|g| g * s));
                }
                Op::Sigmoid(a) => {
                    let ga = gy.zip_map(y, |g, s| g * s * (T::one() - s));
                    acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = gy.zip_map(y, |g, t| g * (T::one() - t * t));
                    acc(&mut grads, *a, ga);
                }
                Op::Elu(a) => {
                    let x = self.value(*a);
                    let mut ga = gy.clone();
                    for ((g, &xv), &yv) in ga.data_mut().iter_mut().zip(x.data()).zip(y.data()) {
                        if xv < T::zero() {
                            *g = *g * (yv + T::one());
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Softmax(a) => {
                    let mut ga = gy.clone();
                    for r in 0..y.rows() {
                        let yr = y.row_slice(r);
                        let dot: T = yr.iter().zip(gy.row_slice(r)).map(|(&p, &g)| p * g).sum();
                        for (g, &p) in ga.row_slice_mut(r).iter_mut().zip(yr) {
                            *g = p * (*g - dot);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LogSoftmax(a) => {
                    let mut ga = gy.clone();
                    for r in 0..y.rows() {
                        let total: T = gy.row_slice(r).iter().copied().sum();
                        for (g, &ly) in ga.row_slice_mut(r).iter_mut().zip(y.row_slice(r)) {
                            *g = *g - ly.exp() * total;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let gp = Tensor::from_fn(gy.rows(), w, |r, c| gy.get(r, offset + c));
                        acc(&mut grads, p, gp);
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let cols = gy.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let h = self.value(p).rows();
                        let data = gy.data()[offset * cols..(offset + h) * cols].to_vec();
                        acc(&mut grads, p, Tensor::matrix(h, cols, data)?);
                        offset += h;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        for c in 0..gy.cols() {
                            ga.set(r, start + c, gy.get(r, c));
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start) => {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = Tensor::zeros(rows, cols);
                    ga.data_mut()[start * cols..start * cols + gy.len()].copy_from_slice(gy.data());
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let (rows, cols) = self.shape(*a);
                    acc(&mut grads, *a, Tensor::filled(rows, cols, gy.data()[0]));
                }
                Op::SumRows(a) => {
                    let (rows, cols) = self.shape(*a);
                    let ga = Tensor::from_fn(rows, cols, |_, c| gy.data()[c]);
                    acc(&mut grads, *a, ga);
                }
                Op::Pick(a, indices) => {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = Tensor::zeros(rows, cols);
                    for (r, &c) in indices.iter().enumerate() {
                        ga.set(r, c, gy.data()[r]);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::BroadcastRows(a) => {
                    acc(&mut grads, *a, column_sums(&gy));
                }
                Op::Reshape(a) => {
                    let (rows, cols) = self.shape(*a);
                    acc(&mut grads, *a, Tensor::matrix(rows, cols, gy.into_data())?);
                }
            }
        }
        Ok(out)
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn column_sums<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(1, t.cols());
    for r in 0..t.rows() {
        for (o, &v) in out.data_mut().iter_mut().zip(t.row_slice(r)) {
            *o = *o + v;
        }
    }
    out
}

/// Inverted-dropout mask: entries are `0` or `1 / (1 - p)`.
pub fn dropout_mask<T: Scalar, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    p: f64,
    rng: &mut R,
) -> Tensor<T> {
    let keep = T::of(1.0 / (1.0 - p));
    Tensor::from_fn(rows, cols, |_, _| {
        if rng.random::<f64>() < p {
            T::zero()
        } else {
            keep
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f64> {
        ParamStore::new()
    }

    #[test]
    fn forward_examples() {
        let s = store();
        let mut g = Graph::new(&s);
        let z = g.constant(Tensor::row(vec![0.0, 0.0, 0.0]).unwrap());
        let sm = g.softmax(z);
        for &p in g.value(sm).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        let x = g.constant(Tensor::row(vec![2.0, -1.0]).unwrap());
        let e = g.elu(x);
        assert_eq!(g.value(e).get(0, 0), 2.0);
        assert!((g.value(e).get(0, 1) - ((-1f64).exp() - 1.0)).abs() < 1e-15);
        let zero = g.constant(Tensor::scalar(0.0));
        let s0 = g.sigmoid(zero);
        assert_eq!(g.value(s0).data(), &[0.5]);
        let a = g.constant(Tensor::row(vec![1.0]).unwrap());
        let b = g.constant(Tensor::row(vec![2.0, 3.0]).unwrap());
        let c = g.concat_cols(&[a, b]).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let s = store();
        let mut g = Graph::new(&s);
        let a = g.constant(Tensor::zeros(2, 3));
        let b = g.constant(Tensor::zeros(2, 2));
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
        assert!(g.matmul(a, b).is_err());
    }

    #[test]
    fn linear_map_gradient() {
        let mut s = store();
        let w = s
            .add(
                "w",
                Tensor::matrix(2, 2, vec![0.3, -0.2, 0.5, 0.1]).unwrap(),
            )
            .unwrap();
        let unused = s.add_zeros("unused", 3, 1).unwrap();
        let mut g = Graph::new(&s);
        let wv = g.param(w);
        let x = g.constant(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
        let y = g.matmul(wv, x).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.dense(w, &s).data(), &[1.0, 1.0, 1.0, 1.0]);
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.dense(unused, &s).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let s = store();
        let mut g = Graph::new(&s);
        let a = g.constant(Tensor::zeros(1, 2));
        assert!(g.backward(a).is_err());
    }

    #[test]
    fn zero_rate_dropout_is_identity() {
        use rand::SeedableRng;
        let s = store();
        let mut g = Graph::new(&s);
        let a = g.constant(Tensor::row(vec![1.0, 2.0]).unwrap());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        assert_eq!(g.dropout(a, 0.0, &mut rng).unwrap(), a);
    }

    #[test]
    fn gather_out_of_range() {
        let mut s = store();
        let t = s.add_zeros("emb", 3, 2).unwrap();
        let mut g = Graph::new(&s);
        assert!(matches!(
            g.gather(t, &[0, 3]),
            Err(Error::IndexOutOfRange { .. })
        ));
    }
}
