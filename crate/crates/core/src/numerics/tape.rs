//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every primitive applied during one forward pass. Each
//! node keeps its value and the indices of its operands; [`Tape::backward`]
//! walks the nodes in exact reverse recording order and accumulates
//! vector-Jacobian products. A tape is built fresh for every forward pass and
//! dropped afterwards.

use crate::error::{LtnError, Result};
use crate::numerics::matrix::{dot, Matrix};

/// Handle to a value recorded on a [`Tape`].
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
    /// `a * b^T`
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a (n x k) + row (1 x k)` for every row.
    AddRow(Var, Var),
    /// `a * s` with `s` a 1x1 variable.
    ScaleBy(Var, Var),
    /// `a / s` with `s` a 1x1 variable.
    DivBy(Var, Var),
    Scale(Var, f64),
    /// Row `i` of `a` times entry `i` of an `n x 1` column.
    ScaleRows(Var, Var),
    Relu(Var),
    /// `ln(1 + e^x)`
    Softplus(Var),
    Sqrt(Var),
    Transpose(Var),
    SumAll(Var),
    MeanAll(Var),
    RowSum(Var),
    /// Mean over consecutive blocks of `group` rows.
    MeanGroups(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    SoftmaxRows(Var),
    L2NormalizeRows(Var),
    LogSumExpRows(Var),
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Gradient store returned by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. the leaf `v`; exactly zero when `v` did not
    /// reach the loss. Gradients of intermediate nodes are not retained.
    pub fn get(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Matrix {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

macro_rules! shape_err {
    ($op:expr, $a:expr, $b:expr) => {
        LtnError::Shape {
            op: $op,
            left: $a.shape(),
            right: $b.shape(),
        }
    };
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    /// Scalar value of a 1x1 variable.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.get(0, 0)
    }

    fn push(&mut self, value: Matrix, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(LtnError::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input (parameter or constant).
    pub fn leaf(&mut self, value: Matrix) -> Result<Var> {
        self.push(value, Op::Leaf, "leaf")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_t(self.value(b))?;
        self.push(out, Op::MatMulT(a, b), "matmul_t")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        self.push(out, Op::Sub(a, b), "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).hadamard(self.value(b))?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(shape_err!("add_row", av, rv));
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row), "add_row")
    }

    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let (av, sv) = (self.value(a), self.value(s));
        if sv.shape() != (1, 1) {
            return Err(shape_err!("scale_by", av, sv));
        }
        let out = av.scale(sv.get(0, 0));
        self.push(out, Op::ScaleBy(a, s), "scale_by")
    }

    pub fn div_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let (av, sv) = (self.value(a), self.value(s));
        if sv.shape() != (1, 1) {
            return Err(shape_err!("div_by", av, sv));
        }
        let d = sv.get(0, 0);
        let out = av.map(|x| x / d);
        self.push(out, Op::DivBy(a, s), "div_by")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).scale(c);
        self.push(out, Op::Scale(a, c), "scale")
    }

    pub fn scale_rows(&mut self, a: Var, col: Var) -> Result<Var> {
        let (av, cv) = (self.value(a), self.value(col));
        if cv.cols() != 1 || cv.rows() != av.rows() {
            return Err(shape_err!("scale_rows", av, cv));
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            let s = cv.get(r, 0);
            out.row_mut(r).iter_mut().for_each(|x| *x *= s);
        }
        self.push(out, Op::ScaleRows(a, col), "scale_rows")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a), "relu")
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0) + (-x.abs()).exp().ln_1p());
        self.push(out, Op::Softplus(a), "softplus")
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.data().iter().any(|&x| x < 0.0) {
            return Err(LtnError::NonFinite { op: "sqrt" });
        }
        let out = av.map(f64::sqrt);
        self.push(out, Op::Sqrt(a), "sqrt")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), "transpose")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Matrix::scalar(self.value(a).sum());
        self.push(out, Op::SumAll(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.is_empty() {
            return Err(LtnError::Empty { op: "mean" });
        }
        let out = Matrix::scalar(av.sum() / av.len() as f64);
        self.push(out, Op::MeanAll(a), "mean")
    }

    /// Sum along each row: `n x k -> n x 1`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let sums: Vec<f64> = (0..av.rows()).map(|r| av.row(r).iter().sum()).collect();
        self.push(Matrix::column_vector(&sums), Op::RowSum(a), "row_sum")
    }

    /// `sum(a * b)` as a 1x1 variable.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    pub fn mean_groups(&mut self, a: Var, group: usize) -> Result<Var> {
        let av = self.value(a);
        if group == 0 || !av.rows().is_multiple_of(group) {
            return Err(LtnError::Shape {
                op: "mean_groups",
                left: av.shape(),
                right: (group, 1),
            });
        }
        let n = av.rows() / group;
        let k = av.cols();
        let mut out = Matrix::zeros(n, k);
        let inv = 1.0 / group as f64;
        for i in 0..n {
            let dst = out.row_mut(i);
            for j in 0..group {
                for (d, &x) in dst.iter_mut().zip(av.row(i * group + j)) {
                    *d += x;
                }
            }
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        self.push(out, Op::MeanGroups(a, group), "mean_groups")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Matrix::hstack(&mats)?;
        self.push(out, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).columns(start, len)?;
        self.push(out, Op::SliceCols(a, start), "slice_cols")
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if start + len > av.rows() {
            return Err(LtnError::Shape {
                op: "slice_rows",
                left: av.shape(),
                right: (start, len),
            });
        }
        let k = av.cols();
        let out = Matrix::from_vec(len, k, av.data()[start * k..(start + len) * k].to_vec())?;
        self.push(out, Op::SliceRows(a, start), "slice_rows")
    }

    /// Row-wise softmax, stabilized by subtracting the row maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = softmax_rows(self.value(a))?;
        self.push(out, Op::SoftmaxRows(a), "softmax")
    }

    /// Row-wise unit normalization. Fails if any row norm is at most `eps`.
    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let out = l2_normalize_rows(self.value(a), eps)?;
        self.push(out, Op::L2NormalizeRows(a), "l2_normalize")
    }

    /// Row-wise `log(sum(exp(.)))`: `n x k -> n x 1`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.cols() == 0 {
            return Err(LtnError::Empty { op: "logsumexp" });
        }
        let vals: Vec<f64> = (0..av.rows()).map(|r| logsumexp(av.row(r))).collect();
        self.push(Matrix::column_vector(&vals), Op::LogSumExpRows(a), "logsumexp")
    }

    /// Gradients of the 1x1 variable `loss` w.r.t. every recorded node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(LtnError::Shape {
                op: "backward",
                left: lv.shape(),
                right: (1, 1),
            });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    // Leaves keep their gradient for the caller.
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b))?;
                    let gb = self.value(*a).t_matmul(&g)?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::MatMulT(a, b) => {
                    let ga = g.matmul(self.value(*b))?;
                    let gb = g.t_matmul(self.value(*a))?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g.scale(-1.0))?;
                }
                Op::Mul(a, b) => {
                    let ga = g.hadamard(self.value(*b))?;
                    let gb = g.hadamard(self.value(*a))?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::AddRow(a, row) => {
                    let mut gr = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, &x) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    accumulate(&mut grads, *a, g)?;
                    accumulate(&mut grads, *row, gr)?;
                }
                Op::ScaleBy(a, s) => {
                    let sv = self.scalar(*s);
                    let gs = dot(g.data(), self.value(*a).data());
                    accumulate(&mut grads, *a, g.scale(sv))?;
                    accumulate(&mut grads, *s, Matrix::scalar(gs))?;
                }
                Op::DivBy(a, s) => {
                    let sv = self.scalar(*s);
                    let gs = -dot(g.data(), self.value(*a).data()) / (sv * sv);
                    accumulate(&mut grads, *a, g.scale(1.0 / sv))?;
                    accumulate(&mut grads, *s, Matrix::scalar(gs))?;
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.scale(*c))?,
                Op::ScaleRows(a, col) => {
                    let (av, cv) = (self.value(*a), self.value(*col));
                    let mut ga = g.clone();
                    let mut gc = Matrix::zeros(cv.rows(), 1);
                    for r in 0..g.rows() {
                        let s = cv.get(r, 0);
                        ga.row_mut(r).iter_mut().for_each(|x| *x *= s);
                        gc.set(r, 0, dot(g.row(r), av.row(r)));
                    }
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *col, gc)?;
                }
                Op::Relu(a) => {
                    let ga = g.zip_map(self.value(*a), "relu_grad", |gi, x| if x > 0.0 { gi } else { 0.0 })?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Softplus(a) => {
                    let ga = g.zip_map(self.value(*a), "softplus_grad", |gi, x| gi / (1.0 + (-x).exp()))?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Sqrt(a) => {
                    let ga = g.zip_map(&node.value, "sqrt_grad", |gi, y| gi / (2.0 * y))?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose())?,
                Op::SumAll(a) => {
                    let (r, c) = self.value(*a).shape();
                    accumulate(&mut grads, *a, Matrix::filled(r, c, g.get(0, 0)))?;
                }
                Op::MeanAll(a) => {
                    let (r, c) = self.value(*a).shape();
                    let v = g.get(0, 0) / (r * c) as f64;
                    accumulate(&mut grads, *a, Matrix::filled(r, c, v))?;
                }
                Op::RowSum(a) => {
                    let (r, c) = self.value(*a).shape();
                    let mut ga = Matrix::zeros(r, c);
                    for i in 0..r {
                        let gi = g.get(i, 0);
                        ga.row_mut(i).iter_mut().for_each(|x| *x = gi);
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::MeanGroups(a, group) => {
                    let (r, c) = self.value(*a).shape();
                    let mut ga = Matrix::zeros(r, c);
                    let inv = 1.0 / *group as f64;
                    for i in 0..r {
                        let src = g.row(i / group);
                        for (d, &x) in ga.row_mut(i).iter_mut().zip(src) {
                            *d = x * inv;
                        }
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        accumulate(&mut grads, *p, g.columns(start, w)?)?;
                        start += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = self.value(*a).shape();
                    let mut ga = Matrix::zeros(r, c);
                    let w = g.cols();
                    for i in 0..r {
                        ga.row_mut(i)[*start..start + w].copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::SliceRows(a, start) => {
                    let (r, c) = self.value(*a).shape();
                    let mut ga = Matrix::zeros(r, c);
                    ga.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let s = dot(g.row(i), y.row(i));
                        for ((d, &gi), &yi) in ga.row_mut(i).iter_mut().zip(g.row(i)).zip(y.row(i)) {
                            *d = yi * (gi - s);
                        }
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::L2NormalizeRows(a) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let norm = dot(x.row(i), x.row(i)).sqrt();
                        let s = dot(g.row(i), y.row(i));
                        for ((d, &gi), &yi) in ga.row_mut(i).iter_mut().zip(g.row(i)).zip(y.row(i)) {
                            *d = (gi - yi * s) / norm;
                        }
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::LogSumExpRows(a) => {
                    let x = self.value(*a);
                    let mut ga = softmax_rows(x)?;
                    for i in 0..x.rows() {
                        let gi = g.get(i, 0);
                        ga.row_mut(i).iter_mut().for_each(|v| *v *= gi);
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.axpy(1.0, &g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

pub(crate) fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Row-wise max-subtracted softmax.
pub fn softmax_rows(a: &Matrix) -> Result<Matrix> {
    if a.cols() == 0 || a.rows() == 0 {
        return Err(LtnError::Empty { op: "softmax" });
    }
    let mut out = a.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for x in row.iter_mut() {
            *x = (*x - m).exp();
            s += *x;
        }
        row.iter_mut().for_each(|x| *x /= s);
    }
    Ok(out)
}

/// Row-wise unit normalization; errors when a row norm is at most `eps`.
pub fn l2_normalize_rows(a: &Matrix, eps: f64) -> Result<Matrix> {
    if a.is_empty() {
        return Err(LtnError::Empty { op: "l2_normalize" });
    }
    let mut out = a.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let norm = dot(row, row).sqrt();
        if !(norm > eps) {
            return Err(LtnError::Collapsed {
                op: "l2_normalize",
                norm,
            });
        }
        row.iter_mut().for_each(|x| *x /= norm);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform_and_stable() {
        let s = softmax_rows(&Matrix::row_vector(&[0.0, 0.0, 0.0])).unwrap();
        for &x in s.data() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax_rows(&Matrix::row_vector(&[1000.0, 0.0])).unwrap();
        assert!((s.get(0, 0) - 1.0).abs() < 1e-15);
        assert!(s.get(0, 1) >= 0.0 && s.get(0, 1) < 1e-300);
        assert!(softmax_rows(&Matrix::zeros(1, 0)).is_err());
    }

    #[test]
    fn softmax_matches_extended_precision() {
        // exp(1), exp(2), exp(3) normalized at 40 significant digits (mpmath).
        let expected = [
            0.090_030_573_170_380_46,
            0.244_728_471_054_797_65,
            0.665_240_955_774_821_9,
        ];
        let s = softmax_rows(&Matrix::row_vector(&[1.0, 2.0, 3.0])).unwrap();
        for (a, b) in s.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
        assert!((s.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalize_examples() {
        let n = l2_normalize_rows(&Matrix::row_vector(&[3.0, 4.0]), 1e-12).unwrap();
        assert!((n.get(0, 0) - 0.6).abs() < 1e-15 && (n.get(0, 1) - 0.8).abs() < 1e-15);
        let u = Matrix::row_vector(&[0.0, 1.0, 0.0]);
        assert_eq!(l2_normalize_rows(&u, 1e-12).unwrap(), u);
        assert!(matches!(
            l2_normalize_rows(&Matrix::zeros(1, 4), 1e-12),
            Err(LtnError::Collapsed { .. })
        ));
    }

    #[test]
    fn unused_leaf_gets_exact_zero() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::row_vector(&[1.0, 2.0])).unwrap();
        let unused = t.leaf(Matrix::row_vector(&[5.0, 6.0])).unwrap();
        let s = t.sum(a).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(unused), Matrix::zeros(1, 2));
        assert_eq!(g.get(a), Matrix::row_vector(&[1.0, 1.0]));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::row_vector(&[1.0, 2.0])).unwrap();
        assert!(t.backward(a).is_err());
    }

    #[test]
    fn non_finite_is_rejected() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::scalar(1e308)).unwrap();
        assert!(matches!(t.scale(a, 10.0), Err(LtnError::NonFinite { .. })));
    }
}
