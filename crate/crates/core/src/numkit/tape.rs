//! Reverse-mode differentiation over a fixed catalog of matrix primitives.
//!
//! A [`Tape`] records each primitive application as a node holding its
//! forward value. Nodes are appended in evaluation order, so the node list is
//! already topologically sorted and [`Tape::backward`] walks it once in
//! reverse.
//!
//! ```
//! use rkdea::numkit::{DenseMatrix, Tape};
//!
//! let mut tape = Tape::<f64>::new();
//! let w = tape.param(DenseMatrix::scalar(3.0));
//! let sq = tape.square(w);
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(w).as_slice(), &[6.0]);
//! ```

use std::sync::Arc;

use crate::error::{Error, Result};

use super::dense::{DenseMatrix, Scalar};
use super::sparse::SparseMatrix;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Param,
    Constant,
    MatMul(Var, Var),
    SpMM(Arc<SparseMatrix<T>>, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Shift(Var, T),
    Relu(Var),
    Hinge(Var),
    Sigmoid(Var),
    Abs(Var),
    Square(Var),
    RowNorm(Var),
    RowNormalize(Var),
    Gather(Var, Arc<[usize]>),
    Sum(Var),
    Mean(Var),
}

/// Names of every differentiable primitive the tape supports.
pub const PRIMITIVES: &[&str] = &[
    "matmul",
    "spmm",
    "add",
    "sub",
    "mul",
    "add_row",
    "scale",
    "shift",
    "relu",
    "hinge",
    "sigmoid",
    "abs",
    "square",
    "row_norm",
    "row_normalize",
    "gather_rows",
    "sum",
    "mean",
];

struct Node<T> {
    value: DenseMatrix<T>,
    op: Op<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: DenseMatrix<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &DenseMatrix<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Value of a `1 × 1` node.
    pub fn scalar_value(&self, v: Var) -> T {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.as_slice()[0]
    }

    /// Trainable leaf; receives a gradient.
    pub fn param(&mut self, value: DenseMatrix<T>) -> Var {
        self.push(value, Op::Param)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: DenseMatrix<T>) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn spmm(&mut self, s: &Arc<SparseMatrix<T>>, d: Var) -> Result<Var> {
        let value = s.spmm(self.value(d))?;
        Ok(self.push(value, Op::SpMM(Arc::clone(s), d)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// Adds the `1 × c` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ma, mr) = (self.value(a), self.value(row));
        if mr.rows() != 1 || mr.cols() != ma.cols() {
            return Err(Error::shape("add_row", ma.shape(), mr.shape()));
        }
        let mut value = ma.clone();
        for r in 0..value.rows() {
            for (x, &b) in value.row_mut(r).iter_mut().zip(mr.as_slice()) {
                *x = *x + b;
            }
        }
        Ok(self.push(value, Op::AddRow(a, row)))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push(value, Op::Scale(a, c))
    }

    /// Adds a constant.
    pub fn shift(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.push(value, Op::Shift(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(T::zero()));
        self.push(value, Op::Relu(a))
    }

    /// `[x]_+`; same rule as ReLU, kept separate so margin terms are
    /// identifiable on the tape.
    pub fn hinge(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(T::zero()));
        self.push(value, Op::Hinge(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.abs());
        self.push(value, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        self.push(value, Op::Square(a))
    }

    /// Euclidean norm of each row, giving an `n × 1` column.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let value = self.value(a).row_norms();
        self.push(value, Op::RowNorm(a))
    }

    /// Scales each row to unit length; zero rows stay zero.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let norms = m.row_norms();
        let mut value = m.clone();
        for r in 0..value.rows() {
            let n = norms.as_slice()[r];
            if n > T::zero() {
                for x in value.row_mut(r) {
                    *x = *x / n;
                }
            }
        }
        self.push(value, Op::RowNormalize(a))
    }

    pub fn gather_rows(&mut self, a: Var, indices: impl Into<Arc<[usize]>>) -> Result<Var> {
        let indices = indices.into();
        let value = self.value(a).gather_rows(&indices)?;
        Ok(self.push(value, Op::Gather(a, indices)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = DenseMatrix::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let n = T::of(m.len().max(1) as f64);
        let value = DenseMatrix::scalar(m.sum() / n);
        self.push(value, Op::Mean(a))
    }

    /// Which side of its kink every non-smooth primitive input sits on.
    /// Two evaluations with equal signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> Vec<i8> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match node.op {
                Op::Relu(a) | Op::Hinge(a) | Op::Abs(a) => {
                    sig.extend(self.value(a).as_slice().iter().map(|&x| sign(x)));
                }
                Op::RowNorm(_) | Op::RowNormalize(_) => {
                    let norms = match node.op {
                        Op::RowNorm(_) => node.value.clone(),
                        Op::RowNormalize(a) => self.value(a).row_norms(),
                        _ => unreachable!(),
                    };
                    sig.extend(norms.as_slice().iter().map(|&x| sign(x)));
                }
                _ => {}
            }
        }
        sig
    }

    /// Propagates the gradient of the `1 × 1` node `loss` back to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::shape("backward", self.shape(loss), (1, 1)));
        }
        let mut grads: Vec<Option<DenseMatrix<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(DenseMatrix::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Param | Op::Constant => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul_transposed(self.value(*b))?;
                    let gb = self.value(*a).transposed_matmul(&g)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::SpMM(s, d) => {
                    accumulate(&mut grads, *d, s.spmm_transposed(&g)?);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.map(|x| -x));
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), "mul", |x, y| x * y)?;
                    let gb = g.zip_map(self.value(*a), "mul", |x, y| x * y)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let mut gr = DenseMatrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (acc, &x) in gr.as_mut_slice().iter_mut().zip(g.row(r)) {
                            *acc = *acc + x;
                        }
                    }
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *row, gr);
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    accumulate(&mut grads, *a, g.map(|x| x * c));
                }
                Op::Shift(a, _) => accumulate(&mut grads, *a, g.clone()),
                Op::Relu(a) | Op::Hinge(a) => {
                    let ga = g.zip_map(self.value(*a), "relu", |x, y| {
                        if y > T::zero() {
                            x
                        } else {
                            T::zero()
                        }
                    })?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = g.zip_map(&node.value, "sigmoid", |x, s| x * s * (T::one() - s))?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Abs(a) => {
                    let ga = g.zip_map(self.value(*a), "abs", |x, y| x * T::of(sign(y) as f64))?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let two = T::of(2.0);
                    let ga = g.zip_map(self.value(*a), "square", |x, y| two * x * y)?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowNorm(a) => {
                    let input = self.value(*a);
                    let mut ga = DenseMatrix::zeros(input.rows(), input.cols());
                    for r in 0..input.rows() {
                        let n = node.value.as_slice()[r];
                        if n > T::zero() {
                            let factor = g.as_slice()[r] / n;
                            for (o, &x) in ga.row_mut(r).iter_mut().zip(input.row(r)) {
                                *o = factor * x;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowNormalize(a) => {
                    // d(x/|x|) = (g - u (u·g)) / |x|
                    let input = self.value(*a);
                    let norms = input.row_norms();
                    let mut ga = DenseMatrix::zeros(input.rows(), input.cols());
                    for r in 0..input.rows() {
                        let n = norms.as_slice()[r];
                        if n > T::zero() {
                            let u = node.value.row(r);
                            let gr = g.row(r);
                            let dot = u.iter().zip(gr).fold(T::zero(), |acc, (&p, &q)| acc + p * q);
                            for ((o, &ui), &gi) in ga.row_mut(r).iter_mut().zip(u).zip(gr) {
                                *o = (gi - ui * dot) / n;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Gather(a, indices) => {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = DenseMatrix::zeros(rows, cols);
                    for (k, &src) in indices.iter().enumerate() {
                        for (o, &x) in ga.row_mut(src).iter_mut().zip(g.row(k)) {
                            *o = *o + x;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let (rows, cols) = self.shape(*a);
                    accumulate(&mut grads, *a, DenseMatrix::filled(rows, cols, g.as_slice()[0]));
                }
                Op::Mean(a) => {
                    let (rows, cols) = self.shape(*a);
                    let n = T::of((rows * cols).max(1) as f64);
                    accumulate(&mut grads, *a, DenseMatrix::filled(rows, cols, g.as_slice()[0] / n));
                }
            }
            if matches!(node.op, Op::Param) {
                grads[i] = Some(g);
            }
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<DenseMatrix<T>>], v: Var, g: DenseMatrix<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
fn sign<T: Scalar>(x: T) -> i8 {
    if x > T::zero() {
        1
    } else if x < T::zero() {
        -1
    } else {
        0
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Gradients of a loss with respect to the trainable leaves of a tape.
pub struct Gradients<T> {
    grads: Vec<Option<DenseMatrix<T>>>,
    shapes: Vec<(usize, usize)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&DenseMatrix<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for `v`, or zeros of the right shape if the loss does not
    /// depend on it.
    pub fn wrt(&self, v: Var) -> DenseMatrix<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                DenseMatrix::zeros(r, c)
            }
        }
    }
}
