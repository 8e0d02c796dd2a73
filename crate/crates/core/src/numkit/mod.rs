//! Deterministic numerics: dense and sparse matrices, a reverse-mode tape
//! over a small primitive catalog, Adam, and a finite-difference checker.

mod dense;
mod gradcheck;
mod optim;
mod sparse;
mod tape;

pub use dense::{l2_distance, DenseMatrix, Scalar};
pub use gradcheck::{check_gradient, check_gradient_with, GradCheckReport};
pub use optim::{adam_step, AdamState, BETA1, BETA2, EPSILON};
pub use sparse::SparseMatrix;
pub use tape::{Gradients, Tape, Var, PRIMITIVES};

use crate::error::Result;

/// Sparse-dense product; see [`SparseMatrix::spmm`].
pub fn spmm<T: Scalar>(s: &SparseMatrix<T>, d: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    s.spmm(d)
}
