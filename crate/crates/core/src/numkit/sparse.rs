use crate::error::{Error, Result};

use super::dense::{DenseMatrix, Scalar};

/// Compressed-row sparse matrix. Column indices within a row are strictly
/// increasing, so `(row, col)` pairs are unique.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix<T> {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<T>,
}

impl<T: Scalar> SparseMatrix<T> {
    /// Builds from coordinate triplets in any order. Rejects duplicates,
    /// out-of-range indices and non-finite values.
    pub fn from_triplets(rows: usize, cols: usize, mut entries: Vec<(usize, usize, T)>) -> Result<Self> {
        entries.sort_by_key(|&(r, c, _)| (r, c));
        let mut indptr = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(entries.len());
        let mut values = Vec::with_capacity(entries.len());
        let mut prev: Option<(usize, usize)> = None;
        for &(r, c, v) in &entries {
            if r >= rows || c >= cols {
                return Err(Error::InvalidInput(format!(
                    "sparse entry ({r}, {c}) outside {rows}x{cols}"
                )));
            }
            if prev == Some((r, c)) {
                return Err(Error::InvalidInput(format!("duplicate sparse entry ({r}, {c})")));
            }
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("sparse entry ({r}, {c})")));
            }
            prev = Some((r, c));
            indptr[r + 1] += 1;
            indices.push(c);
            values.push(v);
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        Ok(SparseMatrix {
            rows,
            cols,
            indptr,
            indices,
            values,
        })
    }

    pub fn identity(n: usize) -> Self {
        SparseMatrix {
            rows: n,
            cols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![T::one(); n],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// `(col, value)` pairs stored in row `r`.
    pub fn row_entries(&self, r: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, T)> + '_ {
        (0..self.rows).flat_map(move |r| self.row_entries(r).map(move |(c, v)| (r, c, v)))
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        let span = self.indptr[r]..self.indptr[r + 1];
        match self.indices[span.clone()].binary_search(&c) {
            Ok(pos) => self.values[span.start + pos],
            Err(_) => T::zero(),
        }
    }

    pub fn to_dense(&self) -> DenseMatrix<T> {
        let mut out = DenseMatrix::zeros(self.rows, self.cols);
        for (r, c, v) in self.iter() {
            out.set(r, c, v);
        }
        out
    }

    /// Sparse-dense product `self · d`.
    pub fn spmm(&self, d: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        if self.cols != d.rows() {
            return Err(Error::shape("spmm", self.shape(), d.shape()));
        }
        let m = d.cols();
        let mut out = DenseMatrix::zeros(self.rows, m);
        for r in 0..self.rows {
            let acc = out.row_mut(r);
            for k in self.indptr[r]..self.indptr[r + 1] {
                let v = self.values[k];
                for (o, &x) in acc.iter_mut().zip(d.row(self.indices[k])) {
                    *o = *o + v * x;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · g`, used by the backward rule of [`spmm`](Self::spmm).
    pub fn spmm_transposed(&self, g: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        if self.rows != g.rows() {
            return Err(Error::shape("spmm_transposed", self.shape(), g.shape()));
        }
        let m = g.cols();
        let mut out = DenseMatrix::zeros(self.cols, m);
        for r in 0..self.rows {
            let g_row = g.row(r);
            for k in self.indptr[r]..self.indptr[r + 1] {
                let v = self.values[k];
                for (o, &x) in out.row_mut(self.indices[k]).iter_mut().zip(g_row) {
                    *o = *o + v * x;
                }
            }
        }
        Ok(out)
    }

    /// Maximum `|a_ij - a_ji|`; requires a square matrix.
    pub fn asymmetry(&self) -> T {
        self.iter()
            .map(|(r, c, v)| (v - self.get(c, r)).abs())
            .fold(T::zero(), T::max)
    }

    /// Symmetric permutation `P·S·Pᵀ` where row `i` of the result is row
    /// `perm[i]` of the input.
    pub fn permute_symmetric(&self, perm: &[usize]) -> Result<Self> {
        if self.rows != self.cols || perm.len() != self.rows {
            return Err(Error::InvalidInput("permutation length".into()));
        }
        let mut inverse = vec![0usize; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let entries = self
            .iter()
            .map(|(r, c, v)| (inverse[r], inverse[c], v))
            .collect();
        Self::from_triplets(self.rows, self.cols, entries)
    }
}
