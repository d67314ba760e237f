//! Compressed sparse row matrices, used for normalized adjacencies.

use super::{NumericsError, Tensor};

/// A CSR matrix with `f64` values. Column indices are strictly increasing
/// within each row and every stored value is finite — both are enforced at
/// construction and may be assumed afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds a CSR matrix from (row, col, value) triplets. Triplets may be
    /// given in any order; duplicates for the same cell are rejected.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Result<Self, NumericsError> {
        let mut entries: Vec<(usize, usize, f64)> = Vec::with_capacity(triplets.len());
        for &(r, c, v) in triplets {
            if r >= rows || c >= cols {
                return Err(NumericsError::invalid(
                    "sparse_from_triplets",
                    format!("entry ({r}, {c}) out of bounds for {rows}x{cols}"),
                ));
            }
            if !v.is_finite() {
                return Err(NumericsError::NonFinite {
                    op: "sparse_from_triplets",
                });
            }
            entries.push((r, c, v));
        }
        entries.sort_unstable_by_key(|&(r, c, _)| (r, c));
        for pair in entries.windows(2) {
            if pair[0].0 == pair[1].0 && pair[0].1 == pair[1].1 {
                return Err(NumericsError::invalid(
                    "sparse_from_triplets",
                    format!("duplicate entry at ({}, {})", pair[0].0, pair[0].1),
                ));
            }
        }

        let mut indptr = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(entries.len());
        let mut values = Vec::with_capacity(entries.len());
        for &(r, c, v) in &entries {
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

    /// n x n identity.
    pub fn identity(n: usize) -> Self {
        SparseMatrix {
            rows: n,
            cols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// The (column, value) pairs of one row, in increasing column order.
    pub fn row_entries(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.indptr[r];
        let hi = self.indptr[r + 1];
        self.indices[lo..hi]
            .iter()
            .copied()
            .zip(self.values[lo..hi].iter().copied())
    }

    /// Dense product `self * dense`.
    pub fn mul_dense(&self, dense: &Tensor) -> Tensor {
        assert_eq!(
            self.cols,
            dense.rows(),
            "spmm: inner dimension mismatch"
        );
        let mut out = Tensor::zeros(self.rows, dense.cols());
        for r in 0..self.rows {
            for (c, v) in self.row_entries(r) {
                let drow = dense.row(c);
                let orow = out.row_mut(r);
                for j in 0..drow.len() {
                    orow[j] += v * drow[j];
                }
            }
        }
        out
    }

    /// Dense product `self^T * dense`, without materializing the transpose.
    pub fn mul_dense_transposed(&self, dense: &Tensor) -> Tensor {
        assert_eq!(
            self.rows,
            dense.rows(),
            "spmm_t: inner dimension mismatch"
        );
        let mut out = Tensor::zeros(self.cols, dense.cols());
        for r in 0..self.rows {
            let drow = dense.row(r).to_vec();
            for (c, v) in self.row_entries(r) {
                let orow = out.row_mut(c);
                for j in 0..drow.len() {
                    orow[j] += v * drow[j];
                }
            }
        }
        out
    }

    /// Densified copy, for oracle comparisons in tests.
    pub fn to_dense(&self) -> Tensor {
        let mut out = Tensor::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for (c, v) in self.row_entries(r) {
                out.set(r, c, v);
            }
        }
        out
    }
}
