//! Dense row-major `f64` matrices. Vectors are 1xN or Nx1 tensors; scalars
//! are 1x1. Small and boring on purpose — the tape in [`super::diff`] owns
//! all the calculus.

use super::NumericsError;

/// A dense matrix of `f64` values in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    /// All-zero matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Matrix filled with a constant.
    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Builds a tensor from row-major data. Rejects length mismatches and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::invalid(
                "from_vec",
                format!("expected {} values, got {}", rows * cols, data.len()),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(NumericsError::NonFinite { op: "from_vec" });
        }
        Ok(Tensor { rows, cols, data })
    }

    /// Builds a tensor from nested rows. All rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumericsError> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(NumericsError::invalid("from_rows", "ragged rows"));
        }
        Tensor::from_vec(r, c, rows.iter().flatten().copied().collect())
    }

    /// Identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// A 1x1 tensor holding one value.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![value],
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

    pub fn at(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = value;
    }

    /// The value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(
            (self.rows, self.cols),
            (1, 1),
            "item() called on a {}x{} tensor",
            self.rows,
            self.cols
        );
        self.data[0]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn zeros_like(&self) -> Self {
        Tensor::zeros(self.rows, self.cols)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_finite(&self, op: &'static str) -> Result<(), NumericsError> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(NumericsError::NonFinite { op })
        }
    }

    /// Elementwise map into a new tensor.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self + other`, shapes must match.
    pub fn add(&self, other: &Tensor) -> Self {
        assert_eq!(self.shape(), other.shape(), "add: shape mismatch");
        self.zip(other, |a, b| a + b)
    }

    /// `self - other`, shapes must match.
    pub fn sub(&self, other: &Tensor) -> Self {
        assert_eq!(self.shape(), other.shape(), "sub: shape mismatch");
        self.zip(other, |a, b| a - b)
    }

    /// Elementwise product, shapes must match.
    pub fn hadamard(&self, other: &Tensor) -> Self {
        assert_eq!(self.shape(), other.shape(), "hadamard: shape mismatch");
        self.zip(other, |a, b| a * b)
    }

    /// `k * self`.
    pub fn scale(&self, k: f64) -> Self {
        self.map(|v| k * v)
    }

    /// Accumulates `k * other` into `self` in place.
    pub fn add_scaled(&mut self, other: &Tensor, k: f64) {
        assert_eq!(self.shape(), other.shape(), "add_scaled: shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// Dense matrix product `self * other`.
    pub fn matmul(&self, other: &Tensor) -> Self {
        assert_eq!(self.cols, other.rows, "matmul: inner dimension mismatch");
        let mut out = Tensor::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let (orow, brow) = (i * other.cols, k * other.cols);
                for j in 0..other.cols {
                    out.data[orow + j] += a * other.data[brow + j];
                }
            }
        }
        out
    }

    /// `self * other^T`.
    pub fn matmul_nt(&self, other: &Tensor) -> Self {
        assert_eq!(self.cols, other.cols, "matmul_nt: inner dimension mismatch");
        let mut out = Tensor::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            for j in 0..other.rows {
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += self.data[i * self.cols + k] * other.data[j * other.cols + k];
                }
                out.data[i * other.rows + j] = acc;
            }
        }
        out
    }

    /// `self^T * other`.
    pub fn matmul_tn(&self, other: &Tensor) -> Self {
        assert_eq!(self.rows, other.rows, "matmul_tn: inner dimension mismatch");
        let mut out = Tensor::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let (arow, brow) = (k * self.cols, k * other.cols);
            for i in 0..self.cols {
                let a = self.data[arow + i];
                if a == 0.0 {
                    continue;
                }
                let orow = i * other.cols;
                for j in 0..other.cols {
                    out.data[orow + j] += a * other.data[brow + j];
                }
            }
        }
        out
    }

    /// Transposed copy.
    pub fn transpose(&self) -> Self {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Column sums as a 1 x cols row vector.
    pub fn col_sums(&self) -> Self {
        let mut out = Tensor::zeros(1, self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c] += self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Sum of all entries.
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Exact bitwise equality, including distinguishing `0.0` from `-0.0`.
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_length_and_nan() {
        assert!(Tensor::from_vec(2, 2, vec![1.0; 3]).is_err());
        assert!(Tensor::from_vec(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::from_vec(1, 2, vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn matmul_matches_hand_product() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_variants_agree_with_explicit_transposes() {
        let a = Tensor::from_rows(&[vec![1.0, -2.0, 0.5], vec![0.0, 3.0, 1.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![2.0, 1.0, -1.0], vec![0.5, 0.0, 4.0]]).unwrap();
        assert_eq!(a.matmul_nt(&b).data(), a.matmul(&b.transpose()).data());
        assert_eq!(a.matmul_tn(&b).data(), a.transpose().matmul(&b).data());
    }

    #[test]
    fn col_sums_and_sum() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(t.col_sums().data(), &[4.0, 6.0]);
        assert_eq!(t.sum(), 10.0);
    }

    #[test]
    fn bits_eq_distinguishes_negative_zero() {
        let a = Tensor::from_vec(1, 1, vec![0.0]).unwrap();
        let b = Tensor::from_vec(1, 1, vec![-0.0]).unwrap();
        assert!(!a.bits_eq(&b));
        assert!(a.bits_eq(&a.clone()));
    }
}
