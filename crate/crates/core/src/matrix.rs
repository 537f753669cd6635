//! Dense row-major matrices of `f64`.
//!
//! Batches are stored with samples as columns, so a layer input for a batch
//! of `b` samples with `d` features is a `d x b` matrix.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{}) [", self.rows, self.cols)?;
        for r in 0..self.rows {
            if r > 0 {
                write!(f, "; ")?;
            }
            for c in 0..self.cols {
                if c > 0 {
                    write!(f, ", ")?;
                }
                write!(f, "{}", self.get(r, c))?;
            }
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data. Rejects wrong lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::BadLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix data"));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Parse("ragged rows".into()));
        }
        Matrix::from_vec(r, c, rows.concat())
    }

    /// A single column vector.
    pub fn column(values: &[f64]) -> Result<Self> {
        Matrix::from_vec(values.len(), 1, values.to_vec())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Entries drawn uniformly from `[-limit, limit]`.
    pub fn random_uniform<R: Rng + ?Sized>(
        rows: usize,
        cols: usize,
        limit: f64,
        rng: &mut R,
    ) -> Self {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-limit..=limit))
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copy of column `c`.
    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// New matrix made of the listed columns, in order.
    pub fn select_columns(&self, cols: &[usize]) -> Matrix {
        Matrix::from_fn(self.rows, cols.len(), |r, c| self.get(r, cols[c]))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::ShapeMismatch {
                op: "t_matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::ShapeMismatch {
                op: "matmul_t",
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(Matrix::from_fn(self.rows, other.rows, |i, j| {
            self.row(i)
                .iter()
                .zip(other.row(j))
                .map(|(a, b)| a * b)
                .sum()
        }))
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "hadamard")?;
        Ok(self.zip_map(other, |a, b| a * b))
    }

    /// `alpha * x + y`.
    pub fn axpy(alpha: f64, x: &Matrix, y: &Matrix) -> Result<Matrix> {
        x.check_same_shape(y, "axpy")?;
        Ok(x.zip_map(y, |a, b| alpha * a + b))
    }

    /// In-place `self += alpha * x`.
    pub fn add_scaled(&mut self, alpha: f64, x: &Matrix) -> Result<()> {
        self.check_same_shape(x, "add_scaled")?;
        for (s, v) in self.data.iter_mut().zip(&x.data) {
            *s += alpha * v;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "sub")?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "add")?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn scale(&self, alpha: f64) -> Matrix {
        self.map(|v| alpha * v)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        Matrix {
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

    /// Adds `bias[r]` to every entry of row `r`.
    pub fn add_column_broadcast(&mut self, bias: &[f64]) -> Result<()> {
        if bias.len() != self.rows {
            return Err(Error::ShapeMismatch {
                op: "add_column_broadcast",
                left: self.shape(),
                right: (bias.len(), 1),
            });
        }
        for (r, b) in bias.iter().enumerate() {
            for v in &mut self.data[r * self.cols..(r + 1) * self.cols] {
                *v += b;
            }
        }
        Ok(())
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|r| self.row(r).iter().sum()).collect()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest singular value by power iteration on `AᵀA`.
    ///
    /// Stops after `max_iter` iterations or once successive estimates differ
    /// by less than `tol` relative.
    pub fn spectral_norm_with(&self, max_iter: usize, tol: f64) -> f64 {
        if self.is_empty() || self.max_abs() == 0.0 {
            return 0.0;
        }
        let gram = self.t_matmul(self).expect("AᵀA is always conformable");
        let n = gram.rows;
        // deterministic start with every component nonzero
        let mut v: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64) * 1e-3).collect();
        normalize(&mut v);
        let mut estimate = 0.0;
        for _ in 0..max_iter {
            let mut next = vec![0.0; n];
            for (i, out) in next.iter_mut().enumerate() {
                *out = gram.row(i).iter().zip(&v).map(|(a, b)| a * b).sum();
            }
            let lambda: f64 = next.iter().zip(&v).map(|(a, b)| a * b).sum();
            let norm = normalize(&mut next);
            if norm == 0.0 {
                break;
            }
            v = next;
            let converged = (lambda - estimate).abs() <= tol * lambda.abs().max(f64::MIN_POSITIVE);
            estimate = lambda;
            if converged {
                break;
            }
        }
        // Rayleigh quotient of the final iterate
        let mut gv = vec![0.0; n];
        for (i, out) in gv.iter_mut().enumerate() {
            *out = gram.row(i).iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        let rq: f64 = gv.iter().zip(&v).map(|(a, b)| a * b).sum();
        rq.max(estimate).max(0.0).sqrt()
    }

    /// Spectral norm with 50 iterations and tolerance 1e-10.
    pub fn spectral_norm(&self) -> f64 {
        self.spectral_norm_with(50, 1e-10)
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
    n
}

/// Euclidean norm of a slice.
pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn identity_times_matrix() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        assert_eq!(Matrix::identity(3).matmul(&a).unwrap(), a);
    }

    #[test]
    fn matmul_by_hand() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = m(&[&[0.0], &[1.0]]);
        assert_eq!(a.matmul(&b).unwrap(), m(&[&[2.0], &[4.0]]));
    }

    #[test]
    fn matmul_dimension_error_carries_shapes() {
        let a = Matrix::zeros(2, 3);
        let err = a.matmul(&a).unwrap_err();
        assert_eq!(
            err,
            Error::ShapeMismatch {
                op: "matmul",
                left: (2, 3),
                right: (2, 3)
            }
        );
    }

    #[test]
    fn frobenius_cases() {
        assert_eq!(Matrix::zeros(3, 2).frobenius_norm(), 0.0);
        assert_eq!(m(&[&[3.0, 4.0]]).frobenius_norm(), 5.0);
        assert_eq!(Matrix::identity(2).frobenius_norm(), 2f64.sqrt());
    }

    #[test]
    fn elementwise_identities() {
        let a = m(&[&[1.0, -2.0], &[0.5, 4.0]]);
        assert_eq!(a.hadamard(&Matrix::filled(2, 2, 1.0)).unwrap(), a);
        assert_eq!(a.transpose().transpose(), a);
        let y = m(&[&[7.0, 8.0], &[9.0, 10.0]]);
        assert_eq!(Matrix::axpy(0.0, &a, &y).unwrap(), y);
        assert!(a.hadamard(&Matrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn rejects_non_finite_and_bad_length() {
        assert!(Matrix::from_vec(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Matrix::from_vec(2, 2, vec![1.0]).is_err());
    }

    #[test]
    fn transposed_products_match_explicit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Matrix::random_uniform(4, 3, 1.0, &mut rng);
        let b = Matrix::random_uniform(4, 5, 1.0, &mut rng);
        let c = Matrix::random_uniform(5, 3, 1.0, &mut rng);
        assert_eq!(a.t_matmul(&b).unwrap(), a.transpose().matmul(&b).unwrap());
        let lhs = a.matmul_t(&c).unwrap();
        let rhs = a.matmul(&c.transpose()).unwrap();
        for (x, y) in lhs.as_slice().iter().zip(rhs.as_slice()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn spectral_norm_of_diagonal_and_rank_one() {
        let d = m(&[&[3.0, 0.0], &[0.0, -5.0]]);
        assert!((d.spectral_norm() - 5.0).abs() < 1e-9);
        // u vᵀ has spectral norm |u||v|
        let r1 = m(&[&[1.0, 2.0], &[2.0, 4.0], &[3.0, 6.0]]);
        let expected = 14f64.sqrt() * 5f64.sqrt();
        assert!((r1.spectral_norm() - expected).abs() < 1e-9);
        assert!(r1.spectral_norm() <= r1.frobenius_norm() + 1e-12);
        assert_eq!(Matrix::zeros(2, 2).spectral_norm(), 0.0);
    }

    fn small_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
        proptest::collection::vec(-3.0f64..3.0, rows * cols)
            .prop_map(move |d| Matrix::from_vec(rows, cols, d).unwrap())
    }

    proptest! {
        #[test]
        fn matmul_is_associative(a in small_matrix(3, 4), b in small_matrix(4, 2), c in small_matrix(2, 5)) {
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let scale = left.frobenius_norm().max(1e-300);
            let diff = left.sub(&right).unwrap().frobenius_norm();
            prop_assert!(diff <= 1e-10 * scale.max(1.0));
        }

        #[test]
        fn frobenius_is_transpose_invariant(a in small_matrix(3, 5)) {
            let n = a.frobenius_norm().powi(2);
            let nt = a.transpose().frobenius_norm().powi(2);
            prop_assert!((n - nt).abs() <= 1e-12 * n.max(1e-300));
        }

        #[test]
        fn hadamard_commutes(a in small_matrix(2, 3), b in small_matrix(2, 3)) {
            prop_assert_eq!(a.hadamard(&b).unwrap(), b.hadamard(&a).unwrap());
        }
    }
}
