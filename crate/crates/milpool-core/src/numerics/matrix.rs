//! Dense row-major matrix of f64, sized for frames-by-features work.
//!
//! Rows are contiguous, so per-frame code borrows `row(t)` as a slice and
//! inner loops stay free of index arithmetic.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                context: "Matrix::from_vec",
                expected: (rows, cols),
                got: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
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

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Copies column `c` into `out` (resized to `rows`).
    pub fn copy_col_into(&self, c: usize, out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.data[c..].iter().step_by(self.cols.max(1)));
        debug_assert_eq!(out.len(), self.rows);
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "Matrix::add")?;
        let mut out = self.clone();
        for (o, x) in out.data.iter_mut().zip(&other.data) {
            *o += x;
        }
        Ok(out)
    }

    /// self += scale * other.
    pub fn add_scaled(&mut self, other: &Matrix, scale: f64) -> Result<()> {
        self.check_same_shape(other, "Matrix::add_scaled")?;
        for (o, x) in self.data.iter_mut().zip(&other.data) {
            *o += scale * x;
        }
        Ok(())
    }

    pub fn scale(&mut self, k: f64) {
        for v in &mut self.data {
            *v *= k;
        }
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                context: "Matrix::matmul",
                expected: (self.cols, self.cols),
                got: (other.rows, other.cols),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let orow = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[r * self.cols + k];
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Applies `f` to every row in order.
    pub fn map_rows(&mut self, mut f: impl FnMut(usize, &mut [f64])) {
        for r in 0..self.rows {
            f(r, &mut self.data[r * self.cols..(r + 1) * self.cols]);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_same_shape(&self, other: &Matrix, context: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                context,
                expected: self.shape(),
                got: other.shape(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(rows: usize, cols: usize, salt: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |r, c| salt + (r * cols + c) as f64 * 0.25)
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = sample(3, 4, 0.5);
        let b = sample(4, 2, -1.0);
        let fast = a.matmul(&b).unwrap();
        for r in 0..3 {
            for c in 0..2 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += a.get(r, k) * b.get(k, c);
                }
                assert!((fast.get(r, c) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transpose_round_trip() {
        let a = sample(3, 5, 2.0);
        assert_eq!(a.transpose().transpose(), a);
        assert_eq!(a.transpose().get(4, 2), a.get(2, 4));
    }

    #[test]
    fn add_and_scale() {
        let a = sample(2, 3, 1.0);
        let b = sample(2, 3, -0.5);
        let s = a.add(&b).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                assert!((s.get(r, c) - (a.get(r, c) + b.get(r, c))).abs() < 1e-12);
            }
        }
        let mut c = a.clone();
        c.scale(2.0);
        assert_eq!(c.get(1, 2), 2.0 * a.get(1, 2));
        assert!(a.add(&sample(3, 2, 0.0)).is_err());
    }

    #[test]
    fn column_copy() {
        let a = sample(4, 3, 0.0);
        let mut col = Vec::new();
        a.copy_col_into(1, &mut col);
        assert_eq!(col.len(), 4);
        for r in 0..4 {
            assert_eq!(col[r], a.get(r, 1));
        }
    }

    #[test]
    fn finite_check() {
        let mut a = sample(2, 2, 0.0);
        assert!(a.is_finite());
        a.set(0, 1, f64::NAN);
        assert!(!a.is_finite());
    }
}
