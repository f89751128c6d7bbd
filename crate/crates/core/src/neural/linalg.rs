//! Row-major dense matrices generic over the float width.
//!
//! Products go through a blocked single-threaded GEMM, so results are
//! reproducible run to run on the same machine.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::Float;

use crate::dataset::EmbeddingMatrix;
use crate::error::{Error, Result};

pub trait Scalar: Float + AddAssign + Sum + Send + Sync + Debug + 'static {
    fn cast_from(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `C ← A·B` for an m×k `A` and k×n `B` given by row and column strides.
    ///
    /// # Safety
    /// The pointers and strides must address valid buffers of those shapes,
    /// and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize, k: usize, n: usize,
        a: *const Self, rsa: isize, csa: isize,
        b: *const Self, rsb: isize, csb: isize,
        c: *mut Self, rsc: isize, csc: isize,
    );
}

impl Scalar for f32 {
    fn cast_from(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm(
        m: usize, k: usize, n: usize,
        a: *const Self, rsa: isize, csa: isize,
        b: *const Self, rsb: isize, csb: isize,
        c: *mut Self, rsc: isize, csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, 0.0, c, rsc, csc);
    }
}

impl Scalar for f64 {
    fn cast_from(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    unsafe fn gemm(
        m: usize, k: usize, n: usize,
        a: *const Self, rsa: isize, csa: isize,
        b: *const Self, rsb: isize, csb: isize,
        c: *mut Self, rsc: isize, csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, 0.0, c, rsc, csc);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| U::cast_from(v.as_f64())).collect(),
        }
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Self {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }

    /// `[self | other]` column-wise.
    pub fn hconcat(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::Dimension(format!(
                "hconcat of {} and {} rows",
                self.rows, other.rows
            )));
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Ok(Self {
            rows: self.rows,
            cols,
            data,
        })
    }

    /// `self · b`.
    pub fn matmul(&self, b: &Self) -> Result<Self> {
        check_inner("matmul", self.cols, b.rows)?;
        let mut out = Self::zeros(self.rows, b.cols);
        // SAFETY: strides describe row-major buffers of exactly these shapes.
        unsafe {
            T::gemm(
                self.rows, self.cols, b.cols,
                self.data.as_ptr(), self.cols as isize, 1,
                b.data.as_ptr(), b.cols as isize, 1,
                out.data.as_mut_ptr(), b.cols as isize, 1,
            );
        }
        Ok(out)
    }

    /// `selfᵀ · b`.
    pub fn matmul_tn(&self, b: &Self) -> Result<Self> {
        check_inner("matmul_tn", self.rows, b.rows)?;
        let mut out = Self::zeros(self.cols, b.cols);
        // SAFETY: the transpose is the same buffer read with swapped strides.
        unsafe {
            T::gemm(
                self.cols, self.rows, b.cols,
                self.data.as_ptr(), 1, self.cols as isize,
                b.data.as_ptr(), b.cols as isize, 1,
                out.data.as_mut_ptr(), b.cols as isize, 1,
            );
        }
        Ok(out)
    }

    /// `self · bᵀ`.
    pub fn matmul_nt(&self, b: &Self) -> Result<Self> {
        check_inner("matmul_nt", self.cols, b.cols)?;
        let mut out = Self::zeros(self.rows, b.rows);
        // SAFETY: as in `matmul_tn`, with `b` transposed.
        unsafe {
            T::gemm(
                self.rows, self.cols, b.rows,
                self.data.as_ptr(), self.cols as isize, 1,
                b.data.as_ptr(), 1, b.cols as isize,
                out.data.as_mut_ptr(), b.rows as isize, 1,
            );
        }
        Ok(out)
    }

    pub fn add_row_vector(&mut self, v: &[T]) {
        debug_assert_eq!(v.len(), self.cols);
        for row in self.data.chunks_mut(self.cols.max(1)) {
            for (x, &b) in row.iter_mut().zip(v) {
                *x += b;
            }
        }
    }

    pub fn column_sums(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.cols];
        for row in self.data.chunks(self.cols.max(1)) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        out
    }

    pub fn relu_in_place(&mut self) {
        for x in &mut self.data {
            if *x < T::zero() {
                *x = T::zero();
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl Matrix<f64> {
    pub fn from_embeddings(m: &EmbeddingMatrix) -> Self {
        Self {
            rows: m.len(),
            cols: m.dim(),
            data: m.values().iter().map(|&v| v as f64).collect(),
        }
    }
}

fn check_inner(op: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!("{op}: inner dimensions {a} and {b}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let (n, m, p) = (a.len(), b.len(), b[0].len());
        let mut out = vec![vec![0.0; p]; n];
        for i in 0..n {
            for j in 0..p {
                for k in 0..m {
                    out[i][j] += a[i][k] * b[k][j];
                }
            }
        }
        out
    }

    fn transpose(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
        (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
    }

    fn to_rows(m: &Matrix<f64>) -> Vec<Vec<f64>> {
        (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
    }

    fn close(a: &[Vec<f64>], b: &[Vec<f64>]) -> bool {
        a.iter().flatten().zip(b.iter().flatten()).all(|(x, y)| (x - y).abs() < 1e-9)
    }

    fn dense(rows: usize, cols: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, cols), rows)
    }

    proptest! {
        #[test]
        fn products_match_triple_loop(
            (a, b, c) in (1usize..6, 1usize..6, 1usize..6)
                .prop_flat_map(|(n, m, p)| (dense(n, m), dense(m, p), dense(n, p)))
        ) {
            let ma = Matrix::from_rows(&a).unwrap();
            let mb = Matrix::from_rows(&b).unwrap();
            let mc = Matrix::from_rows(&c).unwrap();
            prop_assert!(close(&to_rows(&ma.matmul(&mb).unwrap()), &naive(&a, &b)));
            // aᵀ · c has shape m×p
            prop_assert!(close(&to_rows(&ma.matmul_tn(&mc).unwrap()), &naive(&transpose(&a), &c)));
            // c · bᵀ has shape n×m
            prop_assert!(close(&to_rows(&mc.matmul_nt(&mb).unwrap()), &naive(&c, &transpose(&b))));
        }
    }

    #[test]
    fn shape_errors() {
        let a = Matrix::<f64>::zeros(2, 3);
        assert!(a.matmul(&Matrix::zeros(2, 3)).is_err());
        assert!(a.matmul_tn(&Matrix::zeros(3, 1)).is_err());
        assert!(a.matmul_nt(&Matrix::zeros(2, 2)).is_err());
        assert!(Matrix::<f64>::from_vec(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn hconcat_and_sums() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        let c = a.hconcat(&b).unwrap();
        assert_eq!(c.row(1), &[3.0, 4.0, 6.0]);
        assert_eq!(c.column_sums(), vec![4.0, 6.0, 11.0]);
    }
}
