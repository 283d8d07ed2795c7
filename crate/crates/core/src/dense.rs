//! Dense row-major `f64` matrices and the hot kernels behind them.
//!
//! Every kernel comes in two flavours: a sequential reference
//! (`*_seq`) and, with the `parallel` feature, a rayon version (`*_par`)
//! that splits work across *independent output rows*. Each output element
//! is always accumulated in the same fixed order, so the two flavours are
//! bitwise identical and results do not depend on the thread count.

use crate::{Error, Result};

/// Dense row-major matrix of 64-bit reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Below this many output elements the parallel dispatchers stay sequential;
/// spawning tasks costs more than the arithmetic saved.
const PAR_MIN_ELEMS: usize = 16 * 1024;

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must be rows*cols");
        Mat { rows, cols, data }
    }

    /// Build from nested rows; handy in tests.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Mat { rows, cols, data: vec![value; rows * cols] }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    pub fn scalar(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scaled_add_assign(&mut self, factor: f64, other: &Mat) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for a in &mut self.data {
            *a *= factor;
        }
    }

    /// Sum of all entries, accumulated left-to-right in row-major order.
    pub fn sum(&self) -> f64 {
        let mut acc = 0.0;
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &v| m.max(v.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `self * other`, shape-checked.
    pub fn matmul(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.rows {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!(
                    "{}x{} * {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            });
        }
        let mut out = Mat::zeros(self.rows, other.cols);
        matmul_into(&mut out, self, other);
        Ok(out)
    }
}

/// `dst = a * b` with the classic i-k-j loop: for each output row the `k`
/// accumulation runs in a fixed order, and the inner `j` loop vectorises.
pub fn matmul_into_seq(dst: &mut Mat, a: &Mat, b: &Mat) {
    debug_assert_eq!(a.cols, b.rows);
    debug_assert_eq!((dst.rows, dst.cols), (a.rows, b.cols));
    let n = b.cols;
    dst.data.fill(0.0);
    for i in 0..a.rows {
        let out_row = &mut dst.data[i * n..(i + 1) * n];
        let a_row = &a.data[i * a.cols..(i + 1) * a.cols];
        for (k, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = &b.data[k * n..(k + 1) * n];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
}

#[cfg(feature = "parallel")]
pub fn matmul_into_par(dst: &mut Mat, a: &Mat, b: &Mat) {
    use rayon::prelude::*;
    debug_assert_eq!(a.cols, b.rows);
    debug_assert_eq!((dst.rows, dst.cols), (a.rows, b.cols));
    let n = b.cols;
    dst.data
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(i, out_row)| {
            out_row.fill(0.0);
            let a_row = &a.data[i * a.cols..(i + 1) * a.cols];
            for (k, &aik) in a_row.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let b_row = &b.data[k * n..(k + 1) * n];
                for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                    *o += aik * bkj;
                }
            }
        });
}

pub fn matmul_into(dst: &mut Mat, a: &Mat, b: &Mat) {
    #[cfg(feature = "parallel")]
    {
        if a.rows * b.cols >= PAR_MIN_ELEMS && a.rows > 1 {
            matmul_into_par(dst, a, b);
            return;
        }
    }
    matmul_into_seq(dst, a, b);
}

/// Squared Euclidean distances between all row pairs: `out[i][j] = ||x_i - x_j||^2`.
pub fn pairwise_sqdist_seq(x: &Mat) -> Mat {
    let n = x.rows;
    let mut out = Mat::zeros(n, n);
    for i in 0..n {
        let xi = x.row(i);
        let out_row = out.row_mut(i);
        for (j, o) in out_row.iter_mut().enumerate() {
            let xj = &x.data[j * x.cols..(j + 1) * x.cols];
            let mut acc = 0.0;
            for (a, b) in xi.iter().zip(xj) {
                let d = a - b;
                acc += d * d;
            }
            *o = acc;
        }
    }
    out
}

#[cfg(feature = "parallel")]
pub fn pairwise_sqdist_par(x: &Mat) -> Mat {
    use rayon::prelude::*;
    let n = x.rows;
    let mut out = Mat::zeros(n, n);
    let cols = x.cols;
    out.data
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(i, out_row)| {
            let xi = &x.data[i * cols..(i + 1) * cols];
            for (j, o) in out_row.iter_mut().enumerate() {
                let xj = &x.data[j * cols..(j + 1) * cols];
                let mut acc = 0.0;
                for (a, b) in xi.iter().zip(xj) {
                    let d = a - b;
                    acc += d * d;
                }
                *o = acc;
            }
        });
    out
}

pub fn pairwise_sqdist(x: &Mat) -> Mat {
    #[cfg(feature = "parallel")]
    {
        if x.rows * x.rows >= PAR_MIN_ELEMS {
            return pairwise_sqdist_par(x);
        }
    }
    pairwise_sqdist_seq(x)
}

/// Row dot products of `a` against every row of `b`: `out[i][j] = a_i . b_j`.
/// This is `a * b^T` without materialising the transpose.
pub fn gram_into_seq(dst: &mut Mat, a: &Mat, b: &Mat) {
    debug_assert_eq!(a.cols, b.cols);
    debug_assert_eq!((dst.rows, dst.cols), (a.rows, b.rows));
    for i in 0..a.rows {
        let ai = a.row(i);
        let out_row = &mut dst.data[i * b.rows..(i + 1) * b.rows];
        for (j, o) in out_row.iter_mut().enumerate() {
            let bj = &b.data[j * b.cols..(j + 1) * b.cols];
            let mut acc = 0.0;
            for (x, y) in ai.iter().zip(bj) {
                acc += x * y;
            }
            *o = acc;
        }
    }
}

#[cfg(feature = "parallel")]
pub fn gram_into_par(dst: &mut Mat, a: &Mat, b: &Mat) {
    use rayon::prelude::*;
    debug_assert_eq!(a.cols, b.cols);
    debug_assert_eq!((dst.rows, dst.cols), (a.rows, b.rows));
    let cols = a.cols;
    let bn = b.rows;
    dst.data
        .par_chunks_mut(bn)
        .enumerate()
        .for_each(|(i, out_row)| {
            let ai = &a.data[i * cols..(i + 1) * cols];
            for (j, o) in out_row.iter_mut().enumerate() {
                let bj = &b.data[j * cols..(j + 1) * cols];
                let mut acc = 0.0;
                for (x, y) in ai.iter().zip(bj) {
                    acc += x * y;
                }
                *o = acc;
            }
        });
}

pub fn gram_into(dst: &mut Mat, a: &Mat, b: &Mat) {
    #[cfg(feature = "parallel")]
    {
        if a.rows * b.rows >= PAR_MIN_ELEMS {
            gram_into_par(dst, a, b);
            return;
        }
    }
    gram_into_seq(dst, a, b);
}
