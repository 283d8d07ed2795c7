//! Compressed sparse row matrices for adjacency structures and sparse
//! feature inputs. Only what the pipeline needs: COO assembly, transpose,
//! and CSR-times-dense products (row-parallel, fixed per-row accumulation
//! order).

use std::sync::Arc;

use crate::dense::Mat;

#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    data: Vec<f64>,
}

impl CsrMatrix {
    pub fn empty(rows: usize, cols: usize) -> Self {
        CsrMatrix { rows, cols, indptr: vec![0; rows + 1], indices: Vec::new(), data: Vec::new() }
    }

    /// Assemble from coordinate triples. Duplicate coordinates are summed.
    pub fn from_coo(rows: usize, cols: usize, entries: &[(usize, usize, f64)]) -> Self {
        let mut sorted: Vec<(usize, usize, f64)> = entries.to_vec();
        sorted.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut row_counts = vec![0usize; rows];
        let mut indices = Vec::with_capacity(sorted.len());
        let mut data: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for &(r, c, v) in &sorted {
            assert!(r < rows && c < cols, "coo entry ({r},{c}) out of {rows}x{cols}");
            if last == Some((r, c)) {
                *data.last_mut().unwrap() += v;
            } else {
                row_counts[r] += 1;
                indices.push(c);
                data.push(v);
                last = Some((r, c));
            }
        }
        let mut indptr = vec![0usize; rows + 1];
        for r in 0..rows {
            indptr[r + 1] = indptr[r] + row_counts[r];
        }
        CsrMatrix { rows, cols, indptr, indices, data }
    }

    pub fn from_dense(m: &Mat) -> Self {
        let mut entries = Vec::new();
        for i in 0..m.rows() {
            for j in 0..m.cols() {
                let v = m.get(i, j);
                if v != 0.0 {
                    entries.push((i, j, v));
                }
            }
        }
        CsrMatrix::from_coo(m.rows(), m.cols(), &entries)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn row_entries(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.data[span].iter().copied())
    }

    pub fn iter_entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.rows).flat_map(move |r| self.row_entries(r).map(move |(c, v)| (r, c, v)))
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.indptr[r]..self.indptr[r + 1];
        match self.indices[span.clone()].binary_search(&c) {
            Ok(pos) => self.data[span.start + pos],
            Err(_) => 0.0,
        }
    }

    pub fn has_entry(&self, r: usize, c: usize) -> bool {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span].binary_search(&c).is_ok()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|r| self.row_entries(r).map(|(_, v)| v).sum())
            .collect()
    }

    pub fn transpose(&self) -> CsrMatrix {
        let entries: Vec<(usize, usize, f64)> =
            self.iter_entries().map(|(r, c, v)| (c, r, v)).collect();
        CsrMatrix::from_coo(self.cols, self.rows, &entries)
    }

    pub fn is_symmetric(&self) -> bool {
        if self.rows != self.cols {
            return false;
        }
        self.iter_entries().all(|(r, c, v)| self.get(c, r) == v)
    }

    pub fn to_dense(&self) -> Mat {
        let mut m = Mat::zeros(self.rows, self.cols);
        for (r, c, v) in self.iter_entries() {
            m.set(r, c, m.get(r, c) + v);
        }
        m
    }

    /// `self * dense`; each output row accumulates over the CSR row's
    /// entries in stored (column-ascending) order.
    pub fn matmul_dense(&self, dense: &Mat) -> Mat {
        assert_eq!(self.cols, dense.rows(), "csr*dense shape mismatch");
        let mut out = Mat::zeros(self.rows, dense.cols());
        csr_matmul_dense_into(&mut out, self, dense);
        out
    }
}

pub fn csr_matmul_dense_into_seq(dst: &mut Mat, s: &CsrMatrix, d: &Mat) {
    let n = d.cols();
    dst.data_mut().fill(0.0);
    for r in 0..s.rows {
        let span = s.indptr[r]..s.indptr[r + 1];
        let cols = &s.indices[span.clone()];
        let vals = &s.data[span];
        let out_start = r * n;
        for (&c, &v) in cols.iter().zip(vals) {
            let d_row = d.row(c);
            let out_row = &mut dst.data_mut()[out_start..out_start + n];
            for (o, &x) in out_row.iter_mut().zip(d_row) {
                *o += v * x;
            }
        }
    }
}

#[cfg(feature = "parallel")]
pub fn csr_matmul_dense_into_par(dst: &mut Mat, s: &CsrMatrix, d: &Mat) {
    use rayon::prelude::*;
    let n = d.cols();
    dst.data_mut()
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(r, out_row)| {
            out_row.fill(0.0);
            let span = s.indptr[r]..s.indptr[r + 1];
            for (&c, &v) in s.indices[span.clone()].iter().zip(&s.data[span]) {
                let d_row = d.row(c);
                for (o, &x) in out_row.iter_mut().zip(d_row) {
                    *o += v * x;
                }
            }
        });
}

pub fn csr_matmul_dense_into(dst: &mut Mat, s: &CsrMatrix, d: &Mat) {
    #[cfg(feature = "parallel")]
    {
        if s.rows * d.cols() >= 16 * 1024 {
            csr_matmul_dense_into_par(dst, s, d);
            return;
        }
    }
    csr_matmul_dense_into_seq(dst, s, d);
}

/// A CSR matrix bundled with its transpose, as the autodiff tape needs both
/// directions. For symmetric matrices both handles point at the same data.
#[derive(Clone, Debug)]
pub struct SparseOperand {
    pub mat: Arc<CsrMatrix>,
    pub transposed: Arc<CsrMatrix>,
}

impl SparseOperand {
    pub fn new(mat: CsrMatrix) -> Self {
        let transposed = Arc::new(mat.transpose());
        SparseOperand { mat: Arc::new(mat), transposed }
    }

    pub fn symmetric(mat: CsrMatrix) -> Self {
        debug_assert!(mat.is_symmetric());
        let mat = Arc::new(mat);
        SparseOperand { transposed: Arc::clone(&mat), mat }
    }
}
