//! Compressed sparse row matrices and the sparse-dense products used by
//! propagation and the Chebyshev estimator.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Real-valued CSR matrix. Column indices within a row are sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn from_raw(
        rows: usize,
        cols: usize,
        indptr: Vec<usize>,
        indices: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if indptr.len() != rows + 1 || indices.len() != values.len() {
            return Err(Error::Input("malformed CSR arrays".into()));
        }
        if indptr[rows] != indices.len() || indptr.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Input("CSR row pointers are inconsistent".into()));
        }
        if let Some(&c) = indices.iter().find(|&&c| c >= cols) {
            return Err(Error::NodeOutOfRange { id: c, n: cols });
        }
        Ok(Self {
            rows,
            cols,
            indptr,
            indices,
            values,
        })
    }

    /// Builds a matrix from (row, col, value) triplets. Duplicate positions are summed.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut per_row: Vec<Vec<(usize, f64)>> = vec![Vec::new(); rows];
        for (r, c, v) in triplets {
            if r >= rows {
                return Err(Error::NodeOutOfRange { id: r, n: rows });
            }
            if c >= cols {
                return Err(Error::NodeOutOfRange { id: c, n: cols });
            }
            per_row[r].push((c, v));
        }
        let mut indptr = Vec::with_capacity(rows + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for mut row in per_row {
            row.sort_by_key(|&(c, _)| c);
            for (c, v) in row {
                if indices.len() > *indptr.last().unwrap() && *indices.last().unwrap() == c {
                    *values.last_mut().unwrap() += v;
                } else {
                    indices.push(c);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        Ok(Self {
            rows,
            cols,
            indptr,
            indices,
            values,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            rows: n,
            cols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        Self {
            rows: n,
            cols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: diag.to_vec(),
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

    pub fn indptr(&self) -> &[usize] {
        &self.indptr
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Iterates the stored (col, value) entries of one row.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.indptr[r]..self.indptr[r + 1];
        match self.indices[span.clone()].binary_search(&c) {
            Ok(pos) => self.values[span.start + pos],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.rows, self.cols));
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                out[[r, c]] += v;
            }
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let triplets = (0..self.rows).flat_map(|r| self.row(r).map(move |(c, v)| (c, r, v)));
        Self::from_triplets(self.cols, self.rows, triplets).expect("transpose keeps indices in range")
    }

    /// Adds `scale` times the identity. Requires a square matrix.
    pub fn add_identity(&self, scale: f64) -> Self {
        assert_eq!(self.rows, self.cols, "add_identity on non-square matrix");
        let triplets = (0..self.rows)
            .flat_map(|r| self.row(r).map(move |(c, v)| (r, c, v)))
            .chain((0..self.rows).map(|r| (r, r, scale)));
        Self::from_triplets(self.rows, self.cols, triplets).expect("indices in range")
    }

    /// `self · dense`.
    pub fn mul_dense(&self, dense: &Array2<f64>) -> Result<Array2<f64>> {
        if self.cols != dense.nrows() {
            return Err(Error::Shape {
                op: "spmm",
                lhs: self.shape(),
                rhs: dense.dim(),
            });
        }
        let width = dense.ncols();
        let mut out = Array2::<f64>::zeros((self.rows, width));
        let src = dense.as_standard_layout();
        let src = src.as_slice().expect("standard layout");
        let dst = out.as_slice_mut().expect("fresh array is contiguous");
        for r in 0..self.rows {
            let out_row = &mut dst[r * width..(r + 1) * width];
            for (c, v) in self.row(r) {
                let in_row = &src[c * width..(c + 1) * width];
                for (o, x) in out_row.iter_mut().zip(in_row) {
                    *o += v * x;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · dense` without materializing the transpose.
    pub fn transpose_mul_dense(&self, dense: &Array2<f64>) -> Result<Array2<f64>> {
        if self.rows != dense.nrows() {
            return Err(Error::Shape {
                op: "spmm_t",
                lhs: (self.cols, self.rows),
                rhs: dense.dim(),
            });
        }
        let width = dense.ncols();
        let mut out = Array2::<f64>::zeros((self.cols, width));
        let src = dense.as_standard_layout();
        let src = src.as_slice().expect("standard layout");
        let dst = out.as_slice_mut().expect("fresh array is contiguous");
        for r in 0..self.rows {
            let in_row = &src[r * width..(r + 1) * width];
            for (c, v) in self.row(r) {
                let out_row = &mut dst[c * width..(c + 1) * width];
                for (o, x) in out_row.iter_mut().zip(in_row) {
                    *o += v * x;
                }
            }
        }
        Ok(out)
    }

    /// Sparse-sparse product, used only for materializing polynomials in checks.
    pub fn mul_sparse(&self, other: &CsrMatrix) -> Result<CsrMatrix> {
        if self.cols != other.rows {
            return Err(Error::Shape {
                op: "spgemm",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let mut triplets = Vec::new();
        for r in 0..self.rows {
            for (k, a) in self.row(r) {
                for (c, b) in other.row(k) {
                    triplets.push((r, c, a * b));
                }
            }
        }
        CsrMatrix::from_triplets(self.rows, other.cols, triplets)
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.rows == self.cols && (0..self.rows).all(|r| self.row(r).all(|(c, v)| (self.get(c, r) - v).abs() <= tol))
    }
}
