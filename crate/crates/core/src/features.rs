use std::sync::Arc;

use ndarray::Array2;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

/// Node feature matrix `X`, stored densely or as a sparse matrix.
#[derive(Debug, Clone)]
pub enum Features {
    Dense(Arc<Array2<f64>>),
    Sparse(Arc<CsrMatrix>),
}

impl Features {
    pub fn dense(x: Array2<f64>) -> Self {
        Features::Dense(Arc::new(x))
    }

    /// `X = I`, the featureless setting.
    pub fn identity(n: usize) -> Self {
        Features::Sparse(Arc::new(CsrMatrix::identity(n)))
    }

    pub fn num_rows(&self) -> usize {
        match self {
            Features::Dense(x) => x.nrows(),
            Features::Sparse(s) => s.rows(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Features::Dense(x) => x.ncols(),
            Features::Sparse(s) => s.cols(),
        }
    }

    /// Records `X · w` on the tape.
    pub fn project(&self, tape: &mut Tape, w: Var) -> Result<Var> {
        match self {
            Features::Dense(x) => {
                let xv = tape.constant(x.as_ref().clone())?;
                tape.matmul(xv, w)
            }
            Features::Sparse(s) => tape.spmm(s, w),
        }
    }

    pub fn to_dense(&self) -> Array2<f64> {
        match self {
            Features::Dense(x) => x.as_ref().clone(),
            Features::Sparse(s) => s.to_dense(),
        }
    }

    /// Rows reordered so that new row `perm[v]` holds old row `v`.
    pub fn permute_rows(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.num_rows() {
            return Err(Error::Input("permutation length differs from feature rows".into()));
        }
        Ok(match self {
            Features::Dense(x) => {
                let mut out = Array2::zeros(x.dim());
                for (old, &new) in perm.iter().enumerate() {
                    out.row_mut(new).assign(&x.row(old));
                }
                Features::dense(out)
            }
            Features::Sparse(s) => {
                let triplets = (0..s.rows()).flat_map(|r| s.row(r).map(move |(c, v)| (perm[r], c, v)));
                Features::Sparse(Arc::new(CsrMatrix::from_triplets(s.rows(), s.cols(), triplets)?))
            }
        })
    }
}
