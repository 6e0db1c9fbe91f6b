//! Sinkhorn-Knopp scaling of a nonnegative square matrix to doubly
//! stochastic form.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct SinkhornConfig {
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iters: 1000,
        }
    }
}

/// Largest deviation of any row or column sum from 1.
pub fn worst_marginal_deviation(m: &Array2<f64>) -> f64 {
    let rows = m.sum_axis(Axis(1));
    let cols = m.sum_axis(Axis(0));
    rows.iter()
        .chain(cols.iter())
        .map(|s| (s - 1.0).abs())
        .fold(0.0, f64::max)
}

/// Alternates row and column normalization until every marginal is within
/// `cfg.tol` of 1.
pub fn sinkhorn_knopp(m: &Array2<f64>, cfg: SinkhornConfig) -> Result<Array2<f64>> {
    let (rows, cols) = m.dim();
    if rows != cols {
        return Err(Error::Shape {
            op: "sinkhorn_knopp",
            lhs: m.dim(),
            rhs: (rows, rows),
        });
    }
    if let Some(bad) = m.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::Input(format!(
            "sinkhorn input entry {bad} is not a nonnegative finite number"
        )));
    }
    for (i, s) in m.sum_axis(Axis(1)).iter().enumerate() {
        if *s == 0.0 {
            return Err(Error::SinkhornSupport(format!("row {i} is all zeros")));
        }
    }
    for (j, s) in m.sum_axis(Axis(0)).iter().enumerate() {
        if *s == 0.0 {
            return Err(Error::SinkhornSupport(format!("column {j} is all zeros")));
        }
    }

    let mut x = m.clone();
    if worst_marginal_deviation(&x) <= cfg.tol {
        return Ok(x);
    }
    for _ in 0..cfg.max_iters {
        for mut row in x.rows_mut() {
            let s = row.sum();
            row /= s;
        }
        for mut col in x.columns_mut() {
            let s = col.sum();
            col /= s;
        }
        if worst_marginal_deviation(&x) <= cfg.tol {
            return Ok(x);
        }
    }
    Err(Error::SinkhornConvergence {
        iters: cfg.max_iters,
        worst: worst_marginal_deviation(&x),
    })
}

/// Adds `1e-6 · max(row)` (or `1e-6` for an all-zero row) to every entry of
/// each row so the matrix has total support.
pub fn smooth_for_support(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(0.0f64, |a, &b| a.max(b));
        let eps = 1e-6 * if max > 0.0 { max } else { 1.0 };
        row.mapv_inplace(|v| v + eps);
    }
    out
}
