//! Compatibility-guided propagation of centered beliefs, plus the
//! initialization, recovery and error metric of the compatibility parameter.

use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{row_softmax_values, Tape, Var};
use crate::error::{Error, Result};
use crate::estimator::Activation;
use crate::graph::{LabelAssignment, SparseGraph};
use crate::sinkhorn::{sinkhorn_knopp, smooth_for_support, SinkhornConfig};
use crate::sparse::CsrMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PropagationConfig {
    pub num_layers: usize,
    pub activation: Activation,
    /// Subtract `D·B·H̄²` in every layer except the last.
    pub echo_cancellation: bool,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self {
            num_layers: 1,
            activation: Activation::Identity,
            echo_cancellation: true,
        }
    }
}

impl PropagationConfig {
    pub fn with_layers(num_layers: usize) -> Self {
        Self {
            num_layers,
            ..Self::default()
        }
    }
}

/// Trainable, zero-centered compatibility parameter `H̄`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompatParam {
    pub hbar: Array2<f64>,
    /// Snapshot of `hbar` at initialization.
    pub hbar0: Array2<f64>,
    /// Last recovered doubly stochastic estimate, if computed.
    pub recovered: Option<Array2<f64>>,
}

impl CompatParam {
    pub fn new(hbar: Array2<f64>) -> Self {
        Self {
            hbar0: hbar.clone(),
            hbar,
            recovered: None,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.hbar.nrows()
    }

    /// `Ĥ` implied by the initialization snapshot.
    pub fn initial_estimate(&self) -> Result<Array2<f64>> {
        recover_h(&self.hbar0)
    }
}

/// Graph operators used during propagation, built once per graph.
#[derive(Debug, Clone)]
pub struct PropagationGraph {
    pub adjacency: Arc<CsrMatrix>,
    pub degree: Arc<CsrMatrix>,
}

impl PropagationGraph {
    pub fn new(g: &SparseGraph) -> Self {
        Self {
            adjacency: Arc::clone(g.adjacency()),
            degree: Arc::new(g.degree_matrix()),
        }
    }
}

/// `B̄^(0) = B_p − 1/|Y|`.
pub fn center_beliefs(bp: &Array2<f64>) -> Array2<f64> {
    let k = bp.ncols() as f64;
    bp - 1.0 / k
}

/// Records `K` propagation layers on the tape.
///
/// Layers `1..K` apply `σ(B̄⁰ + A·B·H̄ − D·B·H̄²)`; the final layer drops the
/// echo term.
pub fn propagate(
    tape: &mut Tape,
    graph: &PropagationGraph,
    b0: Var,
    hbar: Var,
    cfg: &PropagationConfig,
) -> Result<Var> {
    if cfg.num_layers == 0 {
        return Err(Error::Input("propagation needs at least one layer".into()));
    }
    let (bk, hk) = (tape.value(b0).ncols(), tape.value(hbar).dim());
    if hk != (bk, bk) {
        return Err(Error::Shape {
            op: "propagate",
            lhs: tape.value(b0).dim(),
            rhs: hk,
        });
    }
    let hbar_sq = if cfg.echo_cancellation && cfg.num_layers > 1 {
        Some(tape.matmul(hbar, hbar)?)
    } else {
        None
    };
    let mut b = b0;
    for layer in 1..=cfg.num_layers {
        let ab = tape.spmm(&graph.adjacency, b)?;
        let msg = tape.matmul(ab, hbar)?;
        let mut pre = tape.add(b0, msg)?;
        if layer < cfg.num_layers {
            if let Some(h2) = hbar_sq {
                let db = tape.spmm(&graph.degree, b)?;
                let echo = tape.matmul(db, h2)?;
                pre = tape.sub(pre, echo)?;
            }
        }
        b = cfg.activation.apply(tape, pre)?;
    }
    Ok(b)
}

/// Inference-only propagation on plain arrays.
pub fn propagate_values(
    graph: &PropagationGraph,
    b0: &Array2<f64>,
    hbar: &Array2<f64>,
    cfg: &PropagationConfig,
) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let b = tape.constant(b0.clone())?;
    let h = tape.constant(hbar.clone())?;
    let out = propagate(&mut tape, graph, b, h, cfg)?;
    Ok(tape.value(out).clone())
}

/// `B_f = softmax(B̄^(K))`, row-wise.
pub fn final_beliefs(bk: &Array2<f64>) -> Array2<f64> {
    row_softmax_values(bk)
}

/// Estimates `H̄₀` from training labels and pretrained prior beliefs.
///
/// `raw = (M∘Y)ᵀ·A·B̃` with `B̃ = M∘Y + (1−M)∘B_p`; the smoothed raw matrix is
/// scaled to doubly stochastic `Ĥ` and centered by `−1/|Y|`.
pub fn init_hbar(
    g: &SparseGraph,
    labels: &LabelAssignment,
    train_mask: &[usize],
    bp: &Array2<f64>,
) -> Result<CompatParam> {
    let n = g.num_nodes();
    let k = labels.num_classes();
    if train_mask.is_empty() {
        return Err(Error::EmptyMask("init_hbar"));
    }
    if bp.dim() != (n, k) || labels.len() != n {
        return Err(Error::Shape {
            op: "init_hbar",
            lhs: bp.dim(),
            rhs: (labels.len(), k),
        });
    }
    let y = labels.labels();
    let mut enhanced = bp.clone();
    let mut masked_onehot = Array2::<f64>::zeros((n, k));
    for &v in train_mask {
        if v >= n {
            return Err(Error::NodeOutOfRange { id: v, n });
        }
        enhanced.row_mut(v).fill(0.0);
        enhanced[[v, y[v]]] = 1.0;
        masked_onehot[[v, y[v]]] = 1.0;
    }
    let ab = g.adjacency().mul_dense(&enhanced)?;
    let raw = masked_onehot.t().dot(&ab);
    let h_hat = scale_smoothed(&raw, INIT_SINKHORN_TOL)?;
    Ok(CompatParam::new(h_hat - 1.0 / k as f64))
}

pub const RECOVERY_FALLBACK_ITERS: usize = 100_000;

/// Marginal tolerance for the initial estimate. `Φ(H̄₀)` sums `|Y|` row
/// deviations, so this is well below the default.
pub const INIT_SINKHORN_TOL: f64 = 1e-11;

/// Smooths, then scales. Near-singular smoothed patterns (a class with no
/// labeled neighbors) converge slowly, so a failed default run is retried
/// with `RECOVERY_FALLBACK_ITERS` sweeps.
fn scale_smoothed(m: &Array2<f64>, tol: f64) -> Result<Array2<f64>> {
    let smoothed = smooth_for_support(m);
    let cfg = SinkhornConfig {
        tol,
        ..SinkhornConfig::default()
    };
    match sinkhorn_knopp(&smoothed, cfg) {
        Err(Error::SinkhornConvergence { .. }) => sinkhorn_knopp(
            &smoothed,
            SinkhornConfig {
                max_iters: RECOVERY_FALLBACK_ITERS,
                ..cfg
            },
        ),
        other => other,
    }
}

/// `Ĥ = S(max(H̄ + 1/|Y|, 0))`.
///
/// If the clamped matrix lacks the support Sinkhorn needs, it is smoothed
/// the same way as during initialization and scaled again.
pub fn recover_h(hbar: &Array2<f64>) -> Result<Array2<f64>> {
    let k = hbar.nrows() as f64;
    let shifted = hbar.mapv(|v| (v + 1.0 / k).max(0.0));
    match sinkhorn_knopp(&shifted, SinkhornConfig::default()) {
        Ok(h) => Ok(h),
        Err(Error::SinkhornSupport(_)) | Err(Error::SinkhornConvergence { .. }) => {
            scale_smoothed(&shifted, SinkhornConfig::default().tol)
        }
        Err(e) => Err(e),
    }
}

/// Mean absolute elementwise error `Σ|Ĥ − H| / |Y|²`.
pub fn h_estimation_error(hhat: &Array2<f64>, htrue: &Array2<f64>) -> Result<f64> {
    if hhat.dim() != htrue.dim() {
        return Err(Error::Shape {
            op: "h_estimation_error",
            lhs: hhat.dim(),
            rhs: htrue.dim(),
        });
    }
    let total: f64 = hhat.iter().zip(htrue.iter()).map(|(a, b)| (a - b).abs()).sum();
    Ok(total / hhat.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::empirical_compatibility;
    use crate::sinkhorn::worst_marginal_deviation;
    use ndarray::array;

    #[test]
    fn centering_examples() {
        let uniform = Array2::from_elem((3, 4), 0.25);
        assert!(center_beliefs(&uniform).iter().all(|&v| v == 0.0));
        assert_eq!(center_beliefs(&array![[1.0, 0.0]]), array![[0.5, -0.5]]);
        let bp = row_softmax_values(&Array2::from_shape_fn((7, 5), |(i, j)| {
            ((i * 5 + j) as f64).sin() * 3.0
        }));
        let c = center_beliefs(&bp);
        assert!(c.rows().into_iter().all(|r| r.sum().abs() < 1e-12));
    }

    #[test]
    fn edgeless_graph_returns_prior() {
        let g = SparseGraph::build(3, std::iter::empty()).unwrap();
        let pg = PropagationGraph::new(&g);
        let b0 = array![[0.2, -0.2], [-0.1, 0.1], [0.0, 0.0]];
        let h = array![[0.3, -0.3], [-0.3, 0.3]];
        for k in 1..=3 {
            let out = propagate_values(&pg, &b0, &h, &PropagationConfig::with_layers(k)).unwrap();
            assert_eq!(out, b0);
        }
    }

    #[test]
    fn zero_hbar_returns_prior() {
        let g = SparseGraph::build(3, [(0, 1), (1, 2)]).unwrap();
        let pg = PropagationGraph::new(&g);
        let b0 = array![[0.2, -0.2], [-0.1, 0.1], [0.4, -0.4]];
        let out = propagate_values(&pg, &b0, &Array2::zeros((2, 2)), &PropagationConfig::with_layers(2)).unwrap();
        assert_eq!(out, b0);
    }

    #[test]
    fn two_node_two_layer_scalar_oracle() {
        // Nodes 0 and 1 joined by one edge, degree 1 each.
        let g = SparseGraph::build(2, [(0, 1)]).unwrap();
        let pg = PropagationGraph::new(&g);
        let b0 = array![[0.3, -0.3], [-0.1, 0.1]];
        let h = array![[-0.2, 0.2], [0.4, -0.4]];

        let mut h2 = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                h2[i][j] = (0..2).map(|l| h[[i, l]] * h[[l, j]]).sum();
            }
        }
        // Layer 1 with echo cancellation.
        let mut b1 = [[0.0; 2]; 2];
        for v in 0..2 {
            let u = 1 - v;
            for c in 0..2 {
                let msg: f64 = (0..2).map(|l| b0[[u, l]] * h[[l, c]]).sum();
                let echo: f64 = (0..2).map(|l| b0[[v, l]] * h2[l][c]).sum();
                b1[v][c] = b0[[v, c]] + msg - echo;
            }
        }
        // Final layer, no echo term.
        let mut b2 = [[0.0; 2]; 2];
        for v in 0..2 {
            let u = 1 - v;
            for c in 0..2 {
                let msg: f64 = (0..2).map(|l| b1[u][l] * h[[l, c]]).sum();
                b2[v][c] = b0[[v, c]] + msg;
            }
        }
        let out = propagate_values(&pg, &b0, &h, &PropagationConfig::with_layers(2)).unwrap();
        for v in 0..2 {
            for c in 0..2 {
                assert!((out[[v, c]] - b2[v][c]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn echo_term_equals_reflected_message() {
        // Single edge, node 1 starts silent. Node 0's belief travels to node 1
        // and back, arriving as B0[0]·H̄·H̄: exactly D·B·H̄² for degree 1.
        let g = SparseGraph::build(2, [(0, 1)]).unwrap();
        let pg = PropagationGraph::new(&g);
        let b0 = array![[0.3, -0.3], [0.0, 0.0]];
        let h = array![[-0.2, 0.2], [0.4, -0.4]];
        let reflected = b0.row(0).dot(&h).dot(&h);

        let no_echo = propagate_values(
            &pg,
            &b0,
            &h,
            &PropagationConfig {
                num_layers: 2,
                echo_cancellation: false,
                ..Default::default()
            },
        )
        .unwrap();
        // Without cancellation node 0 hears its own belief back.
        for c in 0..2 {
            assert!((no_echo[[0, c]] - b0[[0, c]] - reflected[c]).abs() < 1e-15);
        }

        // With cancellation, node 0's layer-1 state is B0[0] − reflected, which
        // node 1 then forwards; the final difference at node 1 is −reflected·H̄.
        let with_echo = propagate_values(&pg, &b0, &h, &PropagationConfig::with_layers(2)).unwrap();
        let expected = reflected.dot(&h);
        for c in 0..2 {
            assert!((no_echo[[1, c]] - with_echo[[1, c]] - expected[c]).abs() < 1e-15);
        }
    }

    #[test]
    fn propagation_is_permutation_equivariant() {
        let g = SparseGraph::build(5, [(0, 1), (1, 2), (2, 3), (3, 4), (4, 0), (0, 2)]).unwrap();
        let b0 = Array2::from_shape_fn((5, 3), |(i, j)| ((i * 3 + j) as f64).cos() * 0.3);
        let h = array![[0.1, -0.2, 0.1], [-0.3, 0.2, 0.1], [0.05, 0.0, -0.05]];
        let perm = [3, 0, 4, 1, 2];
        let gp = g.relabel(&perm).unwrap();
        let mut b0p = Array2::zeros(b0.dim());
        for (old, &new) in perm.iter().enumerate() {
            b0p.row_mut(new).assign(&b0.row(old));
        }
        let cfg = PropagationConfig::with_layers(2);
        let out = propagate_values(&PropagationGraph::new(&g), &b0, &h, &cfg).unwrap();
        let outp = propagate_values(&PropagationGraph::new(&gp), &b0p, &h, &cfg).unwrap();
        for (old, &new) in perm.iter().enumerate() {
            for c in 0..3 {
                assert!((out[[old, c]] - outp[[new, c]]).abs() < 1e-14);
            }
        }
    }

    /// Two classes, 3-regular bipartite-free toy graph: two triangles of class
    /// 0 and 1 with a perfect matching between them.
    fn prism() -> (SparseGraph, LabelAssignment) {
        let g = SparseGraph::build(
            6,
            [(0, 1), (1, 2), (2, 0), (3, 4), (4, 5), (5, 3), (0, 3), (1, 4), (2, 5)],
        )
        .unwrap();
        (g, LabelAssignment::new(vec![0, 0, 0, 1, 1, 1], 2).unwrap())
    }

    #[test]
    fn init_with_perfect_prior_recovers_empirical_h() {
        let (g, y) = prism();
        let all: Vec<usize> = (0..6).collect();
        let cp = init_hbar(&g, &y, &all, &y.onehot()).unwrap();
        let hhat = cp.initial_estimate().unwrap();
        let h = empirical_compatibility(&g, &y).unwrap();
        assert!(h_estimation_error(&hhat, &h).unwrap() < 1e-5);
    }

    #[test]
    fn init_with_uniform_prior_is_near_zero() {
        let (g, y) = prism();
        let bp = Array2::from_elem((6, 2), 0.5);
        let cp = init_hbar(&g, &y, &[0, 3], &bp).unwrap();
        // Train nodes 0 and 3 are neighbors, so each sees one labeled
        // neighbor of the other class plus two uniform ones.
        let hhat = cp.initial_estimate().unwrap();
        assert!(worst_marginal_deviation(&hhat) < 1e-8);
        assert!((hhat[[0, 0]] - hhat[[1, 1]]).abs() < 1e-9);
        let cp = init_hbar(&g, &y, &[1, 4], &Array2::from_elem((6, 2), 0.5)).unwrap();
        assert!(cp.hbar0.iter().all(|v| v.abs() < 0.5));
    }

    #[test]
    fn uniform_prior_without_labeled_neighbors_gives_zero_hbar() {
        // Train nodes 0 and 4 are not adjacent; all their neighbors carry
        // uniform beliefs, so both raw rows are identical and uniform.
        let (g, y) = prism();
        let bp = Array2::from_elem((6, 2), 0.5);
        let cp = init_hbar(&g, &y, &[0, 4], &bp).unwrap();
        assert!(cp.hbar0.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn init_rows_sum_to_zero() {
        let (g, y) = prism();
        let bp = row_softmax_values(&Array2::from_shape_fn((6, 2), |(i, j)| (i as f64 - j as f64) * 0.7));
        let cp = init_hbar(&g, &y, &[0, 5], &bp).unwrap();
        for row in cp.hbar0.rows() {
            assert!(row.sum().abs() < 1e-9);
        }
    }

    #[test]
    fn recover_examples() {
        let (g, y) = prism();
        let bp = row_softmax_values(&Array2::from_shape_fn((6, 2), |(i, j)| (i * j) as f64 * 0.3));
        let cp = init_hbar(&g, &y, &[0, 1, 4], &bp).unwrap();
        let h_init = &cp.hbar0 + 0.5;
        let rec = recover_h(&cp.hbar).unwrap();
        assert!(h_estimation_error(&rec, &h_init).unwrap() < 1e-8);

        let rec = recover_h(&Array2::zeros((3, 3))).unwrap();
        assert!(rec.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn recover_handles_clamped_rows() {
        let hbar = array![[-2.0, -2.0], [0.5, -0.5]];
        let rec = recover_h(&hbar).unwrap();
        assert!(worst_marginal_deviation(&rec) < 1e-8);
    }

    #[test]
    fn estimation_error_examples() {
        let a = array![[0.3, 0.7], [0.6, 0.4]];
        assert_eq!(h_estimation_error(&a, &a).unwrap(), 0.0);
        let u = Array2::from_elem((2, 2), 0.5);
        assert_eq!(h_estimation_error(&u, &Array2::eye(2)).unwrap(), 0.5);
        let b = array![[0.1, 0.2], [0.9, 0.0]];
        let mut expected = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                expected += (a[[i, j]] - b[[i, j]]).abs();
            }
        }
        assert!((h_estimation_error(&a, &b).unwrap() - expected / 4.0).abs() < 1e-15);
        assert!(h_estimation_error(&a, &Array2::zeros((3, 3))).is_err());
    }
}
