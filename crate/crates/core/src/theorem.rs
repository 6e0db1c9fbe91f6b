//! Equivalence between one-layer propagation with an identity compatibility
//! matrix and the simplified GCN `softmax((A + I)·X·Θ)`.

use ndarray::Array2;
use rand::Rng as _;
use serde::Serialize;

use crate::error::Result;
use crate::estimator::{EstimatorConfig, PriorEstimator};
use crate::features::Features;
use crate::graph::SparseGraph;
use crate::propagation::{final_beliefs, propagate_values, PropagationConfig, PropagationGraph};
use crate::rng::rng_from_seed;
use crate::train::simplified_gcn_forward;

#[derive(Debug, Clone)]
pub struct TheoremInstance {
    pub graph: SparseGraph,
    pub features: Features,
    pub theta: Array2<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TheoremResult {
    pub nodes: usize,
    pub edges: usize,
    pub classes: usize,
    pub max_abs_diff: f64,
}

/// Random graph with `n` nodes, edge probability `p`, Gaussian-ish features
/// and weights in `[-1, 1)`.
pub fn random_instance(n: usize, classes: usize, dim: usize, p: f64, seed: u64) -> Result<TheoremInstance> {
    let mut rng = rng_from_seed(seed);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    let graph = SparseGraph::build(n, edges)?;
    let x = Array2::from_shape_fn((n, dim), |_| rng.random_range(-1.0..1.0));
    let theta = Array2::from_shape_fn((dim, classes), |_| rng.random_range(-1.0..1.0));
    Ok(TheoremInstance {
        graph,
        features: Features::dense(x),
        theta,
    })
}

/// Runs both paths and returns the largest absolute belief difference.
///
/// The propagating path uses a single linear layer `XΘ` as the estimator,
/// takes its raw output as the starting belief, and propagates once with
/// `H̄ = I` and no activation.
pub fn check_instance(inst: &TheoremInstance) -> Result<TheoremResult> {
    let linear = EstimatorConfig {
        hidden_dims: Vec::new(),
        ..EstimatorConfig::mlp()
    };
    let est = PriorEstimator::from_weights(linear, vec![vec![inst.theta.clone()]])?;
    let b0 = est.logits(&inst.features, None)?;
    let classes = inst.theta.ncols();
    let pg = PropagationGraph::new(&inst.graph);
    let bk = propagate_values(&pg, &b0, &Array2::eye(classes), &PropagationConfig::with_layers(1))?;
    let cpgnn = final_beliefs(&bk);
    let sgc = simplified_gcn_forward(&inst.graph, &inst.features, &inst.theta)?;
    let max_abs_diff = cpgnn
        .iter()
        .zip(sgc.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(TheoremResult {
        nodes: inst.graph.num_nodes(),
        edges: inst.graph.num_edges(),
        classes,
        max_abs_diff,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn edgeless_sgc_is_softmax_of_projection() {
        let g = SparseGraph::build(2, []).unwrap();
        let x = Features::dense(array![[1.0, 0.0], [0.0, 2.0]]);
        let theta = array![[1.0, -1.0], [0.5, 0.0]];
        let b = simplified_gcn_forward(&g, &x, &theta).unwrap();
        let expected = crate::autodiff::row_softmax_values(&array![[1.0, -1.0], [1.0, 0.0]]);
        assert!((b - expected).iter().all(|d| d.abs() < 1e-15));
    }

    #[test]
    fn zero_theta_is_uniform() {
        let inst = random_instance(6, 3, 4, 0.5, 1).unwrap();
        let b = simplified_gcn_forward(&inst.graph, &inst.features, &Array2::zeros((4, 3))).unwrap();
        assert!(b.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn six_node_instance_matches() {
        let inst = random_instance(6, 3, 4, 0.5, 2).unwrap();
        assert!(check_instance(&inst).unwrap().max_abs_diff < 1e-9);
    }
}
