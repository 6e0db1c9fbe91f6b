#![allow(dead_code)]

use cpgnn::graph::{LabelAssignment, SparseGraph};
use ndarray::Array2;
use proptest::prelude::*;

/// Undirected graph plus labels where every class occurs at least once.
#[derive(Debug, Clone)]
pub struct Labeled {
    pub graph: SparseGraph,
    pub labels: LabelAssignment,
}

pub fn labeled_graph(max_nodes: usize, max_classes: usize) -> impl Strategy<Value = Labeled> {
    (2..=max_classes)
        .prop_flat_map(move |k| (Just(k), k.max(3)..=max_nodes))
        .prop_flat_map(|(k, n)| {
            let edges = prop::collection::vec((0..n, 0..n), 1..4 * n);
            let extra = prop::collection::vec(0..k, n - k);
            (Just(k), Just(n), edges, extra)
        })
        .prop_map(|(k, n, edges, extra)| {
            let mut labels: Vec<usize> = (0..k).collect();
            labels.extend(extra);
            // A path guarantees at least one edge.
            let graph = SparseGraph::build(n, edges.into_iter().chain([(0, 1)])).unwrap();
            Labeled {
                graph,
                labels: LabelAssignment::new(labels, k).unwrap(),
            }
        })
}

pub fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

pub fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
