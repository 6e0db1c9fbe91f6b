mod common;

use std::sync::Arc;

use common::{labeled_graph, matrix, max_abs_diff, permutation};
use cpgnn::estimator::{EstimatorConfig, PriorEstimator};
use cpgnn::features::Features;
use cpgnn::graph::SparseGraph;
use cpgnn::rng::rng_from_seed;
use ndarray::{Array2, Axis};
use proptest::prelude::*;

fn linear(kind: EstimatorConfig) -> EstimatorConfig {
    EstimatorConfig {
        hidden_dims: Vec::new(),
        ..kind
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn prior_rows_sum_to_one(l in labeled_graph(20, 4), seed in any::<u64>(), cheby in any::<bool>()) {
        let n = l.graph.num_nodes();
        let mut rng = rng_from_seed(seed);
        let x = Features::dense(Array2::from_shape_fn((n, 5), |(i, j)| ((i * 7 + j * 3) % 5) as f64 - 2.0));
        let cfg = if cheby { EstimatorConfig::cheby() } else { EstimatorConfig::mlp() };
        let est = PriorEstimator::new(cfg, 5, l.labels.num_classes(), &mut rng).unwrap();
        let lap = Arc::new(l.graph.normalized_laplacian_tilde());
        let bp = est.prior_beliefs(&x, Some(&lap)).unwrap();
        prop_assert!(bp.iter().all(|v| v.is_finite() && *v >= 0.0));
        for s in bp.sum_axis(Axis(1)) {
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn second_chebyshev_term_is_two_l_squared_minus_identity(
        l in labeled_graph(15, 3),
        w in matrix(3, 2, -1.0, 1.0),
    ) {
        let n = l.graph.num_nodes();
        let x = Array2::from_shape_fn((n, 3), |(i, j)| (i as f64 * 0.37 + j as f64).sin());
        let zero = Array2::zeros((3, 2));
        let est = PriorEstimator::from_weights(linear(EstimatorConfig::cheby()), vec![vec![zero.clone(), zero, w.clone()]]).unwrap();
        let lap = Arc::new(l.graph.normalized_laplacian_tilde());
        let got = est.logits(&Features::dense(x.clone()), Some(&lap)).unwrap();
        let ld = lap.to_dense();
        let t2 = 2.0 * ld.dot(&ld) - Array2::<f64>::eye(n);
        prop_assert!(max_abs_diff(&got, &t2.dot(&x).dot(&w)) < 1e-12);
    }

    #[test]
    fn mlp_ignores_edges(l in labeled_graph(15, 3), seed in any::<u64>()) {
        let n = l.graph.num_nodes();
        let mut rng = rng_from_seed(seed);
        let est = PriorEstimator::new(EstimatorConfig::mlp(), n, 3, &mut rng).unwrap();
        let x = Features::identity(n);
        let with_graph = est.logits(&x, Some(&Arc::new(l.graph.normalized_laplacian_tilde()))).unwrap();
        let empty = SparseGraph::build(n, []).unwrap();
        let without = est.logits(&x, Some(&Arc::new(empty.normalized_laplacian_tilde()))).unwrap();
        prop_assert_eq!(&with_graph, &without);
        prop_assert_eq!(with_graph, est.logits(&x, None).unwrap());
    }

    #[test]
    fn featureless_row_shuffle_permutes_weight_rows(
        (n, perm) in (3usize..12).prop_flat_map(|n| (Just(n), permutation(n))),
        seed in any::<u64>(),
    ) {
        // With X = I the first layer reads off rows of W, so permuting the
        // rows of X permutes the nodes' outputs.
        let mut rng = rng_from_seed(seed);
        let est = PriorEstimator::new(EstimatorConfig::mlp(), n, 4, &mut rng).unwrap();
        let x = Features::identity(n);
        let base = est.logits(&x, None).unwrap();
        let shuffled = est.logits(&x.permute_rows(&perm).unwrap(), None).unwrap();
        for (old, &new) in perm.iter().enumerate() {
            prop_assert_eq!(shuffled.row(new), base.row(old));
        }
    }
}
