use cpgnn::graph::homophily_ratio;
use cpgnn::synth::{generate, transfer_features, ReferenceFeatures, SynthConfig};
use proptest::prelude::*;

fn config() -> impl Strategy<Value = SynthConfig> {
    (
        2usize..5,
        10usize..40,
        3usize..6,
        1usize..4,
        0.05..0.95f64,
        any::<u64>(),
    )
        .prop_map(|(k, size, extra, m, h, seed)| SynthConfig::balanced(k, size, m + extra, m, h, seed).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn same_seed_same_graph(cfg in config()) {
        let (g1, y1) = generate(&cfg).unwrap();
        let (g2, y2) = generate(&cfg).unwrap();
        prop_assert_eq!(g1.edges(), g2.edges());
        prop_assert_eq!(y1, y2);
    }

    #[test]
    fn attached_nodes_have_degree_at_least_m(cfg in config()) {
        let (g, _) = generate(&cfg).unwrap();
        for v in cfg.n0..cfg.num_nodes() {
            prop_assert!(g.degree()[v] >= cfg.m, "node {} has degree {}", v, g.degree()[v]);
        }
        prop_assert_eq!(g.num_edges(), cfg.n0 - 1 + (cfg.num_nodes() - cfg.n0) * cfg.m);
    }

    #[test]
    fn class_sizes_are_exact(cfg in config()) {
        let (_, y) = generate(&cfg).unwrap();
        prop_assert_eq!(y.class_sizes(), cfg.class_sizes.clone());
    }

    #[test]
    fn transferred_rows_come_from_their_class_pool(cfg in config(), seed in any::<u64>()) {
        let (_, y) = generate(&cfg).unwrap();
        let pools = ReferenceFeatures::gaussian(&y.class_sizes(), 4, 1.0, seed).unwrap();
        let x = transfer_features(&y, &pools, seed ^ 1).unwrap();
        let mut used = std::collections::HashSet::new();
        for (v, &c) in y.labels().iter().enumerate() {
            let pool = pools.pool(c);
            let hit = (0..pool.nrows()).find(|&r| pool.row(r) == x.row(v));
            prop_assert!(hit.is_some());
            // Injective: no pool row is reused.
            prop_assert!(used.insert((c, hit.unwrap())));
        }
    }
}

#[test]
fn extreme_homophily_levels() {
    let all_same = SynthConfig::balanced(3, 60, 8, 3, 1.0, 5).unwrap();
    let (g, y) = generate(&all_same).unwrap();
    // Only the seed chain can join different classes.
    let cross = g
        .edges()
        .iter()
        .filter(|&&(u, v)| y.labels()[u] != y.labels()[v])
        .count();
    assert!(cross < all_same.n0);
    let none_same = SynthConfig::balanced(3, 60, 8, 3, 0.0, 5).unwrap();
    let (g, y) = generate(&none_same).unwrap();
    let h = homophily_ratio(&g, &y).unwrap();
    assert!(h < 0.05, "h = {h}");
}
