//! Synthetic benchmark graphs grown by preferential attachment whose
//! attachment weights are modulated by a target compatibility matrix, plus
//! class-consistent feature transfer from a reference pool.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{LabelAssignment, SparseGraph};
use crate::rng::{derive_seed, rng_from_seed};

/// Diagonal `h`, off-diagonal mass `(1 − h)/(C − 1)` spread uniformly.
pub fn make_target_compat(num_classes: usize, h: f64) -> Result<Array2<f64>> {
    if !(0.0..=1.0).contains(&h) {
        return Err(Error::Input(format!("homophily {h} outside [0, 1]")));
    }
    match num_classes {
        0 => Err(Error::Input("need at least one class".into())),
        1 if h != 1.0 => Err(Error::Input("a single class forces h = 1".into())),
        1 => Ok(Array2::ones((1, 1))),
        c => {
            let off = (1.0 - h) / (c - 1) as f64;
            Ok(Array2::from_shape_fn((c, c), |(i, j)| if i == j { h } else { off }))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub class_sizes: Vec<usize>,
    /// Nodes in the initial chain.
    pub n0: usize,
    /// Edges added with each later node.
    pub m: usize,
    /// Target compatibility matrix, row-major.
    pub compat: Vec<Vec<f64>>,
    pub seed: u64,
}

impl SynthConfig {
    /// Balanced classes with the uniform off-diagonal target for `h`.
    pub fn balanced(num_classes: usize, class_size: usize, n0: usize, m: usize, h: f64, seed: u64) -> Result<Self> {
        let compat = make_target_compat(num_classes, h)?;
        Ok(Self {
            class_sizes: vec![class_size; num_classes],
            n0,
            m,
            compat: compat.rows().into_iter().map(|r| r.to_vec()).collect(),
            seed,
        })
    }

    /// The configuration used for the 10-class, 10,000-node benchmark.
    pub fn syn_products(h: f64, seed: u64) -> Result<Self> {
        Self::balanced(10, 1000, 70, 6, h, seed)
    }

    pub fn num_classes(&self) -> usize {
        self.class_sizes.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.class_sizes.iter().sum()
    }

    pub fn compat_matrix(&self) -> Array2<f64> {
        let c = self.compat.len();
        Array2::from_shape_fn((c, c), |(i, j)| self.compat[i][j])
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes();
        let n = self.num_nodes();
        if c == 0 {
            return Err(Error::Input("no classes configured".into()));
        }
        if self.n0 == 0 || self.n0 >= n {
            return Err(Error::Input(format!(
                "n0 = {} must lie in [1, n) with n = {n}",
                self.n0
            )));
        }
        if self.m == 0 {
            return Err(Error::Input("m must be at least 1".into()));
        }
        if self.compat.len() != c || self.compat.iter().any(|r| r.len() != c) {
            return Err(Error::Input(format!("compatibility matrix must be {c}×{c}")));
        }
        for (i, row) in self.compat.iter().enumerate() {
            if row.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
                return Err(Error::Input(format!(
                    "compatibility row {i} has a negative or non-finite entry"
                )));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::Input(format!("compatibility row {i} sums to {s}")));
            }
        }
        Ok(())
    }
}

/// Grows a labeled graph by compatibility-weighted preferential attachment.
///
/// Labels are a seeded shuffle of the class-size multiset. The first `n0`
/// nodes form a chain; every later node `v` picks `m` distinct earlier nodes
/// without replacement, with weight `H[y_v, y_u] · degree(u)`. When fewer than
/// `m` candidates carry positive weight, all of them are taken.
pub fn generate(cfg: &SynthConfig) -> Result<(SparseGraph, LabelAssignment)> {
    cfg.validate()?;
    let n = cfg.num_nodes();
    let h = cfg.compat_matrix();

    let mut labels: Vec<usize> = cfg
        .class_sizes
        .iter()
        .enumerate()
        .flat_map(|(c, &size)| std::iter::repeat_n(c, size))
        .collect();
    labels.shuffle(&mut rng_from_seed(derive_seed(cfg.seed, 0)));

    let mut rng = rng_from_seed(derive_seed(cfg.seed, 1));
    let mut degree = vec![0usize; n];
    let mut edges = Vec::with_capacity((cfg.n0 - 1) + (n - cfg.n0) * cfg.m);
    for v in 1..cfg.n0 {
        edges.push((v - 1, v));
        degree[v - 1] += 1;
        degree[v] += 1;
    }

    let mut weights = vec![0.0f64; n];
    let mut chosen = Vec::with_capacity(cfg.m);
    for v in cfg.n0..n {
        let row = h.row(labels[v]);
        let mut total = 0.0;
        let mut positive = 0usize;
        for u in 0..v {
            let w = row[labels[u]] * degree[u] as f64;
            weights[u] = w;
            if w > 0.0 {
                total += w;
                positive += 1;
            }
        }
        if positive == 0 {
            return Err(Error::Generation {
                step: v,
                reason: format!("every existing node has zero weight for class {}", labels[v]),
            });
        }
        chosen.clear();
        while chosen.len() < cfg.m && positive > 0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (u, &w) in weights[..v].iter().enumerate() {
                if w > 0.0 {
                    acc += w;
                    pick = Some(u);
                    if acc > target {
                        break;
                    }
                }
            }
            let u = pick.expect("positive weight exists");
            total -= weights[u];
            weights[u] = 0.0;
            positive -= 1;
            chosen.push(u);
        }
        for &u in &chosen {
            edges.push((u, v));
            degree[u] += 1;
            degree[v] += 1;
        }
    }

    let graph = SparseGraph::build(n, edges)?;
    let labels = LabelAssignment::new(labels, cfg.num_classes())?;
    Ok((graph, labels))
}

/// Per-class pools of reference feature vectors.
#[derive(Debug, Clone)]
pub struct ReferenceFeatures {
    pools: Vec<Array2<f64>>,
    dim: usize,
    /// True when the pools are synthetic Gaussians rather than a real graph.
    pub surrogate: bool,
}

impl ReferenceFeatures {
    pub fn new(pools: Vec<Array2<f64>>) -> Result<Self> {
        let dim = pools.first().map_or(0, |p| p.ncols());
        if pools.iter().any(|p| p.ncols() != dim) {
            return Err(Error::Input("reference pools disagree on feature dimension".into()));
        }
        Ok(Self {
            pools,
            dim,
            surrogate: false,
        })
    }

    /// Builds pools from a labeled reference feature matrix.
    pub fn from_labeled(features: &Array2<f64>, labels: &LabelAssignment) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::Input("reference features and labels differ in length".into()));
        }
        let pools = (0..labels.num_classes())
            .map(|c| features.select(ndarray::Axis(0), &labels.nodes_of_class(c)))
            .collect();
        Self::new(pools)
    }

    /// Gaussian surrogate: class `c` has a mean of norm `separation` along a
    /// random direction and unit-variance noise in every dimension.
    pub fn gaussian(pool_sizes: &[usize], dim: usize, separation: f64, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Input("feature dimension must be positive".into()));
        }
        let mut rng = rng_from_seed(seed);
        let pools = pool_sizes
            .iter()
            .map(|&size| {
                let mut mean: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
                mean.iter_mut().for_each(|x| *x *= separation / norm);
                Array2::from_shape_fn((size, dim), |(_, j)| mean[j] + rng.sample::<f64, _>(StandardNormal))
            })
            .collect();
        Ok(Self {
            pools,
            dim,
            surrogate: true,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.pools.len()
    }

    pub fn pool(&self, class: usize) -> &Array2<f64> {
        &self.pools[class]
    }
}

/// Assigns each node a distinct reference vector from the pool of the
/// reference class its class maps to (class `c` ↦ pool `c`).
pub fn transfer_features(labels: &LabelAssignment, reference: &ReferenceFeatures, seed: u64) -> Result<Array2<f64>> {
    let sizes = labels.class_sizes();
    if reference.num_classes() < sizes.len() {
        return Err(Error::Injection {
            class: reference.num_classes(),
            needed: sizes[reference.num_classes()],
            available: 0,
        });
    }
    let mut rng = rng_from_seed(seed);
    let mut out = Array2::zeros((labels.len(), reference.dim()));
    for (c, &needed) in sizes.iter().enumerate() {
        let pool = reference.pool(c);
        if pool.nrows() < needed {
            return Err(Error::Injection {
                class: c,
                needed,
                available: pool.nrows(),
            });
        }
        let mut order: Vec<usize> = (0..pool.nrows()).collect();
        order.shuffle(&mut rng);
        for (v, &r) in labels.nodes_of_class(c).iter().zip(&order) {
            out.row_mut(*v).assign(&pool.row(r));
        }
    }
    Ok(out)
}
