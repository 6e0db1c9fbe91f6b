//! Undirected simple graphs, node labels, and the graph-level homophily
//! statistics computed from them.

use std::collections::BTreeSet;
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

/// Immutable undirected graph without self-loops or parallel edges.
#[derive(Debug, Clone)]
pub struct SparseGraph {
    n: usize,
    /// Canonical edge list, `u < v`, sorted.
    edges: Vec<(usize, usize)>,
    adjacency: Arc<CsrMatrix>,
    degree: Vec<usize>,
}

impl SparseGraph {
    /// Builds a graph from an arbitrary edge list. Self-loops are dropped and
    /// both orientations of an edge collapse onto one undirected edge.
    pub fn build(n: usize, edge_list: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for (u, v) in edge_list {
            for id in [u, v] {
                if id >= n {
                    return Err(Error::NodeOutOfRange { id, n });
                }
            }
            if u != v {
                set.insert((u.min(v), u.max(v)));
            }
        }
        let edges: Vec<_> = set.into_iter().collect();
        let mut degree = vec![0usize; n];
        for &(u, v) in &edges {
            degree[u] += 1;
            degree[v] += 1;
        }
        let adjacency = CsrMatrix::from_triplets(n, n, edges.iter().flat_map(|&(u, v)| [(u, v, 1.0), (v, u, 1.0)]))?;
        Ok(Self {
            n,
            edges,
            adjacency: Arc::new(adjacency),
            degree,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn degree(&self) -> &[usize] {
        &self.degree
    }

    pub fn adjacency(&self) -> &Arc<CsrMatrix> {
        &self.adjacency
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        let ptr = self.adjacency.indptr();
        &self.adjacency.indices()[ptr[v]..ptr[v + 1]]
    }

    /// Integer degree matrix as a diagonal sparse matrix.
    pub fn degree_matrix(&self) -> CsrMatrix {
        let d: Vec<f64> = self.degree.iter().map(|&d| d as f64).collect();
        CsrMatrix::diagonal(&d)
    }

    /// `L̃ = −D^{-1/2} A D^{-1/2}`; isolated nodes get zero rows and columns.
    pub fn normalized_laplacian_tilde(&self) -> CsrMatrix {
        let inv_sqrt: Vec<f64> = self
            .degree
            .iter()
            .map(|&d| if d == 0 { 0.0 } else { 1.0 / (d as f64).sqrt() })
            .collect();
        let triplets = (0..self.n).flat_map(|u| {
            let inv_sqrt = &inv_sqrt;
            self.neighbors(u)
                .iter()
                .map(move |&v| (u, v, -inv_sqrt[u] * inv_sqrt[v]))
        });
        CsrMatrix::from_triplets(self.n, self.n, triplets).expect("graph indices in range")
    }

    /// Returns a copy with nodes renamed by `perm` (old id `v` becomes `perm[v]`).
    pub fn relabel(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n {
            return Err(Error::Input("permutation length differs from node count".into()));
        }
        Self::build(self.n, self.edges.iter().map(|&(u, v)| (perm[u], perm[v])))
    }
}

/// Per-node class ids plus their one-hot encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelAssignment {
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabelAssignment {
    pub fn new(labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if let Some((v, &c)) = labels.iter().enumerate().find(|(_, &c)| c >= num_classes) {
            return Err(Error::Input(format!(
                "node {v} has class {c} but only {num_classes} classes exist"
            )));
        }
        Ok(Self { labels, num_classes })
    }

    /// Infers the class count as `max(label) + 1`.
    pub fn from_labels(labels: Vec<usize>) -> Result<Self> {
        let k = labels.iter().max().map_or(0, |&m| m + 1);
        Self::new(labels, k)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn onehot(&self) -> Array2<f64> {
        let mut y = Array2::zeros((self.labels.len(), self.num_classes));
        for (v, &c) in self.labels.iter().enumerate() {
            y[[v, c]] = 1.0;
        }
        y
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_classes];
        for &c in &self.labels {
            sizes[c] += 1;
        }
        sizes
    }

    pub fn nodes_of_class(&self, class: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&v| self.labels[v] == class).collect()
    }
}

/// `C[i][j]` = number of ordered edge endpoints going from class `i` to class `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEdgeCounts {
    counts: Array2<f64>,
}

impl ClassEdgeCounts {
    pub fn compute(g: &SparseGraph, labels: &LabelAssignment) -> Result<Self> {
        if labels.len() != g.num_nodes() {
            return Err(Error::Input(format!(
                "{} labels for a graph with {} nodes",
                labels.len(),
                g.num_nodes()
            )));
        }
        let k = labels.num_classes();
        let y = labels.labels();
        let mut counts = Array2::zeros((k, k));
        for &(u, v) in g.edges() {
            counts[[y[u], y[v]]] += 1.0;
            counts[[y[v], y[u]]] += 1.0;
        }
        Ok(Self { counts })
    }

    pub fn counts(&self) -> &Array2<f64> {
        &self.counts
    }

    pub fn total(&self) -> f64 {
        self.counts.sum()
    }
}

/// Fraction of edges whose endpoints share a class.
pub fn homophily_ratio(g: &SparseGraph, labels: &LabelAssignment) -> Result<f64> {
    let c = ClassEdgeCounts::compute(g, labels)?;
    let total = c.total();
    if total == 0.0 {
        return Err(Error::UndefinedRatio);
    }
    Ok(c.counts.diag().sum() / total)
}

/// Row-stochastic empirical compatibility `(YᵀAY) ⊘ (YᵀAE)`.
pub fn empirical_compatibility(g: &SparseGraph, labels: &LabelAssignment) -> Result<Array2<f64>> {
    let c = ClassEdgeCounts::compute(g, labels)?;
    let mut h = c.counts;
    for (class, mut row) in h.rows_mut().into_iter().enumerate() {
        let total = row.sum();
        if total == 0.0 {
            return Err(Error::EmptyClassRow { class });
        }
        row /= total;
    }
    Ok(h)
}
