//! Multilevel k-way partitioning that minimizes edge cut under a balance
//! constraint.
//!
//! The scheme follows the usual three phases:
//! - heavy-edge matching collapses the graph until it has at most
//!   `max(4K, 32)` vertices (or stops shrinking)
//! - greedy balanced region growing assigns the coarsest graph, keeping the
//!   best of several seeded trials
//! - the assignment is projected back level by level, with greedy boundary
//!   refinement (single moves, then pairwise swaps) at every level
//!
//! Refinement only accepts moves that strictly reduce the cut and keep every
//! part within the size cap, so it never undoes balance or quality.

mod coarsen;
mod initial;
mod refine;
mod wgraph;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::token_graph::TokenGraph;
use wgraph::WGraph;

pub const DEFAULT_EPS_BAL: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum PartitionError {
    #[error("cannot split {n} tokens into {k} non-empty clusters")]
    TooManyClusters { k: usize, n: usize },
    #[error("cluster count must be at least 1")]
    ZeroClusters,
    #[error("balance tolerance {0} must be finite and >= 0")]
    BadTolerance(f64),
    #[error("assignment has length {found}, graph has {expected} nodes")]
    LengthMismatch { expected: usize, found: usize },
    #[error("cluster id {id} out of range for K={k}")]
    BadClusterId { id: usize, k: usize },
    #[error("cluster {0} is empty")]
    EmptyCluster(usize),
}

/// `max(2, floor(T/10))`, or 1 for a single token.
pub fn cluster_count(gen_len: usize) -> usize {
    if gen_len <= 1 {
        1
    } else {
        (gen_len / 10).max(2)
    }
}

/// Reference part size `ceil(n/K)`; balance is measured against it.
pub fn ideal_size(n: usize, k: usize) -> usize {
    n.div_ceil(k)
}

/// Largest part size allowed by tolerance `eps`.
pub fn max_part_size(n: usize, k: usize, eps: f64) -> usize {
    let ideal = ideal_size(n, k);
    (((1.0 + eps) * ideal as f64 + 1e-9).floor() as usize).max(ideal)
}

/// Token to cluster assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    assignment: Vec<usize>,
    k: usize,
    edge_cut: f64,
    balance: f64,
}

impl Clustering {
    /// Wraps an explicit assignment, checking ids and non-empty clusters, and
    /// computing cut and balance against `graph`.
    pub fn from_assignment(graph: &TokenGraph, assignment: Vec<usize>, k: usize) -> Result<Self, PartitionError> {
        if assignment.len() != graph.node_count() {
            return Err(PartitionError::LengthMismatch {
                expected: graph.node_count(),
                found: assignment.len(),
            });
        }
        let sizes = part_sizes(&assignment, k)?;
        if let Some(empty) = sizes.iter().position(|&s| s == 0) {
            return Err(PartitionError::EmptyCluster(empty));
        }
        let edge_cut = edge_cut(graph, &assignment)?;
        let balance = balance_of(&sizes, assignment.len(), k);
        Ok(Self {
            assignment,
            k,
            edge_cut,
            balance,
        })
    }

    /// Every token in cluster 0.
    pub fn single(n: usize) -> Self {
        Self {
            assignment: vec![0; n],
            k: 1,
            edge_cut: 0.0,
            balance: 1.0,
        }
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn cluster_of(&self, t: usize) -> usize {
        self.assignment[t]
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn edge_cut(&self) -> f64 {
        self.edge_cut
    }

    /// Largest cluster size divided by `ceil(n/K)`.
    pub fn balance(&self) -> f64 {
        self.balance
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &c in &self.assignment {
            s[c] += 1;
        }
        s
    }

    /// Member lists per cluster, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.k];
        for (t, &c) in self.assignment.iter().enumerate() {
            m[c].push(t);
        }
        m
    }
}

fn part_sizes(assignment: &[usize], k: usize) -> Result<Vec<usize>, PartitionError> {
    let mut sizes = vec![0usize; k];
    for &c in assignment {
        if c >= k {
            return Err(PartitionError::BadClusterId { id: c, k });
        }
        sizes[c] += 1;
    }
    Ok(sizes)
}

fn balance_of(sizes: &[usize], n: usize, k: usize) -> f64 {
    if n == 0 {
        return 1.0;
    }
    *sizes.iter().max().unwrap_or(&0) as f64 / ideal_size(n, k) as f64
}

/// Total weight of edges whose endpoints sit in different clusters.
pub fn edge_cut(graph: &TokenGraph, assignment: &[usize]) -> Result<f64, PartitionError> {
    if assignment.len() != graph.node_count() {
        return Err(PartitionError::LengthMismatch {
            expected: graph.node_count(),
            found: assignment.len(),
        });
    }
    Ok(graph
        .edges()
        .iter()
        .filter(|e| assignment[e.i] != assignment[e.j])
        .map(|e| e.w)
        .sum())
}

/// Multilevel partition of `graph` into `k` non-empty clusters of at most
/// `max_part_size(n, k, eps_bal)` tokens. Deterministic for a fixed seed.
pub fn partition(graph: &TokenGraph, k: usize, eps_bal: f64, seed: u64) -> Result<Clustering, PartitionError> {
    let n = graph.node_count();
    if k == 0 {
        return Err(PartitionError::ZeroClusters);
    }
    if !(eps_bal.is_finite() && eps_bal >= 0.0) {
        return Err(PartitionError::BadTolerance(eps_bal));
    }
    if k > n {
        return Err(PartitionError::TooManyClusters { k, n });
    }
    if k == 1 {
        return Ok(Clustering::single(n));
    }

    let max_size = max_part_size(n, k, eps_bal);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let base = WGraph::from_token_graph(graph);
    let coarsen_to = (4 * k).max(32);
    let vertex_cap = (max_size / 2).max(1);
    let hierarchy = coarsen::coarsen(base, coarsen_to, vertex_cap, &mut rng);

    let coarsest = hierarchy.coarsest();
    let mut part = initial::initial_partition(coarsest, k, max_size, &mut rng);

    for level in (0..hierarchy.depth()).rev() {
        part = hierarchy.project(level, &part);
        let g = hierarchy.graph(level);
        if level == 0 {
            refine::rebalance(g, &mut part, k, max_size);
        }
        refine::refine(g, &mut part, k, max_size);
    }
    if hierarchy.depth() == 0 {
        // no coarsening happened; the initial partition is already on the input graph
        refine::rebalance(hierarchy.graph(0), &mut part, k, max_size);
        refine::refine(hierarchy.graph(0), &mut part, k, max_size);
    }

    Clustering::from_assignment(graph, part, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_cliques() -> TokenGraph {
        let mut edges = Vec::new();
        for base in [0, 4] {
            for a in 0..4 {
                for b in a + 1..4 {
                    edges.push((base + a, base + b, 1.0));
                }
            }
        }
        edges.push((3, 4, 0.1));
        TokenGraph::from_edges(8, edges).unwrap()
    }

    #[test]
    fn cluster_count_rule() {
        assert_eq!(cluster_count(45), 4);
        assert_eq!(cluster_count(5), 2);
        assert_eq!(cluster_count(1), 1);
        assert_eq!(cluster_count(2), 2);
        assert_eq!(cluster_count(540), 54);
    }

    #[test]
    fn size_cap() {
        assert_eq!(max_part_size(8, 2, 0.1), 4);
        assert_eq!(max_part_size(5, 2, 0.1), 3);
        assert_eq!(max_part_size(100, 3, 0.1), 37);
        assert_eq!(max_part_size(40, 4, 0.1), 11);
    }

    #[test]
    fn separates_bridged_cliques() {
        let g = two_cliques();
        for seed in 0..5 {
            let c = partition(&g, 2, DEFAULT_EPS_BAL, seed).unwrap();
            assert!((c.edge_cut() - 0.1).abs() < 1e-12, "seed {seed}: {c:?}");
            let a = c.assignment();
            assert!(a[..4].iter().all(|&x| x == a[0]));
            assert!(a[4..].iter().all(|&x| x == a[4]));
            assert_ne!(a[0], a[4]);
        }
    }

    #[test]
    fn empty_graph_splits_evenly() {
        let g = TokenGraph::from_edges(4, []).unwrap();
        let c = partition(&g, 2, DEFAULT_EPS_BAL, 7).unwrap();
        assert_eq!(c.edge_cut(), 0.0);
        assert_eq!(c.sizes(), vec![2, 2]);
    }

    #[test]
    fn single_cluster() {
        let g = two_cliques();
        let c = partition(&g, 1, DEFAULT_EPS_BAL, 0).unwrap();
        assert!(c.assignment().iter().all(|&x| x == 0));
        assert_eq!(c.edge_cut(), 0.0);
    }

    #[test]
    fn rejects_bad_k() {
        let g = two_cliques();
        assert_eq!(
            partition(&g, 9, DEFAULT_EPS_BAL, 0),
            Err(PartitionError::TooManyClusters { k: 9, n: 8 })
        );
        assert_eq!(partition(&g, 0, DEFAULT_EPS_BAL, 0), Err(PartitionError::ZeroClusters));
        assert!(partition(&g, 2, -0.5, 0).is_err());
    }

    #[test]
    fn edge_cut_examples() {
        let g = two_cliques();
        assert_eq!(edge_cut(&g, &[0; 8]).unwrap(), 0.0);
        let own: Vec<usize> = (0..8).collect();
        assert!((edge_cut(&g, &own).unwrap() - g.total_weight()).abs() < 1e-12);
        assert!((edge_cut(&g, &[0, 0, 0, 0, 1, 1, 1, 1]).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(
            edge_cut(&g, &[0; 7]),
            Err(PartitionError::LengthMismatch { expected: 8, found: 7 })
        );
    }

    #[test]
    fn k_equals_n() {
        let g = two_cliques();
        let c = partition(&g, 8, DEFAULT_EPS_BAL, 3).unwrap();
        assert_eq!(c.sizes(), vec![1; 8]);
        assert!((c.edge_cut() - g.total_weight()).abs() < 1e-12);
    }

    #[test]
    fn clustering_from_assignment_checks() {
        let g = two_cliques();
        assert_eq!(
            Clustering::from_assignment(&g, vec![0; 8], 2),
            Err(PartitionError::EmptyCluster(1))
        );
        assert!(matches!(
            Clustering::from_assignment(&g, vec![0, 0, 0, 0, 1, 1, 1, 2], 2),
            Err(PartitionError::BadClusterId { id: 2, k: 2 })
        ));
        let c = Clustering::from_assignment(&g, vec![0, 0, 0, 1, 1, 1, 1, 1], 2).unwrap();
        assert_eq!(c.balance(), 5.0 / 4.0);
        assert_eq!(c.members()[0], vec![0, 1, 2]);
    }
}
