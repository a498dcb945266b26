//! Sparse similarity graph over generated tokens.
//!
//! Two tokens are linked when the cosine similarity of their calibrated
//! attention footprints exceeds `tau_sim`; the similarity becomes the edge
//! weight.

use std::fmt::Write as _;

use thiserror::Error;

use crate::calib::CalibratedMatrix;
use crate::numfmt::sig9;

pub const DEFAULT_TAU_SIM: f64 = 0.7;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("token index {index} out of range for {len} tokens")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("invalid edge ({0}, {1}): self-loop or duplicate")]
    BadEdge(usize, usize),
    #[error("invalid edge weight {0}")]
    BadWeight(f64),
    #[error("malformed adjacency text at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub w: f64,
}

/// Weighted undirected graph with cached weighted degrees.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGraph {
    n: usize,
    tau_sim: Option<f64>,
    edges: Vec<Edge>,
    adjacency: Vec<Vec<(usize, f64)>>,
    degree: Vec<f64>,
}

impl TokenGraph {
    /// Builds a graph from explicit edges. Each edge must have `i != j`, both
    /// endpoints below `n`, a finite weight and appear once (in either orientation).
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<Self, GraphError> {
        let mut list: Vec<Edge> = Vec::new();
        for (a, b, w) in edges {
            for idx in [a, b] {
                if idx >= n {
                    return Err(GraphError::IndexOutOfRange { index: idx, len: n });
                }
            }
            if a == b {
                return Err(GraphError::BadEdge(a, b));
            }
            if !w.is_finite() {
                return Err(GraphError::BadWeight(w));
            }
            list.push(Edge {
                i: a.min(b),
                j: a.max(b),
                w,
            });
        }
        list.sort_by_key(|e| (e.i, e.j));
        if let Some(d) = list.windows(2).find(|p| (p[0].i, p[0].j) == (p[1].i, p[1].j)) {
            return Err(GraphError::BadEdge(d[0].i, d[0].j));
        }
        Ok(Self::assemble(n, None, list))
    }

    fn assemble(n: usize, tau_sim: Option<f64>, edges: Vec<Edge>) -> Self {
        let mut adjacency = vec![Vec::new(); n];
        let mut degree = vec![0.0; n];
        for e in &edges {
            adjacency[e.i].push((e.j, e.w));
            adjacency[e.j].push((e.i, e.w));
            degree[e.i] += e.w;
            degree[e.j] += e.w;
        }
        for adj in &mut adjacency {
            adj.sort_by_key(|&(v, _)| v);
        }
        Self {
            n,
            tau_sim,
            edges,
            adjacency,
            degree,
        }
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    /// Threshold used at construction, when built from a calibrated matrix.
    pub fn tau_sim(&self) -> Option<f64> {
        self.tau_sim
    }

    /// Edges with `i < j`, sorted.
    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Neighbors of `t` with weights, sorted by neighbor index.
    pub fn neighbors(&self, t: usize) -> &[(usize, f64)] {
        &self.adjacency[t]
    }

    pub fn total_weight(&self) -> f64 {
        self.edges.iter().map(|e| e.w).sum()
    }

    /// Sum of incident edge weights (cached).
    pub fn weighted_degree(&self, t: usize) -> Result<f64, GraphError> {
        self.degree
            .get(t)
            .copied()
            .ok_or(GraphError::IndexOutOfRange { index: t, len: self.n })
    }

    pub fn degrees(&self) -> &[f64] {
        &self.degree
    }

    /// Text adjacency list: node count on the first line, then one `i j w` per edge.
    pub fn to_adjacency_text(&self) -> String {
        let mut out = format!("{}\n", self.n);
        for e in &self.edges {
            let _ = writeln!(out, "{} {} {}", e.i, e.j, sig9(e.w));
        }
        out
    }

    pub fn from_adjacency_text(text: &str) -> Result<Self, GraphError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or(GraphError::Parse {
            line: 1,
            msg: "missing node count".into(),
        })?;
        let n: usize = first.trim().parse().map_err(|e| GraphError::Parse {
            line: 1,
            msg: format!("node count: {e}"),
        })?;
        let mut edges = Vec::new();
        for (k, line) in lines {
            let parts: Vec<&str> = line.split_whitespace().collect();
            let bad = |msg: String| GraphError::Parse { line: k + 1, msg };
            if parts.len() != 3 {
                return Err(bad(format!("expected `i j w`, got {line:?}")));
            }
            let i = parts[0].parse().map_err(|e| bad(format!("{e}")))?;
            let j = parts[1].parse().map_err(|e| bad(format!("{e}")))?;
            let w = parts[2].parse().map_err(|e| bad(format!("{e}")))?;
            edges.push((i, j, w));
        }
        Self::from_edges(n, edges)
    }
}

fn check_index(i: usize, len: usize) -> Result<(), GraphError> {
    if i >= len {
        Err(GraphError::IndexOutOfRange { index: i, len })
    } else {
        Ok(())
    }
}

/// Cosine similarity of two vectors; 0 when either has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Cosine similarity of rows `i` and `j` of the calibrated matrix.
pub fn footprint_similarity(calibrated: &CalibratedMatrix, i: usize, j: usize) -> Result<f64, GraphError> {
    check_index(i, calibrated.gen_len())?;
    check_index(j, calibrated.gen_len())?;
    Ok(cosine(calibrated.row(i), calibrated.row(j)))
}

/// Rows scaled to unit norm; zero rows stay zero.
pub fn unit_rows(calibrated: &CalibratedMatrix) -> Vec<Vec<f64>> {
    calibrated
        .rows()
        .map(|row| {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                vec![0.0; row.len()]
            } else {
                row.iter().map(|x| x / norm).collect()
            }
        })
        .collect()
}

/// Links every pair whose footprint similarity exceeds `tau_sim`.
pub fn build_graph(calibrated: &CalibratedMatrix, tau_sim: f64) -> TokenGraph {
    let n = calibrated.gen_len();
    let s = calibrated.ctx_len();
    let unit: Vec<f64> = unit_rows(calibrated).into_iter().flatten().collect();
    let row = |i: usize| &unit[i * s..(i + 1) * s];
    let mut edges = Vec::new();
    // blocks of rows share each loaded partner row
    const BLOCK: usize = 16;
    for start in (0..n).step_by(BLOCK) {
        let end = (start + BLOCK).min(n);
        for j in start + 1..n {
            let b = row(j);
            for i in start..end.min(j) {
                // rounding can push a self-similar pair a hair above 1
                let w = dot(row(i), b).min(1.0);
                if w > tau_sim {
                    edges.push(Edge { i, j, w });
                }
            }
        }
    }
    edges.sort_by_key(|e| (e.i, e.j));
    TokenGraph::assemble(n, Some(tau_sim), edges)
}

/// Dot product with eight independent accumulators so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().sum::<f64>() + tail
}
