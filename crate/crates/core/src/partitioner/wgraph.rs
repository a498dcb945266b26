//! Compact weighted graph used inside the partitioner.

use crate::token_graph::TokenGraph;

/// CSR adjacency with vertex weights (number of original tokens a vertex
/// stands for) and edge weights.
#[derive(Debug, Clone)]
pub(crate) struct WGraph {
    pub xadj: Vec<usize>,
    pub adjncy: Vec<usize>,
    pub adjwgt: Vec<f64>,
    pub vwgt: Vec<usize>,
}

impl WGraph {
    pub fn from_token_graph(g: &TokenGraph) -> Self {
        let n = g.node_count();
        let mut xadj = Vec::with_capacity(n + 1);
        let mut adjncy = Vec::new();
        let mut adjwgt = Vec::new();
        xadj.push(0);
        for t in 0..n {
            for &(v, w) in g.neighbors(t) {
                adjncy.push(v);
                adjwgt.push(w);
            }
            xadj.push(adjncy.len());
        }
        Self {
            xadj,
            adjncy,
            adjwgt,
            vwgt: vec![1; n],
        }
    }

    pub fn n(&self) -> usize {
        self.vwgt.len()
    }

    #[cfg(test)]
    pub fn total_vwgt(&self) -> usize {
        self.vwgt.iter().sum()
    }

    /// `(neighbor, weight)` pairs of `u`.
    pub fn edges(&self, u: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.xadj[u]..self.xadj[u + 1];
        self.adjncy[r.clone()].iter().copied().zip(self.adjwgt[r].iter().copied())
    }

    pub fn degree(&self, u: usize) -> usize {
        self.xadj[u + 1] - self.xadj[u]
    }

    pub fn cut(&self, part: &[usize]) -> f64 {
        let mut cut = 0.0;
        for u in 0..self.n() {
            for (v, w) in self.edges(u) {
                if u < v && part[u] != part[v] {
                    cut += w;
                }
            }
        }
        cut
    }

    pub fn part_weights(&self, part: &[usize], k: usize) -> Vec<usize> {
        let mut pw = vec![0; k];
        for (u, &p) in part.iter().enumerate() {
            pw[p] += self.vwgt[u];
        }
        pw
    }
}
