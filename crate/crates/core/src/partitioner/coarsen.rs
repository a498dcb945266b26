//! Heavy-edge matching and graph contraction.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::wgraph::WGraph;

/// Sequence of successively coarser graphs. `graphs[0]` is the input.
pub(crate) struct Hierarchy {
    graphs: Vec<WGraph>,
    /// `maps[l][u]` is the vertex of `graphs[l + 1]` that `u` collapsed into.
    maps: Vec<Vec<usize>>,
}

impl Hierarchy {
    pub fn depth(&self) -> usize {
        self.maps.len()
    }

    pub fn graph(&self, level: usize) -> &WGraph {
        &self.graphs[level]
    }

    pub fn coarsest(&self) -> &WGraph {
        self.graphs.last().expect("hierarchy has a base graph")
    }

    /// Assignment on `graphs[level + 1]` pulled back to `graphs[level]`.
    pub fn project(&self, level: usize, coarse_part: &[usize]) -> Vec<usize> {
        self.maps[level].iter().map(|&c| coarse_part[c]).collect()
    }
}

/// Contracts until at most `target` vertices remain or a round removes
/// fewer than 5% of them. Matched pairs never exceed `vertex_cap` weight.
pub(crate) fn coarsen(base: WGraph, target: usize, vertex_cap: usize, rng: &mut ChaCha8Rng) -> Hierarchy {
    let mut graphs = vec![base];
    let mut maps = Vec::new();
    loop {
        let g = graphs.last().unwrap();
        if g.n() <= target {
            break;
        }
        let (cmap, coarse_n) = heavy_edge_matching(g, vertex_cap, rng);
        if coarse_n as f64 > 0.95 * g.n() as f64 {
            break;
        }
        let coarse = contract(g, &cmap, coarse_n);
        maps.push(cmap);
        graphs.push(coarse);
    }
    Hierarchy { graphs, maps }
}

/// Visits vertices in seeded random order; each unmatched vertex pairs with
/// its unmatched neighbor of heaviest edge (ties: lowest index).
fn heavy_edge_matching(g: &WGraph, vertex_cap: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, usize) {
    let n = g.n();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut mate = vec![usize::MAX; n];
    for &u in &order {
        if mate[u] != usize::MAX {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (v, w) in g.edges(u) {
            if mate[v] != usize::MAX || v == u || g.vwgt[u] + g.vwgt[v] > vertex_cap {
                continue;
            }
            let better = match best {
                None => true,
                Some((bv, bw)) => w > bw || (w == bw && v < bv),
            };
            if better {
                best = Some((v, w));
            }
        }
        match best {
            Some((v, _)) => {
                mate[u] = v;
                mate[v] = u;
            }
            None => mate[u] = u,
        }
    }
    // number coarse vertices in order of their smallest member
    let mut cmap = vec![usize::MAX; n];
    let mut next = 0;
    for u in 0..n {
        if cmap[u] == usize::MAX {
            cmap[u] = next;
            cmap[mate[u]] = next;
            next += 1;
        }
    }
    (cmap, next)
}

fn contract(g: &WGraph, cmap: &[usize], coarse_n: usize) -> WGraph {
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); coarse_n];
    for (u, &c) in cmap.iter().enumerate() {
        members[c].push(u);
    }
    let mut xadj = Vec::with_capacity(coarse_n + 1);
    let mut adjncy = Vec::new();
    let mut adjwgt = Vec::new();
    let mut vwgt = Vec::with_capacity(coarse_n);
    let mut slot = vec![usize::MAX; coarse_n];
    xadj.push(0);
    for (c, mem) in members.iter().enumerate() {
        let start = adjncy.len();
        vwgt.push(mem.iter().map(|&u| g.vwgt[u]).sum());
        for &u in mem {
            for (v, w) in g.edges(u) {
                let cv = cmap[v];
                if cv == c {
                    continue;
                }
                if slot[cv] == usize::MAX {
                    slot[cv] = adjncy.len();
                    adjncy.push(cv);
                    adjwgt.push(w);
                } else {
                    adjwgt[slot[cv]] += w;
                }
            }
        }
        for &cv in &adjncy[start..] {
            slot[cv] = usize::MAX;
        }
        // keep neighbor lists sorted so later tie-breaks are index based
        let mut pairs: Vec<(usize, f64)> = adjncy[start..].iter().copied().zip(adjwgt[start..].iter().copied()).collect();
        pairs.sort_by_key(|&(v, _)| v);
        for (k, (v, w)) in pairs.into_iter().enumerate() {
            adjncy[start + k] = v;
            adjwgt[start + k] = w;
        }
        xadj.push(adjncy.len());
    }
    WGraph {
        xadj,
        adjncy,
        adjwgt,
        vwgt,
    }
}
