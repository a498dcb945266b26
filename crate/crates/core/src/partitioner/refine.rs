//! Greedy boundary refinement and balance repair.

use super::wgraph::WGraph;

const MAX_PASSES: usize = 24;
/// Smallest cut improvement worth a move.
const MIN_GAIN: f64 = 1e-10;

/// Per-vertex connection weight to every part, `conn[u * k + p]`.
struct Conn {
    k: usize,
    w: Vec<f64>,
}

impl Conn {
    fn new(g: &WGraph, part: &[usize], k: usize) -> Self {
        let mut w = vec![0.0; g.n() * k];
        for u in 0..g.n() {
            for (v, ew) in g.edges(u) {
                w[u * k + part[v]] += ew;
            }
        }
        Self { k, w }
    }

    fn get(&self, u: usize, p: usize) -> f64 {
        self.w[u * self.k + p]
    }

    fn moved(&mut self, g: &WGraph, u: usize, from: usize, to: usize) {
        for (v, ew) in g.edges(u) {
            self.w[v * self.k + from] -= ew;
            self.w[v * self.k + to] += ew;
        }
    }
}

struct State<'a> {
    g: &'a WGraph,
    part: &'a mut [usize],
    pw: Vec<usize>,
    count: Vec<usize>,
    conn: Conn,
}

impl<'a> State<'a> {
    fn new(g: &'a WGraph, part: &'a mut [usize], k: usize) -> Self {
        let pw = g.part_weights(part, k);
        let mut count = vec![0; k];
        for &p in part.iter() {
            count[p] += 1;
        }
        let conn = Conn::new(g, part, k);
        Self {
            g,
            part,
            pw,
            count,
            conn,
        }
    }

    fn apply(&mut self, u: usize, to: usize) {
        let from = self.part[u];
        self.part[u] = to;
        self.pw[from] -= self.g.vwgt[u];
        self.pw[to] += self.g.vwgt[u];
        self.count[from] -= 1;
        self.count[to] += 1;
        self.conn.moved(self.g, u, from, to);
    }

    /// Cheapest move of some vertex out of a part with at least two vertices
    /// into `to`-candidates, restricted by `source` and `target` filters.
    fn cheapest_move(
        &self,
        k: usize,
        max_size: usize,
        source: impl Fn(usize) -> bool,
        target: impl Fn(usize) -> bool,
    ) -> Option<(usize, usize)> {
        let mut best: Option<(f64, usize, usize)> = None;
        for u in 0..self.g.n() {
            let p = self.part[u];
            if !source(p) || self.count[p] < 2 {
                continue;
            }
            for q in (0..k).filter(|&q| q != p && target(q)) {
                if self.pw[q] + self.g.vwgt[u] > max_size {
                    continue;
                }
                let increase = self.conn.get(u, p) - self.conn.get(u, q);
                if best.is_none_or(|(b, _, _)| increase < b - 1e-15) {
                    best = Some((increase, u, q));
                }
            }
        }
        best.map(|(_, u, q)| (u, q))
    }
}

/// Fills empty parts and drains parts above `max_size`, each time making
/// the move that increases the cut least. Best effort when vertex weights
/// make the cap unreachable.
pub(crate) fn rebalance(g: &WGraph, part: &mut [usize], k: usize, max_size: usize) {
    let mut st = State::new(g, part, k);
    for q in 0..k {
        if st.count[q] == 0 {
            if let Some((u, to)) = st.cheapest_move(k, usize::MAX, |_| true, |x| x == q) {
                st.apply(u, to);
            }
        }
    }
    for _ in 0..g.n() * k {
        let Some(heavy) = (0..k).filter(|&p| st.pw[p] > max_size).max_by_key(|&p| (st.pw[p], usize::MAX - p)) else {
            break;
        };
        match st.cheapest_move(k, max_size, |p| p == heavy, |_| true) {
            Some((u, to)) => st.apply(u, to),
            None => break,
        }
    }
}

/// Greedy passes of single-vertex moves; when those stall, pairwise swaps.
/// Every accepted step lowers the cut by more than `MIN_GAIN` and keeps all
/// parts within `max_size` and non-empty.
pub(crate) fn refine(g: &WGraph, part: &mut [usize], k: usize, max_size: usize) {
    if k < 2 {
        return;
    }
    let mut st = State::new(g, part, k);
    for _ in 0..MAX_PASSES {
        if move_pass(&mut st, k, max_size) {
            continue;
        }
        if !swap_pass(&mut st, max_size) {
            break;
        }
    }
}

fn move_pass(st: &mut State, k: usize, max_size: usize) -> bool {
    let mut moved = false;
    for u in 0..st.g.n() {
        let a = st.part[u];
        if st.count[a] < 2 {
            continue;
        }
        let own = st.conn.get(u, a);
        let mut best: Option<(f64, usize)> = None;
        for q in 0..k {
            if q == a || st.pw[q] + st.g.vwgt[u] > max_size {
                continue;
            }
            let gain = st.conn.get(u, q) - own;
            if gain > MIN_GAIN && best.is_none_or(|(bg, _)| gain > bg) {
                best = Some((gain, q));
            }
        }
        if let Some((_, q)) = best {
            st.apply(u, q);
            moved = true;
        }
    }
    moved
}

fn swap_pass(st: &mut State, max_size: usize) -> bool {
    let n = st.g.n();
    let mut w_u = vec![0.0f64; n];
    let mut swapped = false;
    for u in 0..n {
        let a = st.part[u];
        for (v, w) in st.g.edges(u) {
            w_u[v] = w;
        }
        let mut best: Option<(f64, usize)> = None;
        for v in 0..n {
            let b = st.part[v];
            if b == a || st.conn.get(u, b) <= 0.0 {
                continue;
            }
            let (wu, wv) = (st.g.vwgt[u], st.g.vwgt[v]);
            if st.pw[a] - wu + wv > max_size || st.pw[b] - wv + wu > max_size {
                continue;
            }
            let gain = st.conn.get(u, b) - st.conn.get(u, a) + st.conn.get(v, a) - st.conn.get(v, b) - 2.0 * w_u[v];
            if gain > MIN_GAIN && best.is_none_or(|(bg, _)| gain > bg) {
                best = Some((gain, v));
            }
        }
        for (v, _) in st.g.edges(u) {
            w_u[v] = 0.0;
        }
        if let Some((_, v)) = best {
            let b = st.part[v];
            st.apply(u, b);
            st.apply(v, a);
            swapped = true;
        }
    }
    swapped
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::token_graph::TokenGraph;

    fn path(n: usize) -> WGraph {
        let edges: Vec<_> = (0..n - 1).map(|i| (i, i + 1, 1.0)).collect();
        WGraph::from_token_graph(&TokenGraph::from_edges(n, edges).unwrap())
    }

    #[test]
    fn swap_fixes_interleaved_path() {
        let g = path(6);
        let mut part = vec![0, 1, 0, 1, 0, 1];
        let before = g.cut(&part);
        refine(&g, &mut part, 2, 3);
        assert!(g.cut(&part) < before);
        assert_eq!(g.part_weights(&part, 2), vec![3, 3]);
    }

    #[test]
    fn rebalance_respects_cap_and_fills_empty() {
        let g = path(8);
        let mut part = vec![0; 8];
        rebalance(&g, &mut part, 3, 3);
        let pw = g.part_weights(&part, 3);
        assert!(pw.iter().all(|&w| (1..=3).contains(&w)), "{pw:?}");
    }
}
