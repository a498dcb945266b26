//! Greedy balanced region growing on the coarsest graph.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::refine;
use super::wgraph::WGraph;

/// Best of several seeded growing trials, each balanced and refined.
/// Ranked by overweight first, then cut; earlier trials win ties.
pub(crate) fn initial_partition(g: &WGraph, k: usize, max_size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let trials = if g.n() <= 16 { 16 } else { 8 };
    let mut best: Option<(usize, f64, Vec<usize>)> = None;
    for _ in 0..trials {
        let mut part = grow(g, k, max_size, rng);
        refine::rebalance(g, &mut part, k, max_size);
        refine::refine(g, &mut part, k, max_size);
        let over: usize = g
            .part_weights(&part, k)
            .iter()
            .map(|&w| w.saturating_sub(max_size))
            .sum();
        let cut = g.cut(&part);
        let better = match &best {
            None => true,
            Some((bo, bc, _)) => over < *bo || (over == *bo && cut < *bc - 1e-12),
        };
        if better {
            best = Some((over, cut, part));
        }
    }
    best.expect("at least one trial").2
}

/// Grows parts one at a time from a random start, always absorbing the
/// unassigned vertex most strongly tied to the part. Isolated vertices are
/// handed out last, each to the currently lightest part.
fn grow(g: &WGraph, k: usize, max_size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = g.n();
    let mut part = vec![usize::MAX; n];
    let isolated: Vec<usize> = (0..n).filter(|&u| g.degree(u) == 0).collect();
    let mut remaining: usize = (0..n).filter(|&u| g.degree(u) > 0).map(|u| g.vwgt[u]).sum();
    let mut conn = vec![0.0f64; n];
    let mut pw = vec![0usize; k];

    for p in 0..k {
        if remaining == 0 {
            break;
        }
        let target = remaining.div_ceil(k - p);
        let last = p + 1 == k;
        conn.iter_mut().for_each(|c| *c = 0.0);
        loop {
            if !last && pw[p] >= target {
                break;
            }
            let pick = strongest(g, &part, &conn).or_else(|| random_free(g, &part, rng));
            let Some(v) = pick else { break };
            if !last && pw[p] > 0 && pw[p] + g.vwgt[v] > max_size {
                break;
            }
            part[v] = p;
            pw[p] += g.vwgt[v];
            remaining -= g.vwgt[v];
            for (x, w) in g.edges(v) {
                conn[x] += w;
            }
        }
    }
    for u in isolated {
        let lightest = (0..k).min_by_key(|&q| (pw[q], q)).unwrap();
        part[u] = lightest;
        pw[lightest] += g.vwgt[u];
    }
    part
}

fn strongest(g: &WGraph, part: &[usize], conn: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for u in 0..g.n() {
        if part[u] != usize::MAX || g.degree(u) == 0 || conn[u] <= 0.0 {
            continue;
        }
        if best.is_none_or(|b| conn[u] > conn[b]) {
            best = Some(u);
        }
    }
    best
}

fn random_free(g: &WGraph, part: &[usize], rng: &mut ChaCha8Rng) -> Option<usize> {
    let free: Vec<usize> = (0..g.n())
        .filter(|&u| part[u] == usize::MAX && g.degree(u) > 0)
        .collect();
    if free.is_empty() {
        None
    } else {
        Some(free[rng.random_range(0..free.len())])
    }
}
