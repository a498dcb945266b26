//! Cluster denoising and neighborhood expansion over per-token importance.
//!
//! Importance `phi` starts as the connectivity vector. Denoising attenuates
//! tokens whose footprint strays from their cluster centroid; expansion lets
//! high-degree central tokens lift the importance of close neighbors.

use std::str::FromStr;

use thiserror::Error;

use crate::calib::CalibratedMatrix;
use crate::partitioner::Clustering;
use crate::token_graph::{cosine, TokenGraph};

#[derive(Debug, Error, PartialEq)]
pub enum RefineError {
    #[error("cluster {0} has no members")]
    EmptyCluster(usize),
    #[error("length mismatch: {what} has {found}, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("invalid refine parameter: {0}")]
    BadParam(String),
}

/// Non-negative per-token importance.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceVector(pub Vec<f64>);

impl ImportanceVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }
}

impl From<Vec<f64>> for ImportanceVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// How central tokens are ranked for expansion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CentralBy {
    /// Weighted degree in the token graph.
    #[default]
    Degree,
    /// Importance `phi`.
    Phi,
}

impl FromStr for CentralBy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "degree" => Ok(CentralBy::Degree),
            "phi" => Ok(CentralBy::Phi),
            other => Err(format!("unknown central ranking {other:?} (expected degree|phi)")),
        }
    }
}

impl CentralBy {
    pub fn as_str(self) -> &'static str {
        match self {
            CentralBy::Degree => "degree",
            CentralBy::Phi => "phi",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineParams {
    /// Centroid similarity below which a token is attenuated.
    pub tau_cen: f64,
    /// Attenuation factor.
    pub alpha: f64,
    /// Fraction of tokens treated as central.
    pub q: f64,
    /// Neighbors considered per central token.
    pub r_neighbors: usize,
    pub lambda_sim: f64,
    pub lambda_imp: f64,
    /// Promotion threshold on `lambda_sim * cos + lambda_imp * phi_hat`.
    pub tau_nb: f64,
    pub central_by: CentralBy,
}

impl Default for RefineParams {
    fn default() -> Self {
        Self {
            tau_cen: 0.75,
            alpha: 0.6,
            q: 0.15,
            r_neighbors: 4,
            lambda_sim: 0.5,
            lambda_imp: 0.5,
            tau_nb: 0.65,
            central_by: CentralBy::Degree,
        }
    }
}

impl RefineParams {
    pub fn validate(&self) -> Result<(), RefineError> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(RefineError::BadParam(format!("alpha={} must be in (0, 1]", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.q) {
            return Err(RefineError::BadParam(format!("q={} must be in [0, 1]", self.q)));
        }
        for (name, v) in [
            ("tau_cen", self.tau_cen),
            ("lambda_sim", self.lambda_sim),
            ("lambda_imp", self.lambda_imp),
            ("tau_nb", self.tau_nb),
        ] {
            if !v.is_finite() {
                return Err(RefineError::BadParam(format!("{name}={v} must be finite")));
            }
        }
        Ok(())
    }
}

/// Mean of the member rows of the calibrated matrix.
pub fn centroid(calibrated: &CalibratedMatrix, members: &[usize]) -> Result<Vec<f64>, RefineError> {
    if members.is_empty() {
        return Err(RefineError::EmptyCluster(0));
    }
    let mut c = vec![0.0; calibrated.ctx_len()];
    for &t in members {
        for (acc, v) in c.iter_mut().zip(calibrated.row(t)) {
            *acc += v;
        }
    }
    let inv = 1.0 / members.len() as f64;
    c.iter_mut().for_each(|v| *v *= inv);
    Ok(c)
}

/// Multiplies `phi[t]` by `alpha` for every token whose footprint has cosine
/// below `tau_cen` with its cluster centroid. Never increases any entry.
pub fn denoise(
    calibrated: &CalibratedMatrix,
    clustering: &Clustering,
    phi: &ImportanceVector,
    params: &RefineParams,
) -> Result<ImportanceVector, RefineError> {
    let t = calibrated.gen_len();
    for (what, found) in [("phi", phi.len()), ("clustering", clustering.len())] {
        if found != t {
            return Err(RefineError::LengthMismatch { what, expected: t, found });
        }
    }
    let mut out = phi.0.clone();
    for (k, members) in clustering.members().iter().enumerate() {
        let c = centroid(calibrated, members).map_err(|_| RefineError::EmptyCluster(k))?;
        for &tok in members {
            if cosine(calibrated.row(tok), &c) < params.tau_cen {
                out[tok] *= params.alpha;
            }
        }
    }
    Ok(ImportanceVector(out))
}

/// Number of central tokens for fraction `q` of `n`: `ceil(q n)`, at least one
/// when `q > 0`.
pub fn central_count(n: usize, q: f64) -> usize {
    if q <= 0.0 || n == 0 {
        return 0;
    }
    (((q * n as f64) - 1e-9).ceil() as usize).clamp(1, n)
}

/// Indices of the central tokens, highest score first, ties by lowest index.
pub fn central_tokens(graph: &TokenGraph, phi: &ImportanceVector, params: &RefineParams) -> Vec<usize> {
    let n = graph.node_count();
    let score: &[f64] = match params.central_by {
        CentralBy::Degree => graph.degrees(),
        CentralBy::Phi => phi.as_slice(),
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
    order.truncate(central_count(n, params.q));
    order
}

/// Lifts neighbors of central tokens: among each central token's
/// `r_neighbors` heaviest edges, a neighbor `u` is promoted to
/// `max(phi[u], phi[center])` when
/// `lambda_sim * cos(u, center) + lambda_imp * phi[u] / max(phi) > tau_nb`.
/// All decisions read the incoming `phi`, so promotions do not chain.
pub fn expand(
    graph: &TokenGraph,
    calibrated: &CalibratedMatrix,
    phi: &ImportanceVector,
    params: &RefineParams,
) -> Result<ImportanceVector, RefineError> {
    let n = graph.node_count();
    for (what, found) in [("phi", phi.len()), ("calibrated", calibrated.gen_len())] {
        if found != n {
            return Err(RefineError::LengthMismatch { what, expected: n, found });
        }
    }
    let max_phi = phi.0.iter().cloned().fold(0.0f64, f64::max);
    let phi_hat = |u: usize| if max_phi > 0.0 { phi.0[u] / max_phi } else { 0.0 };

    let mut out = phi.0.clone();
    for center in central_tokens(graph, phi, params) {
        let mut nbrs: Vec<(usize, f64)> = graph.neighbors(center).to_vec();
        nbrs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for &(u, _) in nbrs.iter().take(params.r_neighbors) {
            let sim = cosine(calibrated.row(u), calibrated.row(center));
            let score = params.lambda_sim * sim + params.lambda_imp * phi_hat(u);
            if score > params.tau_nb {
                out[u] = out[u].max(phi.0[center]);
            }
        }
    }
    Ok(ImportanceVector(out))
}
