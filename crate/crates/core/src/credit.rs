//! Cluster weights, group-relative advantages, token-level modulation and the
//! clipped surrogate objectives built on top of them.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::partitioner::Clustering;
use crate::refine::{central_count, ImportanceVector};

/// Population std below which a reward group counts as degenerate.
pub const MIN_GROUP_STD: f64 = 1e-8;

pub const DEFAULT_HARD_P: f64 = 0.15;

#[derive(Debug, Error, PartialEq)]
pub enum CreditError {
    #[error("group of {0} rewards is too small, need at least 2")]
    GroupTooSmall(usize),
    #[error("{weights} cluster weights for a clustering with K={clusters}")]
    KMismatch { weights: usize, clusters: usize },
    #[error("fraction {0} must be in (0, 1]")]
    BadFraction(f64),
    #[error("importance ratio {0} must be positive")]
    NonPositiveRatio(f64),
    #[error("length mismatch: {what} has {found}, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("invalid surrogate parameter: {0}")]
    BadParams(String),
}

/// Share of total importance held by each cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterWeights(pub Vec<f64>);

impl ClusterWeights {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Per-token weights `w[cluster(t)]`.
    pub fn per_token(&self, clustering: &Clustering) -> Vec<f64> {
        clustering.assignment().iter().map(|&k| self.0[k]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub enum WeightingMode {
    #[default]
    AtRl,
    Uniform,
    Random,
    Reverse,
    HardTopP,
}

impl WeightingMode {
    pub const ALL: [WeightingMode; 5] = [
        WeightingMode::AtRl,
        WeightingMode::Uniform,
        WeightingMode::Random,
        WeightingMode::Reverse,
        WeightingMode::HardTopP,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            WeightingMode::AtRl => "at_rl",
            WeightingMode::Uniform => "uniform",
            WeightingMode::Random => "random",
            WeightingMode::Reverse => "reverse",
            WeightingMode::HardTopP => "hard_top_p",
        }
    }

    /// Modes whose weights come from the cluster pipeline.
    pub fn uses_clusters(self) -> bool {
        matches!(self, WeightingMode::AtRl | WeightingMode::Reverse)
    }
}

impl fmt::Display for WeightingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WeightingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "at_rl" | "at-rl" | "atrl" => Ok(WeightingMode::AtRl),
            "uniform" => Ok(WeightingMode::Uniform),
            "random" => Ok(WeightingMode::Random),
            "reverse" => Ok(WeightingMode::Reverse),
            "hard" | "hard_top_p" | "hard-top-p" => Ok(WeightingMode::HardTopP),
            other => Err(format!(
                "unknown weighting mode {other:?} (expected at-rl|uniform|random|reverse|hard)"
            )),
        }
    }
}

/// Which objective the trainer ascends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub enum Engine {
    #[default]
    Grpo,
    /// GRPO with the KL penalty removed.
    GrpoKlFree,
    Reinforce,
}

impl Engine {
    pub fn as_str(self) -> &'static str {
        match self {
            Engine::Grpo => "grpo",
            Engine::GrpoKlFree => "grpo-klfree",
            Engine::Reinforce => "reinforce",
        }
    }
}

impl fmt::Display for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Engine {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "grpo" => Ok(Engine::Grpo),
            "grpo-klfree" | "grpo_klfree" => Ok(Engine::GrpoKlFree),
            "reinforce" => Ok(Engine::Reinforce),
            other => Err(format!("unknown engine {other:?} (expected grpo|grpo-klfree|reinforce)")),
        }
    }
}

/// Sequence advantage together with its per-token expansion.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageSignal {
    pub seq_adv: f64,
    pub token_adv: Vec<f64>,
    pub mode: WeightingMode,
}

impl AdvantageSignal {
    /// Every token gets the sequence advantage.
    pub fn uniform(seq_adv: f64, len: usize) -> Self {
        Self {
            seq_adv,
            token_adv: vec![seq_adv; len],
            mode: WeightingMode::Uniform,
        }
    }

    /// `token_adv[t] = weights[t] * seq_adv`.
    pub fn weighted(seq_adv: f64, weights: &[f64], mode: WeightingMode) -> Self {
        Self {
            seq_adv,
            token_adv: weights.iter().map(|w| w * seq_adv).collect(),
            mode,
        }
    }

    pub fn len(&self) -> usize {
        self.token_adv.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_adv.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateParams {
    pub eps_low: f64,
    pub eps_high: f64,
    /// KL penalty coefficient.
    pub beta: f64,
}

impl Default for SurrogateParams {
    fn default() -> Self {
        Self {
            eps_low: 0.2,
            eps_high: 0.2,
            beta: 0.02,
        }
    }
}

impl SurrogateParams {
    pub fn validate(&self) -> Result<(), CreditError> {
        for (name, v) in [("eps_low", self.eps_low), ("eps_high", self.eps_high)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(CreditError::BadParams(format!("{name}={v} must be in (0, 1)")));
            }
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(CreditError::BadParams(format!("beta={} must be finite and >= 0", self.beta)));
        }
        Ok(())
    }
}

/// `w[k] = sum of phi over cluster k / sum of phi`. A zero total falls back
/// to `|C_k| / T`.
pub fn cluster_weights(importance: &ImportanceVector, clustering: &Clustering) -> ClusterWeights {
    let k = clustering.k();
    let mut mass = vec![0.0; k];
    for (&c, &p) in clustering.assignment().iter().zip(&importance.0) {
        mass[c] += p;
    }
    let total: f64 = mass.iter().sum();
    if total > 0.0 {
        ClusterWeights(mass.into_iter().map(|m| m / total).collect())
    } else {
        let n = clustering.len().max(1) as f64;
        ClusterWeights(clustering.sizes().into_iter().map(|s| s as f64 / n).collect())
    }
}

/// Z-scores rewards within a group using the population standard deviation.
/// Degenerate groups (std below 1e-8) map to all zeros.
pub fn group_advantage(rewards: &[f64]) -> Result<Vec<f64>, CreditError> {
    let g = rewards.len();
    if g < 2 {
        return Err(CreditError::GroupTooSmall(g));
    }
    let mean = rewards.iter().sum::<f64>() / g as f64;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / g as f64;
    let std = var.sqrt();
    if std < MIN_GROUP_STD {
        return Ok(vec![0.0; g]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// `token_adv[t] = w[cluster(t)] * seq_adv`.
pub fn modulate(seq_adv: f64, weights: &ClusterWeights, clustering: &Clustering) -> Result<AdvantageSignal, CreditError> {
    if weights.len() != clustering.k() {
        return Err(CreditError::KMismatch {
            weights: weights.len(),
            clusters: clustering.k(),
        });
    }
    Ok(AdvantageSignal::weighted(
        seq_adv,
        &weights.per_token(clustering),
        WeightingMode::AtRl,
    ))
}

/// `max(C) - C`, so the weakest tokens become the strongest.
pub fn reflect(values: &[f64]) -> Vec<f64> {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    values.iter().map(|v| max - v).collect()
}

/// Binary mask over the `ceil(p T)` highest values, ties by lowest index.
pub fn hard_mask(values: &[f64], p: f64) -> Result<Vec<f64>, CreditError> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(CreditError::BadFraction(p));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut mask = vec![0.0; values.len()];
    for &t in order.iter().take(central_count(values.len(), p)) {
        mask[t] = 1.0;
    }
    Ok(mask)
}

/// Per-token credit weights for `mode`.
///
/// Cluster modes use `clustering`: `at_rl` gives `w[cluster(t)]` of the
/// importance itself and `reverse` the same on its reflection. `p` is only
/// read by `hard_top_p` and `seed` only by `random`.
pub fn ablation_weights(
    importance: &[f64],
    clustering: &Clustering,
    mode: WeightingMode,
    p: f64,
    seed: u64,
) -> Result<Vec<f64>, CreditError> {
    let t = importance.len();
    if clustering.len() != t {
        return Err(CreditError::LengthMismatch {
            what: "clustering",
            expected: t,
            found: clustering.len(),
        });
    }
    Ok(match mode {
        WeightingMode::Uniform => vec![1.0; t],
        WeightingMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..t).map(|_| rng.random::<f64>()).collect()
        }
        WeightingMode::HardTopP => hard_mask(importance, p)?,
        WeightingMode::AtRl => cluster_weights(&ImportanceVector(importance.to_vec()), clustering).per_token(clustering),
        WeightingMode::Reverse => {
            cluster_weights(&ImportanceVector(reflect(importance)), clustering).per_token(clustering)
        }
    })
}

/// `min(r A, clamp(r, 1 - eps_low, 1 + eps_high) A)`.
pub fn clipped_term(ratio: f64, adv: f64, params: &SurrogateParams) -> Result<f64, CreditError> {
    if !(ratio > 0.0) {
        return Err(CreditError::NonPositiveRatio(ratio));
    }
    let clipped = ratio.clamp(1.0 - params.eps_low, 1.0 + params.eps_high);
    Ok((ratio * adv).min(clipped * adv))
}

/// Derivative of `clipped_term` with respect to the log-ratio: `r A` when
/// the unclipped branch is active, 0 otherwise.
pub fn clipped_term_dlogratio(ratio: f64, adv: f64, params: &SurrogateParams) -> f64 {
    let clipped = ratio.clamp(1.0 - params.eps_low, 1.0 + params.eps_high);
    if ratio * adv <= clipped * adv {
        ratio * adv
    } else {
        0.0
    }
}

/// Objective value with gradients for its per-token inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveValue {
    pub value: f64,
    pub surrogate: f64,
    pub kl: f64,
    /// d value / d log_probs_new, shaped like the input.
    pub grad_log_probs: Vec<Vec<f64>>,
    /// d value / d kl_per_token.
    pub grad_kl: Vec<Vec<f64>>,
}

fn check_len(what: &'static str, expected: usize, found: usize) -> Result<(), CreditError> {
    if expected != found {
        return Err(CreditError::LengthMismatch { what, expected, found });
    }
    Ok(())
}

/// Group mean of per-sequence mean clipped terms minus `beta` times the group
/// mean of per-sequence mean KL. Empty sequences contribute zero.
pub fn atrl_objective(
    log_probs_new: &[Vec<f64>],
    log_probs_old: &[Vec<f64>],
    advantages: &[AdvantageSignal],
    kl_per_token: &[Vec<f64>],
    params: &SurrogateParams,
) -> Result<ObjectiveValue, CreditError> {
    let g = log_probs_new.len();
    check_len("log_probs_old", g, log_probs_old.len())?;
    check_len("advantages", g, advantages.len())?;
    check_len("kl_per_token", g, kl_per_token.len())?;
    let mut surrogate = 0.0;
    let mut kl = 0.0;
    let mut grad_log_probs = Vec::with_capacity(g);
    let mut grad_kl = Vec::with_capacity(g);
    let inv_g = if g > 0 { 1.0 / g as f64 } else { 0.0 };
    for i in 0..g {
        let n = log_probs_new[i].len();
        check_len("log_probs_old", n, log_probs_old[i].len())?;
        check_len("token_adv", n, advantages[i].len())?;
        check_len("kl_per_token", n, kl_per_token[i].len())?;
        let scale = if n > 0 { inv_g / n as f64 } else { 0.0 };
        let mut seq_sum = 0.0;
        let mut seq_kl = 0.0;
        let mut grad = Vec::with_capacity(n);
        for t in 0..n {
            let ratio = (log_probs_new[i][t] - log_probs_old[i][t]).exp();
            let adv = advantages[i].token_adv[t];
            seq_sum += clipped_term(ratio, adv, params)?;
            seq_kl += kl_per_token[i][t];
            grad.push(scale * clipped_term_dlogratio(ratio, adv, params));
        }
        surrogate += seq_sum * scale;
        kl += seq_kl * scale;
        grad_log_probs.push(grad);
        grad_kl.push(vec![-params.beta * scale; n]);
    }
    Ok(ObjectiveValue {
        value: surrogate - params.beta * kl,
        surrogate,
        kl,
        grad_log_probs,
        grad_kl,
    })
}

/// Group mean of `sum_t token_adv[t] * log_prob[t]`.
pub fn reinforce_objective(
    log_probs_new: &[Vec<f64>],
    advantages: &[AdvantageSignal],
) -> Result<ObjectiveValue, CreditError> {
    let g = log_probs_new.len();
    check_len("advantages", g, advantages.len())?;
    let inv_g = if g > 0 { 1.0 / g as f64 } else { 0.0 };
    let mut value = 0.0;
    let mut grad_log_probs = Vec::with_capacity(g);
    for (lp, adv) in log_probs_new.iter().zip(advantages) {
        check_len("token_adv", lp.len(), adv.len())?;
        value += lp.iter().zip(&adv.token_adv).map(|(l, a)| l * a).sum::<f64>() * inv_g;
        grad_log_probs.push(adv.token_adv.iter().map(|a| a * inv_g).collect());
    }
    let grad_kl = log_probs_new.iter().map(|lp| vec![0.0; lp.len()]).collect();
    Ok(ObjectiveValue {
        value,
        surrogate: value,
        kl: 0.0,
        grad_log_probs,
        grad_kl,
    })
}
