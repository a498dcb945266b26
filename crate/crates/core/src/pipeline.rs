//! End-to-end credit computation for one generated sequence, and the flat
//! `key=value` configuration that drives it.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::str::FromStr;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::calib::{self, BiasAxis, BiasParams, CalibError, CalibratedMatrix, ConnectivityVector};
use crate::credit::{self, ClusterWeights, CreditError, Engine, SurrogateParams, WeightingMode, DEFAULT_HARD_P};
use crate::partitioner::{self, Clustering, PartitionError, DEFAULT_EPS_BAL};
use crate::refine::{self, CentralBy, ImportanceVector, RefineError, RefineParams};
use crate::tensor_io::AttentionTensor;
use crate::token_graph::{self, TokenGraph, DEFAULT_TAU_SIM};

/// Tolerance on the cluster-weight sum checked after every run.
pub const WEIGHT_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Calib(#[from] CalibError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Credit(#[from] CreditError),
    #[error("sequence has no generated tokens")]
    EmptySequence,
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl PipelineError {
    /// True for errors caused by a computed result rather than by the inputs.
    pub fn is_invariant_violation(&self) -> bool {
        matches!(self, PipelineError::Invariant(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Final layers averaged; `None` means `min(4, L)`.
    pub top_layers: Option<usize>,
    pub bias: BiasParams,
    pub bias_axis: BiasAxis,
    pub tau_sim: f64,
    /// Cluster count; `None` means `max(2, T/10)`.
    pub k: Option<usize>,
    pub eps_bal: f64,
    pub refine: RefineParams,
    pub denoise: bool,
    pub expand: bool,
    pub surrogate: SurrogateParams,
    pub mode: WeightingMode,
    pub hard_p: f64,
    pub engine: Engine,
    pub group_size: usize,
    /// Fraction of tokens counted as anchors in reports.
    pub anchor_p: f64,
    pub hist_bins: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            top_layers: None,
            bias: BiasParams::default(),
            bias_axis: BiasAxis::Gen,
            tau_sim: DEFAULT_TAU_SIM,
            k: None,
            eps_bal: DEFAULT_EPS_BAL,
            refine: RefineParams::default(),
            denoise: true,
            expand: true,
            surrogate: SurrogateParams::default(),
            mode: WeightingMode::AtRl,
            hard_p: DEFAULT_HARD_P,
            engine: Engine::Grpo,
            group_size: 8,
            anchor_p: 0.15,
            hist_bins: 50,
            seed: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| format!("bad value {value:?} for {key}: {e}"))
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>, String>
where
    T::Err: std::fmt::Display,
{
    match value {
        "auto" | "" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

impl PipelineConfig {
    pub const KEYS: &'static [&'static str] = &[
        "top_layers",
        "lambda_exp",
        "gamma",
        "lambda_cos",
        "bias_axis",
        "tau_sim",
        "k",
        "eps_bal",
        "tau_cen",
        "alpha",
        "q",
        "r",
        "lambda_sim",
        "lambda_imp",
        "tau_nb",
        "central_by",
        "denoise",
        "expand",
        "eps_low",
        "eps_high",
        "beta",
        "mode",
        "hard_p",
        "engine",
        "group_size",
        "anchor_p",
        "hist_bins",
        "seed",
    ];

    /// Sets one field from its textual form. Unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let value = value.trim();
        let mut bias = (self.bias.lambda_exp(), self.bias.gamma(), self.bias.lambda_cos());
        match key {
            "top_layers" => self.top_layers = parse_opt(key, value)?,
            "lambda_exp" => bias.0 = parse(key, value)?,
            "gamma" => bias.1 = parse(key, value)?,
            "lambda_cos" => bias.2 = parse(key, value)?,
            "bias_axis" => self.bias_axis = parse(key, value)?,
            "tau_sim" => self.tau_sim = parse(key, value)?,
            "k" => self.k = parse_opt(key, value)?,
            "eps_bal" => self.eps_bal = parse(key, value)?,
            "tau_cen" => self.refine.tau_cen = parse(key, value)?,
            "alpha" => self.refine.alpha = parse(key, value)?,
            "q" => self.refine.q = parse(key, value)?,
            "r" | "r_neighbors" => self.refine.r_neighbors = parse(key, value)?,
            "lambda_sim" => self.refine.lambda_sim = parse(key, value)?,
            "lambda_imp" => self.refine.lambda_imp = parse(key, value)?,
            "tau_nb" => self.refine.tau_nb = parse(key, value)?,
            "central_by" => self.refine.central_by = parse::<CentralBy>(key, value)?,
            "denoise" => self.denoise = parse(key, value)?,
            "expand" => self.expand = parse(key, value)?,
            "eps_low" => self.surrogate.eps_low = parse(key, value)?,
            "eps_high" => self.surrogate.eps_high = parse(key, value)?,
            "eps" => {
                let e = parse(key, value)?;
                self.surrogate.eps_low = e;
                self.surrogate.eps_high = e;
            }
            "beta" => self.surrogate.beta = parse(key, value)?,
            "mode" => self.mode = parse(key, value)?,
            "hard_p" => self.hard_p = parse(key, value)?,
            "engine" => self.engine = parse(key, value)?,
            "group_size" => self.group_size = parse(key, value)?,
            "anchor_p" => self.anchor_p = parse(key, value)?,
            "hist_bins" => self.hist_bins = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            other => return Err(format!("unknown config key {other:?}")),
        }
        self.bias = BiasParams::new(bias.0, bias.1, bias.2).map_err(|e| e.to_string())?;
        Ok(())
    }

    /// Current value of `key` in the same textual form `set` accepts.
    pub fn get(&self, key: &str) -> Option<String> {
        let f = crate::numfmt::sig9;
        let opt = |v: Option<usize>| v.map_or_else(|| "auto".to_string(), |x| x.to_string());
        Some(match key {
            "top_layers" => opt(self.top_layers),
            "lambda_exp" => f(self.bias.lambda_exp()),
            "gamma" => f(self.bias.gamma()),
            "lambda_cos" => f(self.bias.lambda_cos()),
            "bias_axis" => self.bias_axis.as_str().to_string(),
            "tau_sim" => f(self.tau_sim),
            "k" => opt(self.k),
            "eps_bal" => f(self.eps_bal),
            "tau_cen" => f(self.refine.tau_cen),
            "alpha" => f(self.refine.alpha),
            "q" => f(self.refine.q),
            "r" => self.refine.r_neighbors.to_string(),
            "lambda_sim" => f(self.refine.lambda_sim),
            "lambda_imp" => f(self.refine.lambda_imp),
            "tau_nb" => f(self.refine.tau_nb),
            "central_by" => self.refine.central_by.as_str().to_string(),
            "denoise" => self.denoise.to_string(),
            "expand" => self.expand.to_string(),
            "eps_low" => f(self.surrogate.eps_low),
            "eps_high" => f(self.surrogate.eps_high),
            "beta" => f(self.surrogate.beta),
            "mode" => self.mode.as_str().to_string(),
            "hard_p" => f(self.hard_p),
            "engine" => self.engine.as_str().to_string(),
            "group_size" => self.group_size.to_string(),
            "anchor_p" => f(self.anchor_p),
            "hist_bins" => self.hist_bins.to_string(),
            "seed" => self.seed.to_string(),
            _ => return None,
        })
    }

    /// Applies `key=value` lines on top of `self`. Blank lines and `#`
    /// comments are skipped. Keys not in `KEYS` are returned for the caller
    /// when `passthrough` accepts them, otherwise rejected.
    pub fn apply_text(
        &mut self,
        text: &str,
        passthrough: impl Fn(&str) -> bool,
    ) -> Result<Vec<(String, String)>, PipelineError> {
        let mut extra = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| PipelineError::Config { line: i + 1, message };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if passthrough(key) {
                extra.push((key.to_string(), value.to_string()));
            } else {
                self.set(key, value).map_err(err)?;
            }
        }
        self.validate()?;
        Ok(extra)
    }

    pub fn from_text(text: &str) -> Result<Self, PipelineError> {
        let mut cfg = Self::default();
        cfg.apply_text(text, |_| false)?;
        Ok(cfg)
    }

    /// Every key with its current value, one `key=value` per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in Self::KEYS {
            let _ = writeln!(s, "{key}={}", self.get(key).expect("listed key"));
        }
        s
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |message: String| PipelineError::Config { line: 0, message };
        self.refine.validate()?;
        self.surrogate.validate()?;
        if !self.tau_sim.is_finite() {
            return Err(bad(format!("tau_sim={} must be finite", self.tau_sim)));
        }
        if !(self.hard_p > 0.0 && self.hard_p <= 1.0) {
            return Err(CreditError::BadFraction(self.hard_p).into());
        }
        if !(self.anchor_p > 0.0 && self.anchor_p < 1.0) {
            return Err(bad(format!("anchor_p={} must be in (0, 1)", self.anchor_p)));
        }
        if self.group_size < 2 {
            return Err(CreditError::GroupTooSmall(self.group_size).into());
        }
        if self.hist_bins == 0 {
            return Err(bad("hist_bins must be at least 1".into()));
        }
        if self.k == Some(0) {
            return Err(PartitionError::ZeroClusters.into());
        }
        if !(self.eps_bal >= 0.0 && self.eps_bal.is_finite()) {
            return Err(PartitionError::BadTolerance(self.eps_bal).into());
        }
        Ok(())
    }

    pub fn cluster_count(&self, gen_len: usize) -> usize {
        self.k.unwrap_or_else(|| partitioner::cluster_count(gen_len))
    }
}

/// Wall-clock time spent in each stage.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    pub aggregate: Duration,
    pub debias: Duration,
    pub connectivity: Duration,
    pub graph: Duration,
    pub partition: Duration,
    pub refine: Duration,
    pub credit: Duration,
}

impl StageTimings {
    pub const NAMES: [&'static str; 7] = [
        "aggregate",
        "debias",
        "connectivity",
        "graph",
        "partition",
        "refine",
        "credit",
    ];

    pub fn as_array(&self) -> [Duration; 7] {
        [
            self.aggregate,
            self.debias,
            self.connectivity,
            self.graph,
            self.partition,
            self.refine,
            self.credit,
        ]
    }

    pub fn total(&self) -> Duration {
        self.as_array().iter().sum()
    }

    pub fn add(&mut self, other: &StageTimings) {
        self.aggregate += other.aggregate;
        self.debias += other.debias;
        self.connectivity += other.connectivity;
        self.graph += other.graph;
        self.partition += other.partition;
        self.refine += other.refine;
        self.credit += other.credit;
    }
}

/// Everything computed for one sequence.
#[derive(Debug, Clone)]
pub struct SequenceCredit {
    pub calibrated: CalibratedMatrix,
    pub connectivity: ConnectivityVector,
    pub graph: TokenGraph,
    pub clustering: Clustering,
    /// Refined importance the weights were computed from. For `reverse` this
    /// is the refined reflection of the connectivity.
    pub phi: ImportanceVector,
    pub cluster_weights: ClusterWeights,
    /// Multiplier applied to the sequence advantage at each token.
    pub token_weights: Vec<f64>,
    pub timings: StageTimings,
}

impl SequenceCredit {
    pub fn gen_len(&self) -> usize {
        self.token_weights.len()
    }
}

fn timed<T>(slot: &mut Duration, f: impl FnOnce() -> T) -> T {
    let start = Instant::now();
    let out = f();
    *slot += start.elapsed();
    out
}

/// Runs aggregation, calibration and the rest of the pipeline on a raw
/// attention tensor. `seed` drives partitioning and the random mode.
pub fn run_sequence(
    tensor: &AttentionTensor,
    visual: &BTreeSet<usize>,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<SequenceCredit, PipelineError> {
    let mut timings = StageTimings::default();
    if tensor.gen_len() == 0 {
        return Err(PipelineError::EmptySequence);
    }
    let top = cfg.top_layers.unwrap_or_else(|| calib::default_top_layers(tensor.layers()));
    let agg = timed(&mut timings.aggregate, || calib::aggregate(tensor, top))?;
    run_aggregated(&agg, visual, cfg, seed, timings)
}

/// Pipeline from an already aggregated matrix; `timings` is extended.
pub fn run_aggregated(
    agg: &CalibratedMatrix,
    visual: &BTreeSet<usize>,
    cfg: &PipelineConfig,
    seed: u64,
    mut timings: StageTimings,
) -> Result<SequenceCredit, PipelineError> {
    let t = agg.gen_len();
    if t == 0 {
        return Err(PipelineError::EmptySequence);
    }
    let calibrated = timed(&mut timings.debias, || {
        let len = match cfg.bias_axis {
            BiasAxis::Gen => agg.gen_len(),
            BiasAxis::Ctx => agg.ctx_len(),
        };
        calib::debias(agg, &calib::bias_curve(len, &cfg.bias), cfg.bias_axis)
    })?;
    let connectivity = timed(&mut timings.connectivity, || calib::connectivity(&calibrated, visual))?;
    let graph = timed(&mut timings.graph, || token_graph::build_graph(&calibrated, cfg.tau_sim));
    let clustering = timed(&mut timings.partition, || {
        partitioner::partition(&graph, cfg.cluster_count(t), cfg.eps_bal, seed)
    })?;

    let phi = timed(&mut timings.refine, || -> Result<ImportanceVector, RefineError> {
        let base = match cfg.mode {
            WeightingMode::Reverse => credit::reflect(connectivity.as_slice()),
            _ => connectivity.0.clone(),
        };
        let mut phi = ImportanceVector(base);
        if cfg.mode.uses_clusters() {
            if cfg.denoise {
                phi = refine::denoise(&calibrated, &clustering, &phi, &cfg.refine)?;
            }
            if cfg.expand {
                phi = refine::expand(&graph, &calibrated, &phi, &cfg.refine)?;
            }
        }
        Ok(phi)
    })?;

    let (cluster_weights, token_weights) = timed(&mut timings.credit, || -> Result<_, CreditError> {
        let w = credit::cluster_weights(&phi, &clustering);
        let tokens = match cfg.mode {
            WeightingMode::AtRl | WeightingMode::Reverse => w.per_token(&clustering),
            mode => credit::ablation_weights(connectivity.as_slice(), &clustering, mode, cfg.hard_p, seed)?,
        };
        Ok((w, tokens))
    })?;

    let sum: f64 = cluster_weights.0.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL || token_weights.iter().any(|w| !w.is_finite()) {
        return Err(PipelineError::Invariant(format!("cluster weights sum to {sum}")));
    }

    Ok(SequenceCredit {
        calibrated,
        connectivity,
        graph,
        clustering,
        phi,
        cluster_weights,
        token_weights,
        timings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(rows: &[&[f32]]) -> AttentionTensor {
        let s = rows[0].len();
        let values = rows.iter().flat_map(|r| r.iter().copied()).collect();
        AttentionTensor::new(1, 1, rows.len(), s, values, false).unwrap()
    }

    #[test]
    fn config_round_trips_through_text() {
        let mut cfg = PipelineConfig::default();
        cfg.set("tau_cen", "0.8").unwrap();
        cfg.set("k", "5").unwrap();
        cfg.set("mode", "reverse").unwrap();
        cfg.set("lambda_exp", "0.3").unwrap();
        let back = PipelineConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(PipelineConfig::from_text(&PipelineConfig::default().to_text()).unwrap(), PipelineConfig::default());
    }

    #[test]
    fn config_text_errors_carry_line_numbers() {
        let err = PipelineConfig::from_text("# comment\n\ntau_cen = 0.7\nbogus=1\n").unwrap_err();
        assert!(matches!(err, PipelineError::Config { line: 4, .. }), "{err}");
        assert!(PipelineConfig::from_text("alpha=2").is_err());
        assert!(PipelineConfig::from_text("tau_cen").is_err());
        let mut cfg = PipelineConfig::default();
        let extra = cfg.apply_text("attention=a.atn\nalpha=0.5", |k| k == "attention").unwrap();
        assert_eq!(extra, vec![("attention".to_string(), "a.atn".to_string())]);
        assert_eq!(cfg.refine.alpha, 0.5);
    }

    #[test]
    fn defaults_match_documented_values() {
        let cfg = PipelineConfig::default();
        let expect = [
            ("lambda_exp", "0.15"),
            ("gamma", "4"),
            ("lambda_cos", "0.05"),
            ("tau_sim", "0.7"),
            ("k", "auto"),
            ("tau_cen", "0.75"),
            ("alpha", "0.6"),
            ("q", "0.15"),
            ("r", "4"),
            ("lambda_sim", "0.5"),
            ("lambda_imp", "0.5"),
            ("tau_nb", "0.65"),
            ("eps_low", "0.2"),
            ("eps_high", "0.2"),
            ("beta", "0.02"),
            ("group_size", "8"),
        ];
        for (k, v) in expect {
            assert_eq!(cfg.get(k).unwrap(), v, "{k}");
        }
        assert_eq!(cfg.cluster_count(45), 4);
    }

    #[test]
    fn single_token_sequence() {
        let t = tensor(&[&[0.6, 0.4]]);
        let visual = BTreeSet::from([0]);
        let out = run_sequence(&t, &visual, &PipelineConfig::default(), 0).unwrap();
        assert_eq!(out.clustering.k(), 1);
        assert_eq!(out.cluster_weights.0, vec![1.0]);
        assert_eq!(out.token_weights, vec![1.0]);
    }

    #[test]
    fn uniform_mode_weights_are_ones() {
        let t = tensor(&[&[0.6, 0.4], &[0.1, 0.9], &[0.5, 0.5], &[0.2, 0.8]]);
        let cfg = PipelineConfig {
            mode: WeightingMode::Uniform,
            ..PipelineConfig::default()
        };
        let out = run_sequence(&t, &BTreeSet::from([0]), &cfg, 3).unwrap();
        assert_eq!(out.token_weights, vec![1.0; 4]);
    }

    #[test]
    fn at_rl_weights_follow_connectivity_mass() {
        // two tokens look at the image, two at the text
        let t = tensor(&[&[0.9, 0.1], &[0.1, 0.9], &[0.85, 0.15], &[0.05, 0.95]]);
        let cfg = PipelineConfig {
            denoise: false,
            expand: false,
            ..PipelineConfig::default()
        };
        let out = run_sequence(&t, &BTreeSet::from([0]), &cfg, 1).unwrap();
        let a = out.clustering.assignment();
        assert_eq!(a[0], a[2]);
        assert_eq!(a[1], a[3]);
        assert_ne!(a[0], a[1]);
        let c = out.connectivity.as_slice();
        let hi = (c[0] + c[2]) / c.iter().sum::<f64>();
        assert!((out.token_weights[0] - hi).abs() < 1e-12);
        assert!((out.token_weights[1] - (1.0 - hi)).abs() < 1e-12);

        let rev = run_sequence(
            &t,
            &BTreeSet::from([0]),
            &PipelineConfig {
                mode: WeightingMode::Reverse,
                ..cfg
            },
            1,
        )
        .unwrap();
        assert!(rev.token_weights[1] > rev.token_weights[0]);
    }

    #[test]
    fn timings_cover_every_stage() {
        let t = tensor(&[&[0.6, 0.4], &[0.1, 0.9], &[0.5, 0.5]]);
        let out = run_sequence(&t, &BTreeSet::from([1]), &PipelineConfig::default(), 0).unwrap();
        assert_eq!(out.timings.total(), out.timings.as_array().iter().sum());
    }
}
