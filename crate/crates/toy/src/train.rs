//! Group-relative policy-gradient training of the toy policy with pluggable
//! token credit.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use atrl_core::credit::{
    self, hard_mask, AdvantageSignal, CreditError, Engine, ObjectiveValue, SurrogateParams, WeightingMode,
};
use atrl_core::pipeline::{run_sequence, PipelineConfig, PipelineError, StageTimings};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{categorical_kl, logit_grad, PolicyConfig, ToyPolicy, TrajectoryForward};
use crate::rollout::{rollout_with_forward, visual_positions, Trajectory};
use crate::scene::{gen_scene_with, SyntheticScene};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Credit(#[from] CreditError),
    #[error("invalid training config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// Plain gradient ascent step.
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub policy: PolicyConfig,
    /// Credit pipeline, weighting mode, engine, surrogate and group size.
    pub pipeline: PipelineConfig,
    pub batch_prompts: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    pub steps: usize,
    pub seeds: Vec<u64>,
    /// Smoothed mean reward that counts as solved.
    pub threshold: f64,
    /// Trailing window for smoothing the reward curve.
    pub window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let pipeline = PipelineConfig {
            top_layers: Some(1),
            ..PipelineConfig::default()
        };
        Self {
            policy: PolicyConfig::default(),
            pipeline,
            batch_prompts: 16,
            lr: 0.02,
            optimizer: Optimizer::Adam,
            steps: 400,
            seeds: vec![0],
            threshold: 0.9,
            window: 10,
        }
    }
}

/// Parses `a..b` (inclusive), a comma list, or a single seed.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>, String> {
    let text = text.trim();
    let bad = |e: std::num::ParseIntError| format!("bad seed list {text:?}: {e}");
    if let Some((a, b)) = text.split_once("..") {
        let a: u64 = a.trim().parse().map_err(bad)?;
        let b: u64 = b.trim().trim_start_matches('=').parse().map_err(bad)?;
        if b < a {
            return Err(format!("empty seed range {text:?}"));
        }
        return Ok((a..=b).collect());
    }
    text.split(',').map(|s| s.trim().parse().map_err(bad)).collect()
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.trim().parse().map_err(|e| format!("bad value {value:?} for {key}: {e}"))
}

impl TrainConfig {
    /// Training and policy keys accepted by `set`, on top of the pipeline's.
    pub const KEYS: &'static [&'static str] = &[
        "steps",
        "lr",
        "batch_prompts",
        "optimizer",
        "seeds",
        "threshold",
        "window",
        "d",
        "heads",
        "symbols",
        "fillers",
        "slots",
        "answer_len",
        "filler_len",
        "filler_emits_symbols",
        "embed_std",
        "head_std",
    ];

    pub fn is_key(key: &str) -> bool {
        Self::KEYS.contains(&key) || key == "batch"
    }

    /// Sets a training, policy or pipeline key from text.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let p = &mut self.policy;
        match key {
            "steps" => self.steps = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "batch_prompts" | "batch" => self.batch_prompts = parse(key, value)?,
            "optimizer" => {
                self.optimizer = match value.trim() {
                    "adam" => Optimizer::Adam,
                    "sgd" => Optimizer::Sgd,
                    other => return Err(format!("unknown optimizer {other:?}")),
                }
            }
            "seeds" => self.seeds = parse_seeds(value)?,
            "threshold" => self.threshold = parse(key, value)?,
            "window" => self.window = parse(key, value)?,
            "d" => p.d = parse(key, value)?,
            "heads" => p.heads = parse(key, value)?,
            "symbols" => p.symbols = parse(key, value)?,
            "fillers" => p.fillers = parse(key, value)?,
            "slots" => p.slots = parse(key, value)?,
            "answer_len" => p.answer_len = parse(key, value)?,
            "filler_len" => p.filler_len = parse(key, value)?,
            "filler_emits_symbols" => p.filler_emits_symbols = parse(key, value)?,
            "embed_std" => p.embed_std = parse(key, value)?,
            "head_std" => p.head_std = parse(key, value)?,
            _ => return self.pipeline.set(key, value),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.policy.validate().map_err(TrainError::Config)?;
        self.pipeline.validate()?;
        if self.batch_prompts == 0 {
            return Err(TrainError::Config("batch_prompts must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("lr={} must be positive", self.lr)));
        }
        if self.window == 0 {
            return Err(TrainError::Config("window must be positive".into()));
        }
        Ok(())
    }

    fn surrogate(&self) -> SurrogateParams {
        let mut p = self.pipeline.surrogate;
        if self.pipeline.engine != Engine::Grpo {
            p.beta = 0.0;
        }
        p
    }
}

/// Wall-clock time per stage of a training step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepTimings {
    pub rollout: Duration,
    pub pipeline: StageTimings,
    pub forward: Duration,
    pub objective: Duration,
    pub backward: Duration,
    pub update: Duration,
    pub total: Duration,
}

impl StepTimings {
    fn add(&mut self, o: &StepTimings) {
        self.rollout += o.rollout;
        self.pipeline.add(&o.pipeline);
        self.forward += o.forward;
        self.objective += o.objective;
        self.backward += o.backward;
        self.update += o.update;
        self.total += o.total;
    }

    /// Seconds per named stage, plus `total`.
    pub fn to_map(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        m.insert("rollout".into(), self.rollout.as_secs_f64());
        for (name, d) in StageTimings::NAMES.iter().zip(self.pipeline.as_array()) {
            m.insert(format!("credit_{name}"), d.as_secs_f64());
        }
        m.insert("forward".into(), self.forward.as_secs_f64());
        m.insert("objective".into(), self.objective.as_secs_f64());
        m.insert("backward".into(), self.backward.as_secs_f64());
        m.insert("update".into(), self.update.as_secs_f64());
        m.insert("total".into(), self.total.as_secs_f64());
        m
    }

    /// Share of the step spent in the credit pipeline.
    pub fn credit_share(&self) -> f64 {
        let total = self.total.as_secs_f64();
        if total > 0.0 {
            self.pipeline.total().as_secs_f64() / total
        } else {
            0.0
        }
    }
}

/// Where high-connectivity tokens fall, measured on one step's trajectories.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AnchorSummary {
    /// Fraction of the top-15% connectivity tokens inside the answer segment.
    pub answer_share: f64,
    pub mean_connectivity_answer: f64,
    pub mean_connectivity_rest: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub mean_reward: f64,
    pub anchors: AnchorSummary,
    pub timings: StepTimings,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Ascent step along `grad`.
    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            params[i] += lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

const STREAM_SCENE: u64 = 1;
const STREAM_SAMPLE: u64 = 2;
const STREAM_CREDIT: u64 = 3;

/// Independent generator for `(kind, step, index)` under `seed`.
fn stream(seed: u64, kind: u64, step: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((kind << 56) | ((step as u64) << 24) | index as u64);
    rng
}

/// Scene `index` of step `step`; shared by every mode trained under `seed`.
pub fn step_scene(cfg: &TrainConfig, seed: u64, step: usize, index: usize) -> SyntheticScene {
    let scene_seed = stream(seed, STREAM_SCENE, step, index).next_u64();
    gen_scene_with(scene_seed, cfg.policy.slots, cfg.policy.symbols)
}

/// Per-token credit multipliers for one trajectory under the configured
/// mode, together with the connectivity it was computed from.
pub fn token_credit(
    policy: &ToyPolicy,
    traj: &Trajectory,
    pipeline: &PipelineConfig,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>, StageTimings), TrainError> {
    let out = run_sequence(&traj.attention_tensor(), &visual_positions(policy), pipeline, seed)?;
    Ok((out.token_weights, out.connectivity.0, out.timings))
}

/// A training run for one seed.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub seed: u64,
    policy: ToyPolicy,
    reference: ToyPolicy,
    adam: Adam,
    step: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, seed: u64) -> Result<Self, TrainError> {
        cfg.validate()?;
        let policy = ToyPolicy::new(cfg.policy, seed);
        let n = policy.num_params();
        Ok(Self {
            reference: policy.clone(),
            policy,
            adam: Adam::new(n),
            step: 0,
            cfg,
            seed,
        })
    }

    pub fn policy(&self) -> &ToyPolicy {
        &self.policy
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Samples a batch, computes credit and applies one update.
    pub fn step(&mut self) -> Result<StepStats, TrainError> {
        let start = Instant::now();
        let cfg = &self.cfg;
        let g = cfg.pipeline.group_size;
        let params = cfg.surrogate();
        let use_kl = cfg.pipeline.engine == Engine::Grpo && params.beta > 0.0;
        let inv_b = 1.0 / cfg.batch_prompts as f64;
        let max_len = cfg.policy.gen_len();
        let mut timings = StepTimings::default();
        let mut grad = vec![0.0; self.policy.num_params()];
        let mut reward_sum = 0.0;
        let mut anchor_acc = AnchorAcc::default();

        for b in 0..cfg.batch_prompts {
            let scene = step_scene(cfg, self.seed, self.step, b);
            let t0 = Instant::now();
            let mut rng = stream(self.seed, STREAM_SAMPLE, self.step, b);
            let (trajs, fwds): (Vec<Trajectory>, Vec<TrajectoryForward>) =
                rollout_with_forward(&self.policy, &scene, g, max_len, &mut rng).into_iter().unzip();
            timings.rollout += t0.elapsed();

            let rewards: Vec<f64> = trajs.iter().map(|t| t.reward(&scene)).collect();
            reward_sum += rewards.iter().sum::<f64>();
            let adv = credit::group_advantage(&rewards)?;

            let mut signals = Vec::with_capacity(g);
            for (i, traj) in trajs.iter().enumerate() {
                let credit_seed = stream(self.seed, STREAM_CREDIT, self.step, b * g + i).next_u64();
                let (weights, conn, st) = token_credit(&self.policy, traj, &cfg.pipeline, credit_seed)?;
                timings.pipeline.add(&st);
                anchor_acc.add(&conn, cfg.policy.answer_len);
                signals.push(match cfg.pipeline.mode {
                    WeightingMode::Uniform => AdvantageSignal::uniform(adv[i], traj.len()),
                    mode => AdvantageSignal::weighted(adv[i], &weights, mode),
                });
            }
            if adv.iter().all(|&a| a == 0.0) && !use_kl {
                continue;
            }

            let t0 = Instant::now();
            let refs: Option<Vec<TrajectoryForward>> = use_kl.then(|| {
                trajs
                    .iter()
                    .map(|t| self.reference.forward(&scene.slot_symbols, &t.tokens))
                    .collect()
            });
            timings.forward += t0.elapsed();

            let t0 = Instant::now();
            let obj = group_objective(cfg.pipeline.engine, &params, &trajs, &fwds, refs.as_deref(), &signals)?;
            timings.objective += t0.elapsed();

            let t0 = Instant::now();
            accumulate_group_grad(&self.policy, &trajs, &fwds, refs.as_deref(), &obj, inv_b, &mut grad);
            timings.backward += t0.elapsed();
        }

        let t0 = Instant::now();
        match cfg.optimizer {
            Optimizer::Adam => self.adam.step(&mut self.policy.params, &grad, cfg.lr),
            Optimizer::Sgd => {
                for (p, g) in self.policy.params.iter_mut().zip(&grad) {
                    *p += cfg.lr * g;
                }
            }
        }
        timings.update += t0.elapsed();
        self.step += 1;
        timings.total = start.elapsed();

        Ok(StepStats {
            mean_reward: reward_sum / (cfg.batch_prompts * g) as f64,
            anchors: anchor_acc.summary(),
            timings,
        })
    }
}

/// Objective of one group of trajectories given their forward states under
/// the policy being optimized and, when KL is penalized, under the reference.
pub fn group_objective(
    engine: Engine,
    params: &SurrogateParams,
    trajs: &[Trajectory],
    fwds: &[TrajectoryForward],
    refs: Option<&[TrajectoryForward]>,
    signals: &[AdvantageSignal],
) -> Result<ObjectiveValue, CreditError> {
    let lp_new: Vec<Vec<f64>> = fwds.iter().zip(trajs).map(|(f, t)| f.log_probs(&t.tokens)).collect();
    if engine == Engine::Reinforce {
        return credit::reinforce_objective(&lp_new, signals);
    }
    let lp_old: Vec<Vec<f64>> = trajs.iter().map(|t| t.log_probs.clone()).collect();
    let kl: Vec<Vec<f64>> = match refs {
        Some(refs) => fwds
            .iter()
            .zip(refs)
            .map(|(f, r)| {
                f.queries
                    .iter()
                    .zip(&r.queries)
                    .map(|(q, rq)| categorical_kl(&q.log_probs, &rq.log_probs))
                    .collect()
            })
            .collect(),
        None => lp_new.iter().map(|l| vec![0.0; l.len()]).collect(),
    };
    credit::atrl_objective(&lp_new, &lp_old, signals, &kl, params)
}

/// Adds `scale` times the parameter gradient of `obj` to `grad`.
pub fn accumulate_group_grad(
    policy: &ToyPolicy,
    trajs: &[Trajectory],
    fwds: &[TrajectoryForward],
    refs: Option<&[TrajectoryForward]>,
    obj: &ObjectiveValue,
    scale: f64,
    grad: &mut [f64],
) {
    for (i, (fwd, traj)) in fwds.iter().zip(trajs).enumerate() {
        let dlogits: Vec<Vec<f64>> = fwd
            .queries
            .iter()
            .enumerate()
            .map(|(t, q)| {
                let lr = refs.map(|r| r[i].queries[t].log_probs.as_slice());
                logit_grad(q, traj.tokens[t], obj.grad_log_probs[i][t] * scale, lr, obj.grad_kl[i][t] * scale)
            })
            .collect();
        policy.backward(fwd, &dlogits, grad);
    }
}

#[derive(Default)]
struct AnchorAcc {
    top_total: usize,
    top_answer: usize,
    answer_sum: f64,
    answer_n: usize,
    rest_sum: f64,
    rest_n: usize,
}

impl AnchorAcc {
    fn add(&mut self, conn: &[f64], answer_len: usize) {
        if let Ok(mask) = hard_mask(conn, 0.15) {
            for (t, m) in mask.iter().enumerate() {
                if *m > 0.0 {
                    self.top_total += 1;
                    self.top_answer += (t < answer_len) as usize;
                }
            }
        }
        for (t, &c) in conn.iter().enumerate() {
            if t < answer_len {
                self.answer_sum += c;
                self.answer_n += 1;
            } else {
                self.rest_sum += c;
                self.rest_n += 1;
            }
        }
    }

    fn summary(&self) -> AnchorSummary {
        let ratio = |a: f64, n: usize| if n > 0 { a / n as f64 } else { 0.0 };
        AnchorSummary {
            answer_share: ratio(self.top_answer as f64, self.top_total),
            mean_connectivity_answer: ratio(self.answer_sum, self.answer_n),
            mean_connectivity_rest: ratio(self.rest_sum, self.rest_n),
        }
    }
}

/// Deterministic outcome of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunCurve {
    pub seed: u64,
    pub mode: String,
    pub engine: String,
    pub beta: f64,
    /// Mean batch reward after each step.
    pub rewards: Vec<f64>,
    /// First step (1-based count) at which the trailing mean reaches the
    /// threshold.
    pub steps_to_threshold: Option<usize>,
    /// Mean reward over the final window.
    pub final_reward: f64,
    pub final_anchors: AnchorSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    #[serde(flatten)]
    pub curve: RunCurve,
    /// Seconds per stage summed over all steps.
    pub timings: BTreeMap<String, f64>,
    /// Fraction of step time spent computing token credit.
    pub credit_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub threshold: f64,
    pub window: usize,
    pub runs: Vec<RunReport>,
}

impl TrainReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Runs without their timings, for determinism checks.
    pub fn curves(&self) -> Vec<&RunCurve> {
        self.runs.iter().map(|r| &r.curve).collect()
    }
}

/// Trailing mean of `window` entries ending at each index.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for i in 0..values.len() {
        acc += values[i];
        if i >= window {
            acc -= values[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

/// Number of steps until the trailing mean over a full window first reaches
/// `threshold`.
pub fn steps_to_threshold(rewards: &[f64], window: usize, threshold: f64) -> Option<usize> {
    smooth(rewards, window)
        .iter()
        .enumerate()
        .skip(window.saturating_sub(1))
        .find(|(_, &r)| r >= threshold)
        .map(|(i, _)| i + 1)
}

/// Trains one seed for `cfg.steps` steps.
pub fn train_seed(cfg: &TrainConfig, seed: u64) -> Result<RunReport, TrainError> {
    let mut trainer = Trainer::new(cfg.clone(), seed)?;
    let mut rewards = Vec::with_capacity(cfg.steps);
    let mut timings = StepTimings::default();
    let mut anchors = AnchorSummary::default();
    for _ in 0..cfg.steps {
        let s = trainer.step()?;
        rewards.push(s.mean_reward);
        timings.add(&s.timings);
        anchors = s.anchors;
    }
    let tail = &rewards[rewards.len().saturating_sub(cfg.window)..];
    let final_reward = if tail.is_empty() {
        0.0
    } else {
        tail.iter().sum::<f64>() / tail.len() as f64
    };
    Ok(RunReport {
        curve: RunCurve {
            seed,
            mode: cfg.pipeline.mode.to_string(),
            engine: cfg.pipeline.engine.to_string(),
            beta: cfg.surrogate().beta,
            steps_to_threshold: steps_to_threshold(&rewards, cfg.window, cfg.threshold),
            rewards,
            final_reward,
            final_anchors: anchors,
        },
        credit_share: timings.credit_share(),
        timings: timings.to_map(),
    })
}

/// Trains every configured seed in order.
pub fn train(cfg: &TrainConfig) -> Result<TrainReport, TrainError> {
    let runs = cfg
        .seeds
        .iter()
        .map(|&s| train_seed(cfg, s))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TrainReport {
        steps: cfg.steps,
        threshold: cfg.threshold,
        window: cfg.window,
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothing_and_threshold() {
        assert_eq!(smooth(&[1.0, 3.0, 5.0], 2), vec![1.0, 2.0, 4.0]);
        let r = [0.0, 0.95, 0.95, 0.95];
        assert_eq!(steps_to_threshold(&r, 2, 0.9), Some(3));
        assert_eq!(steps_to_threshold(&r, 1, 0.9), Some(2));
        assert_eq!(steps_to_threshold(&[0.5; 4], 2, 0.9), None);
    }

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("0..3").unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(parse_seeds("0..=1").unwrap(), vec![0, 1]);
        assert_eq!(parse_seeds("4, 7").unwrap(), vec![4, 7]);
        assert_eq!(parse_seeds("9").unwrap(), vec![9]);
        assert!(parse_seeds("3..1").is_err());
        assert!(parse_seeds("x").is_err());
    }

    #[test]
    fn set_routes_keys() {
        let mut cfg = TrainConfig::default();
        cfg.set("steps", "12").unwrap();
        cfg.set("slots", "4").unwrap();
        cfg.set("tau_cen", "0.8").unwrap();
        cfg.set("optimizer", "sgd").unwrap();
        assert_eq!((cfg.steps, cfg.policy.slots, cfg.optimizer), (12, 4, Optimizer::Sgd));
        assert_eq!(cfg.pipeline.refine.tau_cen, 0.8);
        assert!(cfg.set("nope", "1").is_err());
    }

    #[test]
    fn streams_are_independent() {
        let a = stream(1, STREAM_SCENE, 0, 0).next_u64();
        assert_ne!(a, stream(1, STREAM_SCENE, 0, 1).next_u64());
        assert_ne!(a, stream(1, STREAM_SAMPLE, 0, 0).next_u64());
        assert_ne!(a, stream(1, STREAM_SCENE, 1, 0).next_u64());
        assert_eq!(a, stream(1, STREAM_SCENE, 0, 0).next_u64());
    }
}
