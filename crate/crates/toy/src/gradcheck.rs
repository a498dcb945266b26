//! Finite-difference check of the policy-gradient objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use atrl_core::credit::{self, AdvantageSignal, WeightingMode};

use crate::policy::{ToyPolicy, TrajectoryForward};
use crate::rollout::{rollout, Trajectory};
use crate::scene::{gen_scene_with, SyntheticScene};
use crate::train::{accumulate_group_grad, group_objective, token_credit, TrainConfig, TrainError};

/// Denominator floor of the relative error, so coordinates with a vanishing
/// gradient are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct CoordCheck {
    pub index: usize,
    pub block: &'static str,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub seed: u64,
    pub coords: Vec<CoordCheck>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.coords.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }
}

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

struct Fixture {
    scene: SyntheticScene,
    trajs: Vec<Trajectory>,
    signals: Vec<AdvantageSignal>,
}

fn value(policy: &ToyPolicy, reference: Option<&ToyPolicy>, cfg: &TrainConfig, fx: &Fixture) -> Result<f64, TrainError> {
    let (fwds, refs) = forwards(policy, reference, fx);
    let obj = group_objective(cfg.pipeline.engine, &surrogate(cfg), &fx.trajs, &fwds, refs.as_deref(), &fx.signals)?;
    Ok(obj.value)
}

fn forwards(
    policy: &ToyPolicy,
    reference: Option<&ToyPolicy>,
    fx: &Fixture,
) -> (Vec<TrajectoryForward>, Option<Vec<TrajectoryForward>>) {
    let run = |p: &ToyPolicy| -> Vec<TrajectoryForward> {
        fx.trajs.iter().map(|t| p.forward(&fx.scene.slot_symbols, &t.tokens)).collect()
    };
    (run(policy), reference.map(run))
}

fn surrogate(cfg: &TrainConfig) -> credit::SurrogateParams {
    let mut p = cfg.pipeline.surrogate;
    if cfg.pipeline.engine != credit::Engine::Grpo {
        p.beta = 0.0;
    }
    p
}

/// Compares the analytic gradient of one group's objective at the sampling
/// policy with central differences of step `h` on `coords` random
/// coordinates. The KL reference is an independently initialized policy so
/// the penalty has a nonzero gradient.
pub fn grad_check(cfg: &TrainConfig, seed: u64, coords: usize, h: f64) -> Result<GradCheck, TrainError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let policy = ToyPolicy::new(cfg.policy, seed);
    let reference = (surrogate(cfg).beta > 0.0).then(|| ToyPolicy::new(cfg.policy, seed ^ 0xa5a5_a5a5));

    // resample until the group has a nonzero advantage
    let fx = loop {
        let scene = gen_scene_with(rng.random(), cfg.policy.slots, cfg.policy.symbols);
        let trajs = rollout(&policy, &scene, cfg.pipeline.group_size, cfg.policy.gen_len(), &mut rng);
        let rewards: Vec<f64> = trajs.iter().map(|t| t.reward(&scene)).collect();
        let adv = credit::group_advantage(&rewards)?;
        if adv.iter().all(|&a| a == 0.0) {
            continue;
        }
        let mut signals = Vec::with_capacity(trajs.len());
        for (i, t) in trajs.iter().enumerate() {
            let (w, _, _) = token_credit(&policy, t, &cfg.pipeline, rng.random())?;
            signals.push(match cfg.pipeline.mode {
                WeightingMode::Uniform => AdvantageSignal::uniform(adv[i], t.len()),
                mode => AdvantageSignal::weighted(adv[i], &w, mode),
            });
        }
        break Fixture { scene, trajs, signals };
    };

    let (fwds, refs) = forwards(&policy, reference.as_ref(), &fx);
    let obj = group_objective(cfg.pipeline.engine, &surrogate(cfg), &fx.trajs, &fwds, refs.as_deref(), &fx.signals)?;
    let mut grad = vec![0.0; policy.num_params()];
    accumulate_group_grad(&policy, &fx.trajs, &fwds, refs.as_deref(), &obj, 1.0, &mut grad);

    let mut out = Vec::with_capacity(coords);
    let mut probe = policy.clone();
    for _ in 0..coords {
        let i = rng.random_range(0..policy.num_params());
        let orig = probe.params[i];
        probe.params[i] = orig + h;
        let up = value(&probe, reference.as_ref(), cfg, &fx)?;
        probe.params[i] = orig - h;
        let down = value(&probe, reference.as_ref(), cfg, &fx)?;
        probe.params[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        out.push(CoordCheck {
            index: i,
            block: policy.block_of(i),
            analytic: grad[i],
            numeric,
            rel_error: rel_error(grad[i], numeric),
        });
    }
    Ok(GradCheck { seed, coords: out })
}
