//! Sampling trajectories from the policy and reading answers off them.

use std::collections::BTreeSet;

use atrl_core::tensor_io::AttentionTensor;
use rand::Rng;

use crate::policy::{ToyPolicy, TrajectoryForward};
use crate::scene::{verify, SyntheticScene};

/// One sampled sequence with everything recorded during decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub tokens: Vec<usize>,
    /// Log-probability of each sampled token under the sampling policy.
    pub log_probs: Vec<f64>,
    /// Attention of token `t` over the context, `[head][t][ctx]`, padded with
    /// zeros past the causal frontier.
    pub attention: Vec<f64>,
    pub heads: usize,
    pub ctx_len: usize,
    pub answer: Option<usize>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Recorded attention as a single-layer tensor.
    pub fn attention_tensor(&self) -> AttentionTensor {
        let values = self.attention.iter().map(|&v| v as f32).collect();
        AttentionTensor::new(1, self.heads, self.len(), self.ctx_len, values, false).expect("recorded attention is valid")
    }

    pub fn reward(&self, scene: &SyntheticScene) -> f64 {
        verify(self.answer, scene)
    }
}

/// Context positions holding the visual slots.
pub fn visual_positions(policy: &ToyPolicy) -> BTreeSet<usize> {
    (0..policy.cfg.slots).collect()
}

/// Most frequent symbol in the answer segment; ties go to the symbol that
/// appeared first. `None` when the segment holds no symbol.
pub fn extract_answer(policy: &ToyPolicy, tokens: &[usize]) -> Option<usize> {
    let m = policy.cfg.symbols;
    let seg = &tokens[..policy.cfg.answer_len.min(tokens.len())];
    let mut counts = vec![0usize; m];
    let mut first = vec![usize::MAX; m];
    for (i, &t) in seg.iter().enumerate() {
        if t < m {
            counts[t] += 1;
            first[t] = first[t].min(i);
        }
    }
    (0..m)
        .filter(|&s| counts[s] > 0)
        .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(first[b].cmp(&first[a])))
}

fn sample(log_probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    log_probs.len() - 1
}

fn argmax(log_probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in log_probs.iter().enumerate() {
        if v > log_probs[best] {
            best = i;
        }
    }
    best
}

/// Decodes one trajectory of at most `max_len` tokens, stopping at the
/// terminal token. Greedy when `rng` is `None`.
pub fn decode(policy: &ToyPolicy, scene: &SyntheticScene, max_len: usize, rng: Option<&mut dyn rand::RngCore>) -> Trajectory {
    decode_with_forward(policy, scene, max_len, rng).0
}

/// As [`decode`], also returning the forward state that a teacher-forced
/// pass over the sampled tokens would produce.
pub fn decode_with_forward(
    policy: &ToyPolicy,
    scene: &SyntheticScene,
    max_len: usize,
    mut rng: Option<&mut dyn rand::RngCore>,
) -> (Trajectory, TrajectoryForward) {
    let cfg = &policy.cfg;
    let heads = cfg.heads;
    let ctx_len = cfg.ctx_len();
    let steps = max_len.min(cfg.gen_len());
    let mut cache = policy.prompt(&scene.slot_symbols);
    let mut tokens = Vec::with_capacity(steps);
    let mut log_probs = Vec::with_capacity(steps);
    let mut queries = Vec::with_capacity(steps);
    for t in 0..steps {
        let out = policy.query(&cache, cfg.allowed(t));
        let i = match rng.as_mut() {
            Some(r) => sample(&out.log_probs, r),
            None => argmax(&out.log_probs),
        };
        let tok = out.allowed.start + i;
        tokens.push(tok);
        log_probs.push(out.log_probs[i]);
        queries.push(out);
        if tok == cfg.terminal() {
            break;
        }
        if t + 1 < steps {
            policy.push(&mut cache, tok);
        }
    }
    let t_len = tokens.len();
    let mut attention = vec![0.0; heads * t_len * ctx_len];
    for (t, q) in queries.iter().enumerate() {
        let n = q.attn.len() / heads;
        for h in 0..heads {
            let dst = (h * t_len + t) * ctx_len;
            attention[dst..dst + n].copy_from_slice(q.head_row(h, heads));
        }
    }
    let answer = extract_answer(policy, &tokens);
    let traj = Trajectory {
        tokens,
        log_probs,
        attention,
        heads,
        ctx_len,
        answer,
    };
    (traj, TrajectoryForward { cache, queries })
}

/// `group` sampled trajectories for one scene, drawn in order from `rng`.
pub fn rollout(
    policy: &ToyPolicy,
    scene: &SyntheticScene,
    group: usize,
    max_len: usize,
    rng: &mut impl rand::RngCore,
) -> Vec<Trajectory> {
    (0..group).map(|_| decode(policy, scene, max_len, Some(&mut *rng))).collect()
}

/// As [`rollout`], keeping each trajectory's forward state.
pub fn rollout_with_forward(
    policy: &ToyPolicy,
    scene: &SyntheticScene,
    group: usize,
    max_len: usize,
    rng: &mut impl rand::RngCore,
) -> Vec<(Trajectory, TrajectoryForward)> {
    (0..group)
        .map(|_| decode_with_forward(policy, scene, max_len, Some(&mut *rng)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyConfig;
    use crate::scene::gen_scene;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn greedy_decoding_is_deterministic() {
        let pol = ToyPolicy::new(PolicyConfig::default(), 4);
        let scene = gen_scene(2);
        let a = decode(&pol, &scene, 64, None);
        let b = decode(&pol, &scene, 64, None);
        assert_eq!(a, b);
        assert_eq!(a.len(), pol.cfg.gen_len());
        assert_eq!(*a.tokens.last().unwrap(), pol.cfg.terminal());
    }

    #[test]
    fn recorded_rows_sum_to_one() {
        let pol = ToyPolicy::new(PolicyConfig::default(), 4);
        let scene = gen_scene(3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let trajs = rollout(&pol, &scene, 8, 64, &mut rng);
        assert_eq!(trajs.len(), 8);
        for tr in &trajs {
            let tensor = tr.attention_tensor();
            for h in 0..tr.heads {
                for t in 0..tr.len() {
                    let s: f64 = tensor.row(0, h, t).iter().map(|&v| v as f64).sum();
                    assert!((s - 1.0).abs() < 1e-6);
                }
            }
            let again = pol.forward(&scene.slot_symbols, &tr.tokens);
            assert_eq!(again.log_probs(&tr.tokens), tr.log_probs);
            assert_eq!(again.cache.len(), pol.cfg.prompt_len() + tr.len() - 1);
        }
        assert_ne!(trajs[0].tokens, trajs[1].tokens);
    }

    #[test]
    fn max_len_truncates_without_answer_segment() {
        let pol = ToyPolicy::new(PolicyConfig::default(), 4);
        let tr = decode(&pol, &gen_scene(3), 2, None);
        assert_eq!(tr.len(), 2);
        assert!(tr.answer.is_some());
    }

    #[test]
    fn plurality_answer() {
        let cfg = PolicyConfig {
            answer_len: 5,
            ..PolicyConfig::default()
        };
        let pol = ToyPolicy::new(cfg, 0);
        assert_eq!(extract_answer(&pol, &[3, 4, 4, 3, 1, 3, 3]), Some(3));
        assert_eq!(extract_answer(&pol, &[2, 5, 5, 2, 1]), Some(2));
        assert_eq!(extract_answer(&pol, &[12, 13]), None);
    }
}
