//! Trains every weighting mode on a few seeds and prints the outcome.
//!
//! `cargo run --release -p atrl-toy --example compare_modes -- STEPS SEEDS [LR]`

use atrl_core::credit::WeightingMode;
use atrl_toy::train::{train_seed, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    let seeds: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1e-2);
    let modes: Vec<WeightingMode> = match std::env::var("MODES") {
        Ok(m) => m.split(',').map(|s| s.parse().expect("mode")).collect(),
        Err(_) => vec![WeightingMode::AtRl, WeightingMode::Uniform, WeightingMode::Reverse, WeightingMode::HardTopP],
    };
    let env = |k: &str| std::env::var(k).ok().and_then(|v| v.parse::<f64>().ok());
    let first = env("SEED0").map_or(0, |v| v as u64);
    for seed in first..first + seeds {
        for &mode in &modes {
            let mut cfg = TrainConfig {
                steps,
                lr,
                ..TrainConfig::default()
            };
            cfg.pipeline.mode = mode;
            if let Some(v) = env("SLOTS") {
                cfg.policy.slots = v as usize;
            }
            if let Some(v) = env("SYMBOLS") {
                cfg.policy.symbols = v as usize;
            }
            if let Some(v) = env("ANSWER") {
                cfg.policy.answer_len = v as usize;
            }
            if let Some(v) = env("FILLER") {
                cfg.policy.filler_len = v as usize;
            }
            if let Some(v) = env("FES") {
                cfg.policy.filler_emits_symbols = v != 0.0;
            }
            if let Some(v) = env("BETA") {
                cfg.pipeline.surrogate.beta = v;
            }
            if let Some(v) = env("SGD") {
                if v != 0.0 {
                    cfg.optimizer = atrl_toy::train::Optimizer::Sgd;
                }
            }
            if let Some(v) = env("D") {
                cfg.policy.d = v as usize;
            }
            if let Some(v) = env("HEADS") {
                cfg.policy.heads = v as usize;
            }
            if let Some(v) = env("HEADSTD") {
                cfg.policy.head_std = v;
            }
            if let Some(v) = env("EMBSTD") {
                cfg.policy.embed_std = v;
            }
            if let Some(v) = env("BATCH") {
                cfg.batch_prompts = v as usize;
            }
            let t = std::time::Instant::now();
            let r = train_seed(&cfg, seed).expect("training runs");
            let c = &r.curve;
            if seed == 0 && mode == WeightingMode::AtRl {
                eprintln!("{:?}", r.timings);
            }
            let early: f64 = c.rewards.iter().take(10).sum::<f64>() / 10.0;
            let sm = atrl_toy::train::smooth(&c.rewards, 10);
            let marks: Vec<String> = sm.iter().skip(49).step_by(50).map(|v| format!("{v:+.2}")).collect();
            println!("  curve {}", marks.join(" "));
            println!(
                "seed {seed} {:<10} stt {:>5?} final {:+.3} first10 {:+.3} share {:.2} conn a/r {:.3}/{:.3} {:.1}s",
                mode.as_str(),
                c.steps_to_threshold,
                c.final_reward,
                early,
                c.final_anchors.answer_share,
                c.final_anchors.mean_connectivity_answer,
                c.final_anchors.mean_connectivity_rest,
                t.elapsed().as_secs_f64()
            );
        }
    }
}
