//! Seeded synthetic inputs: random attention tensors and the skewed
//! connectivity fixture modeled on the published token statistics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::calib::{bias_curve, BiasParams};
use crate::tensor_io::{AttentionTensor, Modality, TokenMeta};

/// Row-stochastic tensor whose rows are normalized exponentials of
/// `sharpness * N(0, 1)` draws.
pub fn random_attention(
    layers: usize,
    heads: usize,
    gen_len: usize,
    ctx_len: usize,
    sharpness: f64,
    seed: u64,
) -> AttentionTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(layers * heads * gen_len * ctx_len);
    let mut row = vec![0.0f64; ctx_len];
    for _ in 0..layers * heads * gen_len {
        for v in row.iter_mut() {
            // Box-Muller is enough here and keeps the dependency list short
            let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            let u2: f64 = rng.random();
            let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            *v = (sharpness * z).exp();
        }
        let sum: f64 = row.iter().sum();
        values.extend(row.iter().map(|v| (v / sum) as f32));
    }
    AttentionTensor::new(layers, heads, gen_len, ctx_len, values, true).expect("valid random tensor")
}

/// Metadata marking the first `visual` context positions as image tokens.
pub fn prefix_meta(ctx_len: usize, visual: usize) -> TokenMeta {
    TokenMeta {
        ctx_modality: (0..ctx_len)
            .map(|j| if j < visual { Modality::Vision } else { Modality::Language })
            .collect(),
        gen_text: None,
    }
}

pub const FIXTURE_TOKENS: usize = 540;
pub const FIXTURE_ANCHORS: usize = 81;
pub const FIXTURE_VISUAL: usize = 32;
pub const FIXTURE_CONTEXT: usize = 48;
pub const FIXTURE_SEED: u64 = 540;
/// Largest non-anchor and smallest anchor connectivity.
pub const FIXTURE_LOW_MAX: f64 = 0.0366;
pub const FIXTURE_HIGH_MIN: f64 = 0.038;

/// Target connectivity of the fixture: 459 low values with a long thin tail
/// up to 0.0366 and 81 anchors from 0.038 upward, shuffled.
pub fn fixture_connectivity(seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let low_n = FIXTURE_TOKENS - FIXTURE_ANCHORS;
    let mut c = Vec::with_capacity(FIXTURE_TOKENS);
    for i in 0..low_n {
        let v = if i == 0 {
            FIXTURE_LOW_MAX
        } else {
            // skewed toward small values
            0.001 + (FIXTURE_LOW_MAX - 0.001) * rng.random::<f64>().powi(3)
        };
        c.push(v);
    }
    for i in 0..FIXTURE_ANCHORS {
        let v = if i == 0 {
            FIXTURE_HIGH_MIN
        } else {
            FIXTURE_HIGH_MIN + 0.16 * rng.random::<f64>().powi(2)
        };
        c.push(v);
    }
    for i in (1..c.len()).rev() {
        let j = rng.random_range(0..=i);
        c.swap(i, j);
    }
    c
}

/// Single-layer, single-head tensor whose calibrated connectivity equals
/// `fixture_connectivity(seed)` under the default bias curve. Row `i` is
/// stochastic and carries `C_i * b_i` on the visual prefix.
pub fn anchor_fixture(seed: u64) -> (AttentionTensor, TokenMeta) {
    let target = fixture_connectivity(seed);
    let b = bias_curve(FIXTURE_TOKENS, &BiasParams::default());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut values = Vec::with_capacity(FIXTURE_TOKENS * FIXTURE_CONTEXT);
    for (c, bi) in target.iter().zip(&b) {
        let visual_mass = c * bi;
        let split = |n: usize, mass: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
            let w: Vec<f64> = (0..n).map(|_| 0.5 + rng.random::<f64>()).collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|x| x * mass / s).collect()
        };
        let vis = split(FIXTURE_VISUAL, visual_mass, &mut rng);
        let lang = split(FIXTURE_CONTEXT - FIXTURE_VISUAL, 1.0 - visual_mass, &mut rng);
        values.extend(vis.into_iter().chain(lang).map(|v| v as f32));
    }
    let tensor = AttentionTensor::new(1, 1, FIXTURE_TOKENS, FIXTURE_CONTEXT, values, true).expect("valid fixture");
    (tensor, prefix_meta(FIXTURE_CONTEXT, FIXTURE_VISUAL))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib::{calibrate, connectivity, BiasAxis};
    use crate::report::AnchorStats;

    #[test]
    fn random_attention_rows_are_stochastic() {
        let t = random_attention(2, 3, 5, 7, 1.0, 1);
        for l in 0..2 {
            for h in 0..3 {
                for r in 0..5 {
                    let s: f64 = t.row(l, h, r).iter().map(|&v| v as f64).sum();
                    assert!((s - 1.0).abs() < 1e-6);
                }
            }
        }
        assert_eq!(t, random_attention(2, 3, 5, 7, 1.0, 1));
    }

    #[test]
    fn fixture_reproduces_anchor_statistics() {
        let (tensor, meta) = anchor_fixture(FIXTURE_SEED);
        let cal = calibrate(&tensor, 1, &BiasParams::default(), BiasAxis::Gen).unwrap();
        let c = connectivity(&cal, &meta.visual_index_set()).unwrap();
        let target = fixture_connectivity(FIXTURE_SEED);
        for (a, b) in c.0.iter().zip(&target) {
            assert!((a - b).abs() < 1e-6 * b.max(1e-3));
        }
        let stats = AnchorStats::compute(&c.0, 0.15);
        assert_eq!(stats.above, FIXTURE_ANCHORS);
        assert!((stats.threshold - 0.0368).abs() < 5e-5, "{}", stats.threshold);
    }
}
