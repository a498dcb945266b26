//! Single-block multi-head attention policy with a hand-written backward
//! pass.
//!
//! The context is the visual slots, one question marker and the tokens
//! generated so far. Token `t` is predicted from the query at the position
//! of the previous token; its attention row over the context is what the
//! credit pipeline consumes.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    /// Embedding width.
    pub d: usize,
    pub heads: usize,
    /// Alphabet size M of the slot symbols.
    pub symbols: usize,
    /// Number F of filler tokens.
    pub fillers: usize,
    /// Number V of visual slots.
    pub slots: usize,
    /// Tokens in the answer segment.
    pub answer_len: usize,
    /// Tokens in the filler segment.
    pub filler_len: usize,
    /// Filler positions may also emit symbols.
    pub filler_emits_symbols: bool,
    pub embed_std: f64,
    pub head_std: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            d: 16,
            heads: 1,
            symbols: 10,
            fillers: 6,
            slots: 8,
            answer_len: 10,
            filler_len: 19,
            filler_emits_symbols: false,
            embed_std: 0.5,
            head_std: 0.01,
        }
    }
}

impl PolicyConfig {
    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// Output vocabulary: symbols, fillers, terminal.
    pub fn vocab_out(&self) -> usize {
        self.symbols + self.fillers + 1
    }

    /// Input vocabulary adds the question marker.
    pub fn vocab_in(&self) -> usize {
        self.vocab_out() + 1
    }

    pub fn terminal(&self) -> usize {
        self.symbols + self.fillers
    }

    pub fn question(&self) -> usize {
        self.symbols + self.fillers + 1
    }

    pub fn is_filler(&self, tok: usize) -> bool {
        (self.symbols..self.symbols + self.fillers).contains(&tok)
    }

    /// Generated tokens per trajectory, terminal included.
    pub fn gen_len(&self) -> usize {
        self.answer_len + self.filler_len + 1
    }

    /// Prompt length: slots plus the question marker.
    pub fn prompt_len(&self) -> usize {
        self.slots + 1
    }

    /// Context width of a recorded attention row.
    pub fn ctx_len(&self) -> usize {
        self.prompt_len() + self.gen_len() - 1
    }

    /// Tokens that may be emitted at generated position `t`.
    pub fn allowed(&self, t: usize) -> Range<usize> {
        if t < self.answer_len {
            0..self.symbols
        } else if t < self.answer_len + self.filler_len {
            if self.filler_emits_symbols {
                0..self.symbols + self.fillers
            } else {
                self.symbols..self.symbols + self.fillers
            }
        } else {
            self.terminal()..self.terminal() + 1
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(format!("d={} must be a positive multiple of heads={}", self.d, self.heads));
        }
        if self.symbols == 0 || self.slots == 0 || self.fillers == 0 {
            return Err("symbols, slots and fillers must be positive".into());
        }
        if self.answer_len == 0 {
            return Err("answer_len must be positive".into());
        }
        Ok(())
    }
}

/// Offsets of each parameter block inside the flat vector.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Layout {
    emb: usize,
    pos: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    u: usize,
    bu: usize,
    len: usize,
}

impl Layout {
    fn new(cfg: &PolicyConfig) -> Self {
        let d = cfg.d;
        let emb = 0;
        let pos = emb + cfg.vocab_in() * d;
        let wq = pos + cfg.ctx_len() * d;
        let wk = wq + d * d;
        let wv = wk + d * d;
        let wo = wv + d * d;
        let u = wo + d * d;
        let bu = u + cfg.vocab_out() * d;
        let len = bu + cfg.vocab_out();
        Self {
            emb,
            pos,
            wq,
            wk,
            wv,
            wo,
            u,
            bu,
            len,
        }
    }
}

/// Policy parameters in one flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicy {
    pub cfg: PolicyConfig,
    layout: Layout,
    pub params: Vec<f64>,
}

/// `out = M x` for row-major `M` of shape `rows x x.len()`.
fn matvec(m: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        *o = m[r * cols..(r + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

/// `out += M^T y`.
fn matvec_t_acc(m: &[f64], y: &[f64], out: &mut [f64]) {
    let cols = out.len();
    for (r, &yr) in y.iter().enumerate() {
        if yr == 0.0 {
            continue;
        }
        for (o, a) in out.iter_mut().zip(&m[r * cols..(r + 1) * cols]) {
            *o += a * yr;
        }
    }
}

/// `G += y x^T`.
fn outer_acc(g: &mut [f64], y: &[f64], x: &[f64]) {
    let cols = x.len();
    for (r, &yr) in y.iter().enumerate() {
        if yr == 0.0 {
            continue;
        }
        for (gv, xv) in g[r * cols..(r + 1) * cols].iter_mut().zip(x) {
            *gv += yr * xv;
        }
    }
}

/// Keys, values and inputs of every context position seen so far.
#[derive(Debug, Clone, Default)]
pub struct KvCache {
    pub tokens: Vec<usize>,
    x: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Forward quantities of one query, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct QueryOut {
    /// Attention per head over positions `0..=p`, head-major.
    pub attn: Vec<f64>,
    pub q: Vec<f64>,
    pub o: Vec<f64>,
    pub z: Vec<f64>,
    pub allowed: Range<usize>,
    /// Log-probabilities over `allowed`.
    pub log_probs: Vec<f64>,
}

impl QueryOut {
    pub fn log_prob(&self, tok: usize) -> f64 {
        self.log_probs[tok - self.allowed.start]
    }

    /// Attention row of head `h` for a policy with `heads` heads.
    pub fn head_row(&self, h: usize, heads: usize) -> &[f64] {
        let n = self.attn.len() / heads;
        &self.attn[h * n..(h + 1) * n]
    }
}

impl ToyPolicy {
    /// Fresh parameters: embeddings and projections from scaled normals,
    /// output head near zero so the initial policy is close to uniform.
    pub fn new(cfg: PolicyConfig, seed: u64) -> Self {
        cfg.validate().expect("valid policy config");
        let layout = Layout::new(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; layout.len];
        let d = cfg.d as f64;
        let blocks = [
            (layout.emb, layout.wq, cfg.embed_std),
            (layout.wq, layout.u, 1.0 / d.sqrt()),
            (layout.u, layout.bu, cfg.head_std),
        ];
        for (start, end, std) in blocks {
            if std > 0.0 {
                let normal = Normal::new(0.0, std).expect("finite std");
                for p in &mut params[start..end] {
                    *p = normal.sample(&mut rng);
                }
            }
        }
        Self { cfg, layout, params }
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Names the parameter block holding flat index `i`.
    pub fn block_of(&self, i: usize) -> &'static str {
        let l = &self.layout;
        match i {
            _ if i < l.pos => "emb",
            _ if i < l.wq => "pos",
            _ if i < l.wk => "wq",
            _ if i < l.wv => "wk",
            _ if i < l.wo => "wv",
            _ if i < l.u => "wo",
            _ if i < l.bu => "u",
            _ => "bu",
        }
    }

    fn block(&self, start: usize, len: usize) -> &[f64] {
        &self.params[start..start + len]
    }

    /// Appends token `tok` at the next context position.
    pub fn push(&self, cache: &mut KvCache, tok: usize) {
        let d = self.cfg.d;
        let l = &self.layout;
        let p = cache.len();
        let emb = self.block(l.emb + tok * d, d);
        let pos = self.block(l.pos + p * d, d);
        let x: Vec<f64> = emb.iter().zip(pos).map(|(a, b)| a + b).collect();
        let mut k = vec![0.0; d];
        let mut v = vec![0.0; d];
        matvec(self.block(l.wk, d * d), &x, &mut k);
        matvec(self.block(l.wv, d * d), &x, &mut v);
        cache.tokens.push(tok);
        cache.x.extend_from_slice(&x);
        cache.k.extend_from_slice(&k);
        cache.v.extend_from_slice(&v);
    }

    /// Context cache holding the prompt for `slots`.
    pub fn prompt(&self, slots: &[usize]) -> KvCache {
        let mut cache = KvCache::default();
        for &s in slots {
            self.push(&mut cache, s);
        }
        self.push(&mut cache, self.cfg.question());
        cache
    }

    /// Distribution over `allowed` for the query at the last cached position.
    pub fn query(&self, cache: &KvCache, allowed: Range<usize>) -> QueryOut {
        let d = self.cfg.d;
        let heads = self.cfg.heads;
        let dh = self.cfg.head_dim();
        let l = &self.layout;
        let n = cache.len();
        let p = n - 1;
        let xp = &cache.x[p * d..(p + 1) * d];
        let mut q = vec![0.0; d];
        matvec(self.block(l.wq, d * d), xp, &mut q);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut attn = vec![0.0; heads * n];
        let mut o = vec![0.0; d];
        for h in 0..heads {
            let qh = &q[h * dh..(h + 1) * dh];
            let row = &mut attn[h * n..(h + 1) * n];
            for (j, s) in row.iter_mut().enumerate() {
                let kj = &cache.k[j * d + h * dh..j * d + (h + 1) * dh];
                *s = qh.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for s in row.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            for s in row.iter_mut() {
                *s /= sum;
            }
            let oh = &mut o[h * dh..(h + 1) * dh];
            for (j, &a) in row.iter().enumerate() {
                let vj = &cache.v[j * d + h * dh..j * d + (h + 1) * dh];
                for (ov, vv) in oh.iter_mut().zip(vj) {
                    *ov += a * vv;
                }
            }
        }
        let mut z = vec![0.0; d];
        matvec(self.block(l.wo, d * d), &o, &mut z);
        for (zv, xv) in z.iter_mut().zip(xp) {
            *zv += xv;
        }
        let u = self.block(l.u, self.cfg.vocab_out() * d);
        let bu = self.block(l.bu, self.cfg.vocab_out());
        let logits: Vec<f64> = allowed
            .clone()
            .map(|c| u[c * d..(c + 1) * d].iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() + bu[c])
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let log_probs = logits.iter().map(|x| x - lse).collect();
        QueryOut {
            attn,
            q,
            o,
            z,
            allowed,
            log_probs,
        }
    }

    /// Teacher-forced forward over a full trajectory.
    pub fn forward(&self, slots: &[usize], tokens: &[usize]) -> TrajectoryForward {
        let mut cache = self.prompt(slots);
        let mut queries = Vec::with_capacity(tokens.len());
        for (t, &tok) in tokens.iter().enumerate() {
            let out = self.query(&cache, self.cfg.allowed(t));
            queries.push(out);
            if t + 1 < tokens.len() {
                self.push(&mut cache, tok);
            }
        }
        TrajectoryForward { cache, queries }
    }

    /// Accumulates into `grad` the parameter gradient of a scalar whose
    /// derivative with respect to the logits of query `t` (over its allowed
    /// range) is `dlogits[t]`.
    pub fn backward(&self, fwd: &TrajectoryForward, dlogits: &[Vec<f64>], grad: &mut [f64]) {
        let d = self.cfg.d;
        let heads = self.cfg.heads;
        let dh = self.cfg.head_dim();
        let l = self.layout;
        let cache = &fwd.cache;
        let n_ctx = cache.len();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dx = vec![0.0; n_ctx * d];
        let mut dk = vec![0.0; n_ctx * d];
        let mut dv = vec![0.0; n_ctx * d];
        let vout = self.cfg.vocab_out();

        for (qo, g) in fwd.queries.iter().zip(dlogits) {
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            let n = qo.attn.len() / heads;
            let p = n - 1;
            let mut dz = vec![0.0; d];
            {
                let u = &self.params[l.u..l.u + vout * d];
                for (i, c) in qo.allowed.clone().enumerate() {
                    let gc = g[i];
                    if gc == 0.0 {
                        continue;
                    }
                    grad[l.bu + c] += gc;
                    for k in 0..d {
                        grad[l.u + c * d + k] += gc * qo.z[k];
                        dz[k] += gc * u[c * d + k];
                    }
                }
            }
            for k in 0..d {
                dx[p * d + k] += dz[k];
            }
            outer_acc(&mut grad[l.wo..l.wo + d * d], &dz, &qo.o);
            let mut d_o = vec![0.0; d];
            matvec_t_acc(&self.params[l.wo..l.wo + d * d], &dz, &mut d_o);

            let mut dq = vec![0.0; d];
            for h in 0..heads {
                let a = &qo.attn[h * n..(h + 1) * n];
                let doh = &d_o[h * dh..(h + 1) * dh];
                let mut da = vec![0.0; n];
                for j in 0..n {
                    let vj = &cache.v[j * d + h * dh..j * d + (h + 1) * dh];
                    da[j] = doh.iter().zip(vj).map(|(x, y)| x * y).sum();
                    for k in 0..dh {
                        dv[j * d + h * dh + k] += a[j] * doh[k];
                    }
                }
                let mean: f64 = a.iter().zip(&da).map(|(x, y)| x * y).sum();
                let qh = &qo.q[h * dh..(h + 1) * dh];
                for j in 0..n {
                    let ds = a[j] * (da[j] - mean) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for k in 0..dh {
                        dq[h * dh + k] += ds * cache.k[j * d + h * dh + k];
                        dk[j * d + h * dh + k] += ds * qh[k];
                    }
                }
            }
            let xp = &cache.x[p * d..(p + 1) * d];
            outer_acc(&mut grad[l.wq..l.wq + d * d], &dq, xp);
            matvec_t_acc(&self.params[l.wq..l.wq + d * d], &dq, &mut dx[p * d..(p + 1) * d]);
        }

        for j in 0..n_ctx {
            let xj = &cache.x[j * d..(j + 1) * d];
            let dkj = &dk[j * d..(j + 1) * d];
            let dvj = &dv[j * d..(j + 1) * d];
            outer_acc(&mut grad[l.wk..l.wk + d * d], dkj, xj);
            outer_acc(&mut grad[l.wv..l.wv + d * d], dvj, xj);
            let dxj = &mut dx[j * d..(j + 1) * d];
            matvec_t_acc(&self.params[l.wk..l.wk + d * d], dkj, dxj);
            matvec_t_acc(&self.params[l.wv..l.wv + d * d], dvj, dxj);
            let tok = cache.tokens[j];
            for k in 0..d {
                grad[l.emb + tok * d + k] += dxj[k];
                grad[l.pos + j * d + k] += dxj[k];
            }
        }
    }
}

/// Per-query forward state of one trajectory.
#[derive(Debug, Clone)]
pub struct TrajectoryForward {
    pub cache: KvCache,
    pub queries: Vec<QueryOut>,
}

impl TrajectoryForward {
    pub fn log_probs(&self, tokens: &[usize]) -> Vec<f64> {
        self.queries.iter().zip(tokens).map(|(q, &t)| q.log_prob(t)).collect()
    }
}

/// Exact `KL(p || r)` for log-probability vectors over the same support.
pub fn categorical_kl(log_p: &[f64], log_r: &[f64]) -> f64 {
    log_p.iter().zip(log_r).map(|(lp, lr)| lp.exp() * (lp - lr)).sum()
}

/// Gradient with respect to the logits of `log_prob(tok) * g_lp + KL * g_kl`
/// where the KL is against `log_r`.
pub fn logit_grad(q: &QueryOut, tok: usize, g_lp: f64, log_r: Option<&[f64]>, g_kl: f64) -> Vec<f64> {
    let a = tok - q.allowed.start;
    let probs: Vec<f64> = q.log_probs.iter().map(|x| x.exp()).collect();
    let mut g: Vec<f64> = probs.iter().enumerate().map(|(c, &p)| g_lp * ((c == a) as u8 as f64 - p)).collect();
    if let (Some(lr), true) = (log_r, g_kl != 0.0) {
        let kl = categorical_kl(&q.log_probs, lr);
        for c in 0..g.len() {
            g[c] += g_kl * probs[c] * (q.log_probs[c] - lr[c] - kl);
        }
    }
    g
}
