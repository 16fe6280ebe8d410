//! Toy decoder-only transformer whose attention reads only through
//! [`KVCache`].
//!
//! Block structure is pre-LN: `LN → attention → residual → LN → MLP →
//! residual`, followed by a tied unembedding. Token positions are encoded
//! with fixed sinusoids added to the token embedding.

mod weights_file;

use serde::{Deserialize, Serialize};

pub use weights_file::{read_weights, write_weights, WEIGHTS_MAGIC, WEIGHTS_VERSION};

use crate::cache::KVCache;
use crate::error::{invalid_arg, invalid_state, Error, Result};
use crate::linalg::{self, argmax, axpy, dot, layer_norm, softmax_unchecked, Matrix, SeededRng};

/// Token id (bytes for the default vocabulary).
pub type Token = u32;

/// Shape and seed of a toy model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// Desk-scale default: 4 layers, 4 heads, width 64, byte vocabulary.
    fn default() -> Self {
        Self { n_layers: 4, n_heads: 4, d_model: 64, vocab: 256, max_seq: 128, seed: 0 }
    }
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.vocab == 0 {
            return Err(invalid_arg!("model counts must all be >= 1: {self:?}"));
        }
        if self.max_seq == 0 {
            return Err(invalid_arg!("max_seq must be >= 1"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(invalid_arg!(
                "d_model {} not divisible by n_heads {}",
                self.d_model,
                self.n_heads
            ));
        }
        Ok(())
    }

    /// Short human label, e.g. `toy-L4H4D64`.
    pub fn label(&self) -> String {
        format!("toy-L{}H{}D{}", self.n_layers, self.n_heads, self.d_model)
    }
}

/// Parameters of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
}

/// Full model parameters. The embedding doubles as the unembedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub config: ModelConfig,
    pub embedding: Matrix,
    pub layers: Vec<LayerWeights>,
}

/// Deterministic Gaussian initialisation with std `1/sqrt(d_model)`.
///
/// Layer-norm gains start at one, all biases at zero.
pub fn init_weights(config: &ModelConfig) -> Result<Weights> {
    config.validate()?;
    let d = config.d_model;
    let std = 1.0 / (d as f64).sqrt();
    let mut rng = SeededRng::stream(config.seed, &[0x7765_6967_6874]);
    let embedding = Matrix::random_normal(config.vocab, d, std, &mut rng);
    let layers = (0..config.n_layers)
        .map(|_| LayerWeights {
            wq: Matrix::random_normal(d, d, std, &mut rng),
            wk: Matrix::random_normal(d, d, std, &mut rng),
            wv: Matrix::random_normal(d, d, std, &mut rng),
            wo: Matrix::random_normal(d, d, std, &mut rng),
            w1: Matrix::random_normal(config.d_ff(), d, std, &mut rng),
            b1: vec![0.0; config.d_ff()],
            w2: Matrix::random_normal(d, config.d_ff(), std, &mut rng),
            b2: vec![0.0; d],
            ln1_gain: vec![1.0; d],
            ln1_bias: vec![0.0; d],
            ln2_gain: vec![1.0; d],
            ln2_bias: vec![0.0; d],
        })
        .collect();
    Ok(Weights { config: config.clone(), embedding, layers })
}

// ── Building blocks ─────────────────────────────────────────────────────────

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044_715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044_715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044_715 * x * x)
}

/// Sinusoidal position code.
pub fn position_encoding(pos: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = pos as f64 * freq;
            if i % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}

/// Token embedding plus position code: the input to layer 0.
pub fn embed(weights: &Weights, token: Token, pos: usize) -> Result<Vec<f64>> {
    let t = token as usize;
    if t >= weights.config.vocab {
        return Err(invalid_arg!("token {token} outside vocabulary of {}", weights.config.vocab));
    }
    let mut x = weights.embedding.row(t).to_vec();
    axpy(&mut x, 1.0, &position_encoding(pos, weights.config.d_model));
    Ok(x)
}

/// Per-head `(key, value)` projections of a block input.
///
/// The forward pass and cache recomputation share this function so a
/// recomputed entry is bit-identical to the one originally appended.
pub fn project_kv(
    layer: &LayerWeights,
    n_heads: usize,
    block_input: &[f64],
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let a = layer_norm(block_input, &layer.ln1_gain, &layer.ln1_bias)?;
    Ok(project_kv_normed(layer, n_heads, &a))
}

fn project_kv_normed(layer: &LayerWeights, n_heads: usize, a: &[f64]) -> Vec<(Vec<f64>, Vec<f64>)> {
    let dh = layer.wk.rows() / n_heads;
    (0..n_heads)
        .map(|h| {
            let (r0, r1) = (h * dh, (h + 1) * dh);
            (layer.wk.matvec_rows(r0, r1, a), layer.wv.matvec_rows(r0, r1, a))
        })
        .collect()
}

/// Single-head attention of `query` over `keys`/`values`.
///
/// Returns `(context, weights)` with weights `softmax(qᵀk_j / sqrt(d))`.
pub fn attention_head(
    query: &[f64],
    keys: &[Vec<f64>],
    values: &[Vec<f64>],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if keys.is_empty() {
        return Err(invalid_state!("attention over an empty cache"));
    }
    if keys.len() != values.len() {
        return Err(invalid_arg!("{} keys but {} values", keys.len(), values.len()));
    }
    let scale = 1.0 / (query.len() as f64).sqrt();
    let scores: Vec<f64> = keys.iter().map(|k| dot(query, k) * scale).collect();
    let w = linalg::softmax(&scores)?;
    let mut ctx = vec![0.0; values[0].len()];
    for (wj, v) in w.iter().zip(values) {
        axpy(&mut ctx, *wj, v);
    }
    Ok((ctx, w))
}

// ── Forward pass ────────────────────────────────────────────────────────────

/// Intervention point on attention weights (used by smoothing defenses).
pub trait AttentionHook {
    fn adjust(&mut self, layer: usize, head: usize, weights: &mut Vec<f64>);
}

/// Hook that leaves attention untouched.
pub struct NoHook;

impl AttentionHook for NoHook {
    fn adjust(&mut self, _: usize, _: usize, _: &mut Vec<f64>) {}
}

/// A tentative key perturbation read through a cache without mutating it.
#[derive(Debug, Clone, Copy)]
pub struct KeyOverride<'a> {
    pub layer: usize,
    pub heads: &'a [usize],
    pub pos: usize,
    pub delta: &'a [f64],
}

/// Everything observed during one decode step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub logits: Vec<f64>,
    /// `[layer]` block inputs (residual stream entering the layer).
    pub block_inputs: Vec<Vec<f64>>,
    /// `[layer]` residual stream after the attention sub-block.
    pub resid_mid: Vec<Vec<f64>>,
    /// `[layer][head]`
    pub queries: Vec<Vec<Vec<f64>>>,
    /// `[layer][head]` pre-softmax scores over positions `0..=t`.
    pub scores: Vec<Vec<Vec<f64>>>,
    /// `[layer][head]` attention weights actually applied.
    pub attention: Vec<Vec<Vec<f64>>>,
    /// `[layer][head]` attention outputs.
    pub contexts: Vec<Vec<Vec<f64>>>,
    /// `[layer][head]` new `(key, value)` for this token.
    pub new_kv: Vec<Vec<(Vec<f64>, Vec<f64>)>>,
}

/// Computes a step without touching `cache`: attention reads the cached
/// entries (with an optional key override) plus this token's own entry.
pub fn forward_peek(
    weights: &Weights,
    cache: &KVCache,
    token: Token,
    key_override: Option<KeyOverride<'_>>,
    hook: &mut dyn AttentionHook,
) -> Result<StepOutput> {
    let cfg = &weights.config;
    let pos = cache.len();
    if pos >= cfg.max_seq {
        return Err(invalid_state!("cache length {pos} reached max_seq {}", cfg.max_seq));
    }
    if cache.n_layers() != cfg.n_layers || cache.n_heads() != cfg.n_heads || cache.d_head() != cfg.d_head() {
        return Err(invalid_arg!("cache shape does not match model config"));
    }
    if let Some(ov) = &key_override {
        if ov.pos >= pos || ov.layer >= cfg.n_layers || ov.delta.len() != cfg.d_head() {
            return Err(invalid_arg!("key override out of range"));
        }
    }

    let n_heads = cfg.n_heads;
    let dh = cfg.d_head();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut x = embed(weights, token, pos)?;

    let mut out = StepOutput {
        logits: Vec::new(),
        block_inputs: Vec::with_capacity(cfg.n_layers),
        resid_mid: Vec::with_capacity(cfg.n_layers),
        queries: Vec::with_capacity(cfg.n_layers),
        scores: Vec::with_capacity(cfg.n_layers),
        attention: Vec::with_capacity(cfg.n_layers),
        contexts: Vec::with_capacity(cfg.n_layers),
        new_kv: Vec::with_capacity(cfg.n_layers),
    };

    for (l, lw) in weights.layers.iter().enumerate() {
        out.block_inputs.push(x.clone());
        let a = layer_norm(&x, &lw.ln1_gain, &lw.ln1_bias)?;
        let kv = project_kv_normed(lw, n_heads, &a);

        let mut concat = Vec::with_capacity(cfg.d_model);
        let mut q_l = Vec::with_capacity(n_heads);
        let mut s_l = Vec::with_capacity(n_heads);
        let mut w_l = Vec::with_capacity(n_heads);
        let mut c_l = Vec::with_capacity(n_heads);
        for (h, (k_new, v_new)) in kv.iter().enumerate() {
            let q = lw.wq.matvec_rows(h * dh, (h + 1) * dh, &a);
            let keys = cache.keys(l, h);
            let values = cache.values(l, h);
            let ov = key_override.filter(|o| o.layer == l && o.heads.contains(&h));

            let mut scores = Vec::with_capacity(pos + 1);
            for (j, k) in keys.iter().enumerate() {
                let s = match ov {
                    Some(o) if o.pos == j => {
                        let tilde: Vec<f64> = k.iter().zip(o.delta).map(|(a, b)| a + b).collect();
                        dot(&q, &tilde) * scale
                    }
                    _ => dot(&q, k) * scale,
                };
                scores.push(s);
            }
            scores.push(dot(&q, k_new) * scale);
            if !linalg::all_finite(&scores) {
                return Err(Error::NonFinite(format!("attention scores at layer {l} head {h}")));
            }
            let mut w = softmax_unchecked(&scores);
            hook.adjust(l, h, &mut w);

            let mut ctx = vec![0.0; dh];
            for (wj, v) in w.iter().zip(values.iter().chain(std::iter::once(v_new))) {
                axpy(&mut ctx, *wj, v);
            }
            concat.extend_from_slice(&ctx);
            q_l.push(q);
            s_l.push(scores);
            w_l.push(w);
            c_l.push(ctx);
        }
        let attn_out = lw.wo.matvec(&concat);
        axpy(&mut x, 1.0, &attn_out);
        out.resid_mid.push(x.clone());

        let m = layer_norm(&x, &lw.ln2_gain, &lw.ln2_bias)?;
        let mut hidden = lw.w1.matvec(&m);
        for (hv, b) in hidden.iter_mut().zip(&lw.b1) {
            *hv = gelu(*hv + b);
        }
        let mlp = lw.w2.matvec(&hidden);
        for ((xi, mi), bi) in x.iter_mut().zip(&mlp).zip(&lw.b2) {
            *xi += mi + bi;
        }

        out.queries.push(q_l);
        out.scores.push(s_l);
        out.attention.push(w_l);
        out.contexts.push(c_l);
        out.new_kv.push(kv);
    }

    out.logits = weights.embedding.matvec(&x);
    if !linalg::all_finite(&out.logits) {
        return Err(Error::NonFinite("logits".into()));
    }
    Ok(out)
}

/// One autoregressive step: attends over the cache plus the new entry, then
/// appends the new `(key, value)` at every layer/head and records the clean
/// block inputs.
pub fn forward_step(weights: &Weights, cache: &mut KVCache, token: Token) -> Result<StepOutput> {
    forward_step_with(weights, cache, token, &mut NoHook)
}

pub fn forward_step_with(
    weights: &Weights,
    cache: &mut KVCache,
    token: Token,
    hook: &mut dyn AttentionHook,
) -> Result<StepOutput> {
    let out = forward_peek(weights, cache, token, None, hook)?;
    for (l, kv) in out.new_kv.iter().enumerate() {
        for (h, (k, v)) in kv.iter().enumerate() {
            cache.append(l, h, k.clone(), v.clone())?;
        }
    }
    cache.push_record(token, out.block_inputs.clone())?;
    Ok(out)
}

// ── Decoding ────────────────────────────────────────────────────────────────

/// Token selection rule for free-running decoding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[derive(Default)]
pub enum DecodeMode {
    /// Argmax, ties to the lowest token id.
    #[default]
    Greedy,
    /// Categorical sampling from softmax(logits); draw `t` uses stream `[t]`.
    Sampled { seed: u64 },
}


impl DecodeMode {
    pub fn choose(&self, logits: &[f64], t: usize) -> Token {
        match *self {
            Self::Greedy => argmax(logits) as Token,
            Self::Sampled { seed } => {
                let probs = softmax_unchecked(logits);
                let mut rng = SeededRng::stream(seed, &[t as u64]);
                let u = rng.uniform();
                let mut acc = 0.0;
                for (i, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return i as Token;
                    }
                }
                (probs.len() - 1) as Token
            }
        }
    }
}

/// Autoregressive continuation of `prompt` by `steps` tokens.
///
/// Returns the full sequence and one logit vector per forward step; the
/// logits of step `t` predict token `t` (0-based) of the returned sequence.
pub fn decode(
    weights: &Weights,
    prompt: &[Token],
    steps: usize,
    mode: DecodeMode,
) -> Result<(Vec<Token>, Vec<Vec<f64>>)> {
    if prompt.is_empty() {
        return Err(invalid_arg!("prompt must be non-empty"));
    }
    let total = prompt.len() + steps;
    let mut cache = KVCache::for_model(&weights.config);
    let mut seq = prompt.to_vec();
    let mut logits = Vec::with_capacity(total.saturating_sub(1));
    for t in 1..total {
        let out = forward_step(weights, &mut cache, seq[t - 1])?;
        if t >= prompt.len() {
            seq.push(mode.choose(&out.logits, t));
        }
        logits.push(out.logits);
    }
    Ok((seq, logits))
}

/// Converts a byte string to tokens.
pub fn tokens_from_bytes(bytes: &[u8]) -> Vec<Token> {
    bytes.iter().map(|b| Token::from(*b)).collect()
}

// ── Gradients (last layer) ──────────────────────────────────────────────────

/// Gradient of a logit-space loss with respect to a key perturbation at the
/// final layer.
///
/// `logit_grad` is `∂loss/∂logits` at the perturbed point; `out` must come
/// from the same perturbed evaluation. Positions are cache positions; the
/// returned vector sums over `heads` (broadcast perturbation).
pub fn last_layer_key_gradient(
    weights: &Weights,
    cache: &KVCache,
    out: &StepOutput,
    heads: &[usize],
    pos: usize,
    logit_grad: &[f64],
) -> Result<Vec<f64>> {
    let cfg = &weights.config;
    let layer = cfg.n_layers - 1;
    let lw = &weights.layers[layer];
    let dh = cfg.d_head();

    // d loss / d final residual (tied unembedding)
    let g_final = weights.embedding.matvec_t(logit_grad);

    // back through the MLP residual branch
    let x_mid = &out.resid_mid[layer];
    let (m, ln_cache) = layer_norm_with_cache(x_mid, &lw.ln2_gain, &lw.ln2_bias);
    let pre: Vec<f64> = lw.w1.matvec(&m).iter().zip(&lw.b1).map(|(a, b)| a + b).collect();
    let g_hidden = lw.w2.matvec_t(&g_final);
    let g_pre: Vec<f64> = g_hidden.iter().zip(&pre).map(|(g, u)| g * gelu_grad(*u)).collect();
    let g_m = lw.w1.matvec_t(&g_pre);
    let g_ln = layer_norm_backward(&g_m, &lw.ln2_gain, &ln_cache);
    let g_mid: Vec<f64> = g_final.iter().zip(&g_ln).map(|(a, b)| a + b).collect();

    // attention output projection
    let g_concat = lw.wo.matvec_t(&g_mid);

    let scale = 1.0 / (dh as f64).sqrt();
    let mut grad = vec![0.0; dh];
    for &h in heads {
        let g_ctx = &g_concat[h * dh..(h + 1) * dh];
        let alpha = &out.attention[layer][h];
        let ctx = &out.contexts[layer][h];
        let v_j = &cache.values(layer, h)[pos];
        let g_score: f64 = alpha[pos]
            * v_j.iter().zip(ctx).zip(g_ctx).map(|((v, c), g)| (v - c) * g).sum::<f64>();
        axpy(&mut grad, g_score * scale, &out.queries[layer][h]);
    }
    Ok(grad)
}

struct LnCache {
    xhat: Vec<f64>,
    inv_std: f64,
}

fn layer_norm_with_cache(x: &[f64], gain: &[f64], bias: &[f64]) -> (Vec<f64>, LnCache) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + linalg::LN_EPS).sqrt();
    let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
    let y = xhat.iter().zip(gain.iter().zip(bias)).map(|(xh, (g, b))| g * xh + b).collect();
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward(gy: &[f64], gain: &[f64], c: &LnCache) -> Vec<f64> {
    let n = gy.len() as f64;
    let gxhat: Vec<f64> = gy.iter().zip(gain).map(|(g, w)| g * w).collect();
    let mean_g = gxhat.iter().sum::<f64>() / n;
    let mean_gx = gxhat.iter().zip(&c.xhat).map(|(g, x)| g * x).sum::<f64>() / n;
    gxhat
        .iter()
        .zip(&c.xhat)
        .map(|(g, x)| c.inv_std * (g - mean_g - x * mean_gx))
        .collect()
}
