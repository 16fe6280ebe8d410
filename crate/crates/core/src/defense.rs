//! Lightweight cache-level mitigations and their overhead accounting.
//!
//! * Cache reset: every `N` steps the target layers' keys and values are
//!   discarded and recomputed from the clean block inputs.
//! * Dropout-mask randomization: before each step every `(key, value)` pair
//!   of a target layer is zeroed independently with probability `p`; the mask
//!   only affects that step's read and is lifted afterwards.
//! * Attention smoothing: target-layer attention weights are replaced by an
//!   exponential moving average over decode steps.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::attack::AttackConfig;
use crate::cache::KVCache;
use crate::error::{invalid_arg, Error, Result};
use crate::linalg::SeededRng;
use crate::metrics::{self, RunSummary, StepMetrics};
use crate::model::{AttentionHook, DecodeMode, Token, Weights};
use crate::pipeline::{execute, Feed, RunOptions};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DefenseMethod {
    None,
    CacheReset { period: usize },
    DropoutMask { p: f64, seed: u64 },
    AttentionSmoothing { beta: f64 },
}

impl DefenseMethod {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DefenseMethod::CacheReset { period: 0 } => Err(invalid_arg!("cache reset period must be >= 1")),
            DefenseMethod::DropoutMask { p, .. } if !(0.0..=1.0).contains(&p) => {
                Err(invalid_arg!("dropout probability must lie in [0, 1]"))
            }
            DefenseMethod::AttentionSmoothing { beta } if !(beta > 0.0 && beta <= 1.0) => {
                Err(invalid_arg!("smoothing beta must lie in (0, 1]"))
            }
            _ => Ok(()),
        }
    }

    /// Display name used in reports.
    pub fn label(&self) -> &'static str {
        match self {
            DefenseMethod::None => "None (Baseline)",
            DefenseMethod::CacheReset { .. } => "Cache Reset",
            DefenseMethod::DropoutMask { .. } => "Dropout Mask Rand.",
            DefenseMethod::AttentionSmoothing { .. } => "Attention Smoothing",
        }
    }
}

impl fmt::Display for DefenseMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DefenseMethod::None => write!(f, "none"),
            DefenseMethod::CacheReset { period } => write!(f, "cache_reset:{period}"),
            DefenseMethod::DropoutMask { p, seed } => write!(f, "dropout:{p}:{seed}"),
            DefenseMethod::AttentionSmoothing { beta } => write!(f, "smoothing:{beta}"),
        }
    }
}

impl FromStr for DefenseMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').map(str::trim).collect();
        let num = |i: usize| -> Result<f64> {
            parts.get(i).and_then(|x| x.parse().ok()).ok_or_else(|| invalid_arg!("bad defense `{s}`"))
        };
        let m = match parts[0] {
            "none" if parts.len() == 1 => DefenseMethod::None,
            "cache_reset" if parts.len() == 2 => DefenseMethod::CacheReset {
                period: parts[1].parse().map_err(|_| invalid_arg!("bad reset period in `{s}`"))?,
            },
            "dropout" if parts.len() == 2 => DefenseMethod::DropoutMask { p: num(1)?, seed: 0 },
            "dropout" if parts.len() == 3 => DefenseMethod::DropoutMask {
                p: num(1)?,
                seed: parts[2].parse().map_err(|_| invalid_arg!("bad seed in `{s}`"))?,
            },
            "smoothing" if parts.len() == 2 => DefenseMethod::AttentionSmoothing { beta: num(1)? },
            _ => return Err(invalid_arg!("unknown defense `{s}`")),
        };
        m.validate()?;
        Ok(m)
    }
}

impl Serialize for DefenseMethod {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DefenseMethod {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// A defense and the layers it guards (empty = every layer).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefenseConfig {
    pub method: DefenseMethod,
    pub target_layers: Vec<usize>,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self { method: DefenseMethod::None, target_layers: Vec::new() }
    }
}

impl DefenseConfig {
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        self.method.validate()?;
        if let Some(l) = self.target_layers.iter().find(|l| **l >= n_layers) {
            return Err(invalid_arg!("defense layer {l} outside model with {n_layers} layers"));
        }
        Ok(())
    }

    pub fn layers(&self, n_layers: usize) -> Vec<usize> {
        if self.target_layers.is_empty() {
            (0..n_layers).collect()
        } else {
            let mut l = self.target_layers.clone();
            l.sort_unstable();
            l.dedup();
            l
        }
    }
}

// ── Passes ──────────────────────────────────────────────────────────────────

/// Recomputes `layer` from clean inputs when `t mod period == 0`.
/// Returns whether the reset fired.
pub fn apply_cache_reset(
    cache: &mut KVCache,
    weights: &Weights,
    layer: usize,
    t: usize,
    period: usize,
) -> Result<bool> {
    if period == 0 {
        return Err(invalid_arg!("cache reset period must be >= 1"));
    }
    if !t.is_multiple_of(period) {
        return Ok(false);
    }
    cache.recompute_layer(weights, layer)?;
    Ok(true)
}

/// One masked `(key, value)` pair with its original contents.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedEntry {
    pub head: usize,
    pub pos: usize,
    key: Vec<f64>,
    value: Vec<f64>,
}

/// Which entries a dropout pass zeroed, enough to undo it.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskRecord {
    pub step: usize,
    pub layer: usize,
    pub masked: Vec<MaskedEntry>,
}

impl MaskRecord {
    /// `(head, pos)` of every zeroed entry.
    pub fn positions(&self) -> Vec<(usize, usize)> {
        self.masked.iter().map(|m| (m.head, m.pos)).collect()
    }

    /// Puts the original entries back.
    pub fn undo(&self, cache: &mut KVCache) {
        for m in &self.masked {
            cache.set_entry(self.layer, m.head, m.pos, m.key.clone(), m.value.clone());
        }
    }
}

/// Zeroes each `(key, value)` pair of `layer` with probability `p`
/// (no rescaling).
pub fn apply_dropout_mask(cache: &mut KVCache, layer: usize, p: f64, rng: &mut SeededRng) -> Result<MaskRecord> {
    if layer >= cache.n_layers() {
        return Err(invalid_arg!("layer {layer} out of range"));
    }
    let d = cache.d_head();
    let mut record = MaskRecord { step: cache.len() + 1, layer, masked: Vec::new() };
    for head in 0..cache.n_heads() {
        for pos in 0..cache.len() {
            if rng.coin(p) {
                let key = cache.keys(layer, head)[pos].clone();
                let value = cache.values(layer, head)[pos].clone();
                cache.set_entry(layer, head, pos, vec![0.0; d], vec![0.0; d]);
                record.masked.push(MaskedEntry { head, pos, key, value });
            }
        }
    }
    Ok(record)
}

/// `ᾱ_t = (1−β)·ᾱ_{t−1} + β·α_t`, renormalised; `ema_state` is updated in
/// place. A shorter history is zero-padded on the right (positions keep
/// their identity, new positions enter with their current weight).
pub fn apply_attention_smoothing(current: &[f64], ema_state: &mut Vec<f64>, beta: f64) -> Vec<f64> {
    if beta >= 1.0 || ema_state.is_empty() {
        let out = current.to_vec();
        *ema_state = out.clone();
        return out;
    }
    let mut out: Vec<f64> = current
        .iter()
        .enumerate()
        .map(|(i, a)| (1.0 - beta) * ema_state.get(i).copied().unwrap_or(0.0) + beta * a)
        .collect();
    let sum: f64 = out.iter().sum();
    if sum > 0.0 {
        out.iter_mut().for_each(|x| *x /= sum);
    } else {
        out = current.to_vec();
    }
    *ema_state = out.clone();
    out
}

struct SmoothingHook {
    beta: f64,
    layers: Vec<usize>,
    /// `[layer][head]`
    state: Vec<Vec<Vec<f64>>>,
}

impl AttentionHook for SmoothingHook {
    fn adjust(&mut self, layer: usize, head: usize, weights: &mut Vec<f64>) {
        if self.layers.contains(&layer) {
            *weights = apply_attention_smoothing(weights, &mut self.state[layer][head], self.beta);
        }
    }
}

/// Per-run defense state driven by the pipeline.
pub(crate) struct DefenseRuntime {
    method: DefenseMethod,
    layers: Vec<usize>,
    smoothing: Option<SmoothingHook>,
}

impl DefenseRuntime {
    pub(crate) fn new(config: &DefenseConfig, weights: &Weights) -> Result<Self> {
        let cfg = &weights.config;
        config.validate(cfg.n_layers)?;
        let layers = config.layers(cfg.n_layers);
        let smoothing = match config.method {
            DefenseMethod::AttentionSmoothing { beta } => Some(SmoothingHook {
                beta,
                layers: layers.clone(),
                state: vec![vec![Vec::new(); cfg.n_heads]; cfg.n_layers],
            }),
            _ => None,
        };
        Ok(Self { method: config.method, layers, smoothing })
    }

    /// Passes that run after injection and before the step's forward pass.
    pub(crate) fn pre_step(&mut self, weights: &Weights, cache: &mut KVCache, t: usize) -> Result<Vec<MaskRecord>> {
        let mut masks = Vec::new();
        match self.method {
            DefenseMethod::CacheReset { period } => {
                for &l in &self.layers {
                    apply_cache_reset(cache, weights, l, t, period)?;
                }
            }
            DefenseMethod::DropoutMask { p, seed } => {
                for &l in &self.layers {
                    let mut rng = SeededRng::stream(seed, &[0x6d61_736b, t as u64, l as u64]);
                    masks.push(apply_dropout_mask(cache, l, p, &mut rng)?);
                }
            }
            DefenseMethod::None | DefenseMethod::AttentionSmoothing { .. } => {}
        }
        Ok(masks)
    }

    pub(crate) fn hook(&mut self) -> Option<&mut dyn AttentionHook> {
        self.smoothing.as_mut().map(|h| h as &mut dyn AttentionHook)
    }
}

// ── Defended runs ───────────────────────────────────────────────────────────

/// Wall-clock measurements, kept apart from reproducible outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadTiming {
    pub defended_ms: Vec<f64>,
    pub undefended_ms: Vec<f64>,
    /// median(defended) / median(undefended)
    pub overhead_factor: f64,
}

#[derive(Debug, Clone)]
pub struct DefendedOutcome {
    pub summary: RunSummary,
    pub steps: Vec<StepMetrics>,
    pub clean_tokens: Vec<Token>,
    /// Free-running tokens under attack with the defense in place.
    pub tokens: Vec<Token>,
    pub timing: OverheadTiming,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Clean shadow run, then the attacked run with `defense` interposed at
/// every step (teacher-forced for metrics, free-running for tokens), then
/// `repetitions` (at least 5) timed defended/undefended pairs.
pub fn run_defended(
    weights: &Weights,
    prompt: &[Token],
    steps: usize,
    mode: DecodeMode,
    attack: Option<&AttackConfig>,
    defense: &DefenseConfig,
    repetitions: usize,
) -> Result<DefendedOutcome> {
    if let Some(a) = attack {
        a.validate(&weights.config)?;
    }
    let clean = execute(weights, Feed::Free { prompt, steps, mode }, &RunOptions::default())?;
    let defended_opts = RunOptions { attack, defense: Some(defense), collect_bounds: false };
    let forced = execute(weights, Feed::Forced(&clean.tokens), &defended_opts)?;
    let free = execute(weights, Feed::Free { prompt, steps, mode }, &defended_opts)?;

    let focus = attack.map(|a| a.layer_set()).unwrap_or_default();
    let (step_metrics, summary) = metrics::summarize(&clean, &forced, &focus)?;

    let undefended_opts = RunOptions { attack, defense: None, collect_bounds: false };
    let reps = repetitions.max(5);
    let mut defended_ms = Vec::with_capacity(reps);
    let mut undefended_ms = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = Instant::now();
        execute(weights, Feed::Forced(&clean.tokens), &undefended_opts)?;
        undefended_ms.push(t0.elapsed().as_secs_f64() * 1e3);
        let t0 = Instant::now();
        execute(weights, Feed::Forced(&clean.tokens), &defended_opts)?;
        defended_ms.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    let md = median(&mut defended_ms.clone());
    let mu = median(&mut undefended_ms.clone());
    let overhead_factor = if mu > 0.0 { md / mu } else { 1.0 };

    Ok(DefendedOutcome {
        summary,
        steps: step_metrics,
        clean_tokens: clean.tokens,
        tokens: free.tokens,
        timing: OverheadTiming { defended_ms, undefended_ms, overhead_factor },
    })
}

/// One row of the defense report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseRow {
    pub model: String,
    pub defense: String,
    pub attack: String,
    /// Teacher-forced top-1 agreement with the clean run, in percent.
    pub metric_value: f64,
    /// Percentage points lost relative to the clean run (which agrees 100%).
    pub degradation: f64,
    pub overhead: f64,
}

pub const DEFENSE_CSV_HEADER: &str = "model,defense,attack,metric_value,degradation,overhead";

impl DefenseRow {
    pub fn new(model: &str, defense: &DefenseConfig, attack: Option<&AttackConfig>, outcome: &DefendedOutcome) -> Self {
        let agreement = 100.0 * (1.0 - outcome.summary.top1_flip_rate);
        Self {
            model: model.to_string(),
            defense: defense.method.label().to_string(),
            attack: attack.map_or_else(|| "none".to_string(), |a| a.family.to_string()),
            metric_value: agreement,
            degradation: 100.0 - agreement,
            overhead: outcome.timing.overhead_factor,
        }
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{:.1},{:.1},{:.2}",
            self.model, self.defense, self.attack, self.metric_value, self.degradation, self.overhead
        )
    }
}
