//! The per-step driver shared by clean, attacked and defended runs.
//!
//! Each step `t` (1-based, equal to the cache length plus one) runs, in
//! order: attack injection into cached positions, defense pre-passes, the
//! forward pass that appends the new entry, and token selection.

use crate::attack::{inject_step, AttackConfig};
use crate::cache::{KVCache, TraceLog};
use crate::defense::{DefenseConfig, DefenseRuntime};
use crate::error::{invalid_arg, Result};
use crate::model::{forward_step_with, DecodeMode, NoHook, Token, Weights};
use crate::theory::AttackInstance;

/// Where the fed tokens come from.
#[derive(Debug, Clone, Copy)]
pub enum Feed<'a> {
    /// Continue `prompt` by `steps` chosen tokens.
    Free { prompt: &'a [Token], steps: usize, mode: DecodeMode },
    /// Feed a fixed sequence (teacher forcing).
    Forced(&'a [Token]),
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions<'a> {
    pub attack: Option<&'a AttackConfig>,
    pub defense: Option<&'a DefenseConfig>,
    /// Record an [`AttackInstance`] per head of every attacked layer on
    /// steps where injection happened.
    pub collect_bounds: bool,
}

/// Observations of one forward step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    /// Token fed at this step.
    pub input: Token,
    /// Next-token logits; they predict `tokens[t]`.
    pub logits: Vec<f64>,
    /// `[layer][head]` pre-softmax scores.
    pub scores: Vec<Vec<Vec<f64>>>,
    /// `[layer][head]` attention weights.
    pub attention: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub tokens: Vec<Token>,
    pub steps: Vec<StepRecord>,
    pub trace: TraceLog,
    pub instances: Vec<AttackInstance>,
    pub cache: KVCache,
}

impl RunRecord {
    pub fn logits(&self) -> Vec<Vec<f64>> {
        self.steps.iter().map(|s| s.logits.clone()).collect()
    }
}

/// Runs one sequence through the model with optional attack and defense.
pub fn execute(weights: &Weights, feed: Feed<'_>, opts: &RunOptions<'_>) -> Result<RunRecord> {
    let (mut seq, total, free) = match feed {
        Feed::Free { prompt, steps, mode } => (prompt.to_vec(), prompt.len() + steps, Some((mode, prompt.len()))),
        Feed::Forced(tokens) => (tokens.to_vec(), tokens.len(), None),
    };
    if seq.is_empty() {
        return Err(invalid_arg!("token sequence must be non-empty"));
    }
    if total - 1 > weights.config.max_seq {
        return Err(invalid_arg!(
            "run needs {} cache slots but max_seq is {}",
            total - 1,
            weights.config.max_seq
        ));
    }
    if let Some(a) = opts.attack {
        a.validate(&weights.config)?;
    }
    let mut runtime = opts.defense.map(|d| DefenseRuntime::new(d, weights)).transpose()?;
    let attack_layers = opts.attack.map(|a| a.layer_set()).unwrap_or_default();

    let mut cache = KVCache::for_model(&weights.config);
    let mut steps = Vec::with_capacity(total.saturating_sub(1));
    let mut instances = Vec::new();
    let mut prev_attention: Option<Vec<f64>> = None;

    for t in 1..total {
        let token = seq[t - 1];

        let mut injected = false;
        let mut before = Vec::new();
        let mut after = Vec::new();
        if let Some(attack) = opts.attack {
            if opts.collect_bounds {
                before = snapshot_keys(&cache, &attack_layers);
            }
            injected = !inject_step(weights, &mut cache, attack, t, token, prev_attention.as_deref())?.is_empty();
            if injected && opts.collect_bounds {
                after = snapshot_keys(&cache, &attack_layers);
            }
        }

        let masks = match runtime.as_mut() {
            Some(rt) => rt.pre_step(weights, &mut cache, t)?,
            None => Vec::new(),
        };
        let out = match runtime.as_mut().and_then(|rt| rt.hook()) {
            Some(hook) => forward_step_with(weights, &mut cache, token, hook)?,
            None => forward_step_with(weights, &mut cache, token, &mut NoHook)?,
        };
        for m in masks.iter().rev() {
            m.undo(&mut cache);
        }

        if injected && opts.collect_bounds {
            for (i, &layer) in attack_layers.iter().enumerate() {
                for head in 0..cache.n_heads() {
                    let (k_new, v_new) = &out.new_kv[layer][head];
                    let mut clean_keys = before[i][head].clone();
                    let mut perturbed_keys = after[i][head].clone();
                    clean_keys.push(k_new.clone());
                    perturbed_keys.push(k_new.clone());
                    let values = cache.values(layer, head).to_vec();
                    debug_assert_eq!(values.last(), Some(v_new));
                    instances.push(AttackInstance {
                        step: t,
                        layer,
                        head,
                        query: out.queries[layer][head].clone(),
                        clean_keys,
                        perturbed_keys,
                        values,
                    });
                }
            }
        }

        if let Some(&lowest) = attack_layers.first() {
            prev_attention = Some(head_mean(&out.attention[lowest]));
        }
        if let Some((mode, prompt_len)) = free {
            if t >= prompt_len {
                seq.push(mode.choose(&out.logits, t));
            }
        }
        steps.push(StepRecord {
            t,
            input: token,
            logits: out.logits,
            scores: out.scores,
            attention: out.attention,
        });
    }

    Ok(RunRecord { tokens: seq, steps, trace: cache.trace().clone(), instances, cache })
}

/// `[layer_idx][head][pos]` keys of the given layers.
fn snapshot_keys(cache: &KVCache, layers: &[usize]) -> Vec<Vec<Vec<Vec<f64>>>> {
    layers
        .iter()
        .map(|&l| (0..cache.n_heads()).map(|h| cache.keys(l, h).to_vec()).collect())
        .collect()
}

fn head_mean(per_head: &[Vec<f64>]) -> Vec<f64> {
    let n = per_head.len() as f64;
    let mut mean = vec![0.0; per_head[0].len()];
    for w in per_head {
        for (m, x) in mean.iter_mut().zip(w) {
            *m += x / n;
        }
    }
    mean
}
