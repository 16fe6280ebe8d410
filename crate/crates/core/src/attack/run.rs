use super::{
    make_delta, optimize_perturbation, select_positions, should_inject, AttackConfig, Family, OptimizationTarget,
};
use crate::cache::KVCache;
use crate::error::Result;
use crate::linalg::{norm2, SeededRng};
use crate::model::{DecodeMode, Token, Weights};
use crate::pipeline::{execute, Feed, RunOptions, RunRecord};

/// One key perturbation applied during a step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Injection {
    pub layer: usize,
    pub head: usize,
    pub pos: usize,
    pub delta_norm: f64,
}

/// Injection phase of 1-based step `t`, run before `token` is fed.
///
/// Does nothing on an empty cache or when the schedule does not fire.
/// Perturbations that come out exactly zero (a Zeroing coin that did not
/// land, σ = 0) are not applied and not traced.
pub fn inject_step(
    weights: &Weights,
    cache: &mut KVCache,
    cfg: &AttackConfig,
    t: usize,
    token: Token,
    prev_attention: Option<&[f64]>,
) -> Result<Vec<Injection>> {
    if cache.is_empty() || !should_inject(&cfg.schedule, t) {
        return Ok(Vec::new());
    }
    let positions = select_positions(&cfg.policy, cache.len(), t, prev_attention)?;
    let kind = cfg.family.kind();
    let n_heads = cache.n_heads();
    let all_heads: Vec<usize> = (0..n_heads).collect();
    let mut applied = Vec::new();

    for layer in cfg.layer_set() {
        for &pos in &positions {
            let coords = |head: u64| [t as u64, layer as u64, head, pos as u64];
            let deltas: Vec<(usize, Vec<f64>)> = if cfg.family == Family::Optimized {
                if cfg.per_head {
                    let mut out = Vec::with_capacity(n_heads);
                    for h in 0..n_heads {
                        let target = OptimizationTarget { layer, heads: &all_heads[h..=h], pos, token };
                        out.push((h, optimize_perturbation(weights, cache, target, &cfg.optimizer)?));
                    }
                    out
                } else {
                    let target = OptimizationTarget { layer, heads: &all_heads, pos, token };
                    let d = optimize_perturbation(weights, cache, target, &cfg.optimizer)?;
                    all_heads.iter().map(|h| (*h, d.clone())).collect()
                }
            } else if cfg.per_head {
                let mut out = Vec::with_capacity(n_heads);
                for h in 0..n_heads {
                    let mut rng = SeededRng::stream(cfg.seed, &coords(h as u64));
                    out.push((h, make_delta(cfg, &cache.keys(layer, h)[pos], &mut rng)?));
                }
                out
            } else {
                // one draw per layer: every head sees the same noise, coin or plane
                let rng = SeededRng::stream(cfg.seed, &coords(u64::MAX));
                let mut out = Vec::with_capacity(n_heads);
                for h in 0..n_heads {
                    out.push((h, make_delta(cfg, &cache.keys(layer, h)[pos], &mut rng.clone())?));
                }
                out
            };
            for (head, delta) in deltas {
                if delta.iter().all(|x| *x == 0.0) {
                    continue;
                }
                let delta_norm = cache.perturb_key_as(kind, layer, head, pos, &delta)?;
                debug_assert_eq!(delta_norm, norm2(&delta));
                applied.push(Injection { layer, head, pos, delta_norm });
            }
        }
    }
    Ok(applied)
}

/// Clean shadow run plus the attacked runs that pair with it.
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    /// Free-running, no injection.
    pub clean: RunRecord,
    /// Attacked, fed the clean run's tokens (teacher forcing).
    pub attacked: RunRecord,
    /// Attacked and free-running.
    pub free: RunRecord,
}

impl AttackOutcome {
    pub fn tokens(&self) -> &[Token] {
        &self.free.tokens
    }
}

/// Runs the stepwise attack loop next to its clean shadow.
pub fn run_attack(
    weights: &Weights,
    prompt: &[Token],
    steps: usize,
    mode: DecodeMode,
    attack: &AttackConfig,
) -> Result<AttackOutcome> {
    attack.validate(&weights.config)?;
    let clean = execute(weights, Feed::Free { prompt, steps, mode }, &RunOptions::default())?;
    let opts = RunOptions { attack: Some(attack), ..Default::default() };
    let attacked = execute(weights, Feed::Forced(&clean.tokens), &opts)?;
    let free = execute(weights, Feed::Free { prompt, steps, mode }, &opts)?;
    Ok(AttackOutcome { clean, attacked, free })
}
