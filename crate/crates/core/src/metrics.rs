//! Paired clean/attacked measurements.
//!
//! Both runs of a pair are fed the same (clean) token sequence so per-step
//! distributions are comparable; free-running divergence is measured
//! separately with [`edit_distance`]. All logarithms are natural.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};
use crate::linalg::{argmax, log_softmax, norm1, norm2, softmax_unchecked, sub};
use crate::model::Token;
use crate::pipeline::RunRecord;
use crate::theory::softmax_shift_limit;

/// Lower clamp applied to `q` inside the KL logarithm.
pub const KL_CLAMP: f64 = 1e-12;

fn check_distribution(p: &[f64], name: &str) -> Result<()> {
    if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(invalid_arg!("{name} has negative or non-finite entries"));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(invalid_arg!("{name} sums to {s}, not 1"));
    }
    Ok(())
}

/// `Σ p_i ln(p_i / max(q_i, 1e-12))`, skipping `p_i = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(invalid_arg!("distributions of size {} and {}", p.len(), q.len()));
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    Ok(kl_unchecked(p, q))
}

fn kl_unchecked(p: &[f64], q: &[f64]) -> f64 {
    let kl: f64 = p
        .iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.ln() - qi.max(KL_CLAMP).ln()))
        .sum();
    kl.max(0.0)
}

/// `exp(−mean(logprobs))`
pub fn perplexity(token_logprobs: &[f64]) -> Result<f64> {
    if token_logprobs.is_empty() {
        return Err(invalid_arg!("perplexity of an empty sequence"));
    }
    let mean = token_logprobs.iter().sum::<f64>() / token_logprobs.len() as f64;
    Ok((-mean).exp())
}

/// Fraction of steps whose argmax differs.
pub fn top1_flip_rate(clean: &[Vec<f64>], attacked: &[Vec<f64>]) -> Result<f64> {
    if clean.len() != attacked.len() {
        return Err(invalid_arg!("{} clean steps vs {} attacked", clean.len(), attacked.len()));
    }
    if clean.is_empty() {
        return Ok(0.0);
    }
    let flips = clean.iter().zip(attacked).filter(|(a, b)| argmax(a) != argmax(b)).count();
    Ok(flips as f64 / clean.len() as f64)
}

/// `‖α − α̃‖₁`
pub fn attention_shift(clean: &[f64], attacked: &[f64]) -> Result<f64> {
    if clean.len() != attacked.len() {
        return Err(invalid_arg!("attention vectors of length {} and {}", clean.len(), attacked.len()));
    }
    Ok(norm1(&sub(clean, attacked)))
}

/// Levenshtein distance between two token sequences.
pub fn edit_distance(a: &[Token], b: &[Token]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub_cost = prev[j] + usize::from(x != y);
            cur[j + 1] = sub_cost.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub t: usize,
    pub kl: f64,
    pub clean_top1: Token,
    pub attacked_top1: Token,
    pub flip: bool,
    /// Mean over the focus layers and their heads.
    pub att_shift: f64,
    /// Heads at the focus layers whose shift exceeded `min(2, √n‖Δs‖₂)`.
    pub shift_bound_violations: usize,
}

impl StepMetrics {
    /// `{"t":…,"kl":…,"flip":…,"att_shift":…}`
    pub fn json_line(&self) -> String {
        serde_json::json!({ "t": self.t, "kl": self.kl, "flip": self.flip, "att_shift": self.att_shift })
            .to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: usize,
    pub mean_kl: f64,
    pub max_kl: f64,
    pub perplexity_clean: f64,
    pub perplexity_attacked: f64,
    pub perplexity_change_pct: f64,
    pub top1_flip_rate: f64,
    pub mean_attention_shift: f64,
    pub shift_bound_violations: usize,
    pub injections: usize,
    pub mean_delta_norm: f64,
    pub max_delta_norm: f64,
}

/// Step-paired metrics of two runs over the same token sequence.
///
/// Attention shift is averaged over `focus_layers` (all layers when empty).
pub fn summarize(clean: &RunRecord, attacked: &RunRecord, focus_layers: &[usize]) -> Result<(Vec<StepMetrics>, RunSummary)> {
    if clean.tokens != attacked.tokens {
        return Err(invalid_arg!("paired runs must read the same token sequence"));
    }
    if clean.steps.is_empty() {
        return Err(invalid_arg!("runs have no forward steps"));
    }
    let n_layers = clean.steps[0].attention.len();
    let layers: Vec<usize> = if focus_layers.is_empty() { (0..n_layers).collect() } else { focus_layers.to_vec() };

    let mut steps = Vec::with_capacity(clean.steps.len());
    let mut lp_clean = Vec::with_capacity(clean.steps.len());
    let mut lp_attacked = Vec::with_capacity(clean.steps.len());
    for (c, a) in clean.steps.iter().zip(&attacked.steps) {
        let next = clean.tokens[c.t] as usize;
        lp_clean.push(log_softmax(&c.logits)[next]);
        lp_attacked.push(log_softmax(&a.logits)[next]);
        let kl = kl_unchecked(&softmax_unchecked(&c.logits), &softmax_unchecked(&a.logits));

        let mut shift_sum = 0.0;
        let mut count = 0usize;
        let mut violations = 0;
        for &l in &layers {
            for (h, (wc, wa)) in c.attention[l].iter().zip(&a.attention[l]).enumerate() {
                let shift = attention_shift(wc, wa)?;
                let dz = sub(&a.scores[l][h], &c.scores[l][h]);
                if shift > softmax_shift_limit(&dz) + 1e-12 {
                    violations += 1;
                }
                shift_sum += shift;
                count += 1;
            }
        }
        let (ct, at) = (argmax(&c.logits) as Token, argmax(&a.logits) as Token);
        steps.push(StepMetrics {
            t: c.t,
            kl,
            clean_top1: ct,
            attacked_top1: at,
            flip: ct != at,
            att_shift: if count > 0 { shift_sum / count as f64 } else { 0.0 },
            shift_bound_violations: violations,
        });
    }

    let n = steps.len() as f64;
    let perplexity_clean = perplexity(&lp_clean)?;
    let perplexity_attacked = perplexity(&lp_attacked)?;
    let norms: Vec<f64> = attacked.trace.records().iter().map(|r| r.delta_norm).collect();
    let summary = RunSummary {
        steps: steps.len(),
        mean_kl: steps.iter().map(|s| s.kl).sum::<f64>() / n,
        max_kl: steps.iter().map(|s| s.kl).fold(0.0, f64::max),
        perplexity_clean,
        perplexity_attacked,
        perplexity_change_pct: 100.0 * (perplexity_attacked - perplexity_clean) / perplexity_clean,
        top1_flip_rate: steps.iter().filter(|s| s.flip).count() as f64 / n,
        mean_attention_shift: steps.iter().map(|s| s.att_shift).sum::<f64>() / n,
        shift_bound_violations: steps.iter().map(|s| s.shift_bound_violations).sum(),
        injections: norms.len(),
        mean_delta_norm: if norms.is_empty() { 0.0 } else { norms.iter().sum::<f64>() / norms.len() as f64 },
        max_delta_norm: norms.iter().copied().fold(0.0, f64::max),
    };
    Ok((steps, summary))
}

/// Step-level KL between two logit sequences (no attention needed).
pub fn mean_kl_from_logits(clean: &[Vec<f64>], attacked: &[Vec<f64>]) -> Result<f64> {
    if clean.len() != attacked.len() || clean.is_empty() {
        return Err(invalid_arg!("need equal, non-empty logit sequences"));
    }
    let total: f64 = clean
        .iter()
        .zip(attacked)
        .map(|(c, a)| kl_unchecked(&softmax_unchecked(c), &softmax_unchecked(a)))
        .sum();
    Ok(total / clean.len() as f64)
}

/// Euclidean distance between logit vectors, averaged over steps.
pub fn mean_logit_deviation(clean: &[Vec<f64>], attacked: &[Vec<f64>]) -> Result<f64> {
    if clean.len() != attacked.len() || clean.is_empty() {
        return Err(invalid_arg!("need equal, non-empty logit sequences"));
    }
    Ok(clean.iter().zip(attacked).map(|(c, a)| norm2(&sub(c, a))).sum::<f64>() / clean.len() as f64)
}
