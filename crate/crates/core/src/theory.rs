//! Perturbation bounds and their empirical verifiers.
//!
//! * Attention scores: `‖Δs‖₂ ≤ ‖q‖₂·‖ΔK‖_F/√d` for one head, tight when a
//!   single perturbed key moves parallel to the query.
//! * Softmax: `‖softmax(z+Δz) − softmax(z)‖₁ ≤ min(2, √n·‖Δz‖₂)`.
//! * Multi-head output: `‖W_O‖₂·H·ε·max_h‖q_h‖₂`.
//! * Layer norm: an empirical probe of the local Lipschitz ratio, which is
//!   at most 1 only for unit gain and input variance bounded away from zero.
//!
//! Next-token logit deviation is reported by the metrics module; the bounds
//! here stop at the attention layer.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attack::{AttackConfig, Family, OptimizerConfig, PositionPolicy, Schedule};
use crate::error::{invalid_arg, Error, Result};
use crate::exec::try_map_indexed;
use crate::linalg::{self, dot, layer_norm, norm2, spectral_norm, sub, Matrix, SeededRng, LN_EPS};
use crate::model::{attention_head, DecodeMode, Token, Weights};
use crate::pipeline::{execute, Feed, RunOptions};

/// Relative slack allowed before an observation counts as a violation.
pub const REL_TOL: f64 = 1e-9;
/// Observations at or below this are treated as zero when the bound is zero.
pub const ZERO_TOL: f64 = 1e-9;

// ── Single-head score bound ─────────────────────────────────────────────────

/// `‖q‖₂·‖ΔK‖_F/√d` with `d = q.len()`.
pub fn score_deviation_bound(query: &[f64], delta_keys: &[Vec<f64>]) -> f64 {
    let fro = delta_keys.iter().map(|r| dot(r, r)).sum::<f64>().sqrt();
    norm2(query) * fro / (query.len() as f64).sqrt()
}

/// Per-position bounds `‖q‖₂·‖Δk_j‖₂/√d`.
pub fn score_deviation_bound_per_position(query: &[f64], delta_keys: &[Vec<f64>]) -> Vec<f64> {
    let c = norm2(query) / (query.len() as f64).sqrt();
    delta_keys.iter().map(|r| c * norm2(r)).collect()
}

fn scores(query: &[f64], keys: &[Vec<f64>]) -> Vec<f64> {
    let scale = 1.0 / (query.len() as f64).sqrt();
    keys.iter().map(|k| dot(query, k) * scale).collect()
}

/// One head's view of one attacked step: its query, the keys it read
/// before and after injection (the current token's own key last) and the
/// matching values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackInstance {
    pub step: usize,
    pub layer: usize,
    pub head: usize,
    pub query: Vec<f64>,
    pub clean_keys: Vec<Vec<f64>>,
    pub perturbed_keys: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
}

impl AttackInstance {
    pub fn delta_keys(&self) -> Vec<Vec<f64>> {
        self.perturbed_keys.iter().zip(&self.clean_keys).map(|(a, b)| sub(a, b)).collect()
    }

    /// `‖ΔK‖_F`
    pub fn perturb_norm(&self) -> f64 {
        self.delta_keys().iter().map(|r| dot(r, r)).sum::<f64>().sqrt()
    }

    pub fn clean_scores(&self) -> Vec<f64> {
        scores(&self.query, &self.clean_keys)
    }

    pub fn perturbed_scores(&self) -> Vec<f64> {
        scores(&self.query, &self.perturbed_keys)
    }

    /// `‖s̃ − s‖₂` over all read positions.
    pub fn observed_score_deviation(&self) -> f64 {
        norm2(&sub(&self.perturbed_scores(), &self.clean_scores()))
    }

    pub fn bound(&self) -> f64 {
        score_deviation_bound(&self.query, &self.delta_keys())
    }

    /// `(context, weights)` read through the clean and perturbed keys.
    pub fn contexts(&self) -> Result<((Vec<f64>, Vec<f64>), (Vec<f64>, Vec<f64>))> {
        Ok((
            attention_head(&self.query, &self.clean_keys, &self.values)?,
            attention_head(&self.query, &self.perturbed_keys, &self.values)?,
        ))
    }
}

/// Single cached key moved by `c·q`: the Cauchy–Schwarz equality case.
pub fn parallel_delta_instance(query: &[f64], keys: &[Vec<f64>], pos: usize, c: f64) -> Result<AttackInstance> {
    if pos >= keys.len() {
        return Err(invalid_arg!("position {pos} outside {} keys", keys.len()));
    }
    let mut perturbed = keys.to_vec();
    linalg::axpy(&mut perturbed[pos], c, query);
    Ok(AttackInstance {
        step: 0,
        layer: 0,
        head: 0,
        query: query.to_vec(),
        clean_keys: keys.to_vec(),
        perturbed_keys: perturbed,
        values: keys.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundFlag {
    #[serde(rename = "OK")]
    Ok,
    #[serde(rename = "VIOLATION")]
    Violation,
    #[serde(rename = "UNDEFINED")]
    Undefined,
}

impl fmt::Display for BoundFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BoundFlag::Ok => "OK",
            BoundFlag::Violation => "VIOLATION",
            BoundFlag::Undefined => "UNDEFINED",
        })
    }
}

impl FromStr for BoundFlag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "OK" => Ok(BoundFlag::Ok),
            "VIOLATION" => Ok(BoundFlag::Violation),
            "UNDEFINED" => Ok(BoundFlag::Undefined),
            _ => Err(invalid_arg!("unknown flag `{s}`")),
        }
    }
}

/// `(ratio, flag)` for an observation against its bound.
///
/// A zero bound with a non-zero observation is a violation with infinite
/// ratio; non-finite inputs are undefined.
pub fn classify(bound: f64, observed: f64) -> (f64, BoundFlag) {
    if !bound.is_finite() || !observed.is_finite() || bound < 0.0 || observed < 0.0 {
        return (f64::NAN, BoundFlag::Undefined);
    }
    if bound == 0.0 {
        return if observed > ZERO_TOL { (f64::INFINITY, BoundFlag::Violation) } else { (0.0, BoundFlag::Ok) };
    }
    let ratio = observed / bound;
    let flag = if observed > bound * (1.0 + REL_TOL) { BoundFlag::Violation } else { BoundFlag::Ok };
    (ratio, flag)
}

/// One row of a bound report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub layer: usize,
    pub perturb_norm: f64,
    pub theoretical_bound: f64,
    pub observed_deviation: f64,
    pub ratio: f64,
    pub flag: BoundFlag,
}

impl BoundRow {
    pub fn evaluate(layer: usize, perturb_norm: f64, theoretical_bound: f64, observed_deviation: f64) -> Self {
        let (ratio, flag) = classify(theoretical_bound, observed_deviation);
        Self { layer, perturb_norm, theoretical_bound, observed_deviation, ratio, flag }
    }
}

pub fn verify_single_head(instance: &AttackInstance) -> BoundRow {
    BoundRow::evaluate(
        instance.layer,
        instance.perturb_norm(),
        instance.bound(),
        instance.observed_score_deviation(),
    )
}

pub const BOUND_CSV_HEADER: &str = "layer,perturb_norm,theoretical_bound,observed_deviation,ratio,flag";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub rows: Vec<BoundRow>,
}

impl BoundReport {
    pub fn from_instances(instances: &[AttackInstance]) -> Self {
        Self { rows: instances.iter().map(verify_single_head).collect() }
    }

    pub fn violations(&self) -> usize {
        self.rows.iter().filter(|r| r.flag != BoundFlag::Ok).count()
    }

    /// Largest finite ratio (0 for an empty report).
    pub fn max_ratio(&self) -> f64 {
        self.rows.iter().map(|r| r.ratio).filter(|r| r.is_finite()).fold(0.0, f64::max)
    }

    /// Re-evaluates every row's ratio and flag from its numbers.
    pub fn reverify(&self) -> Self {
        Self {
            rows: self
                .rows
                .iter()
                .map(|r| BoundRow::evaluate(r.layer, r.perturb_norm, r.theoretical_bound, r.observed_deviation))
                .collect(),
        }
    }

    /// CSV with shortest round-trip float formatting.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(BOUND_CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.layer, r.perturb_norm, r.theoretical_bound, r.observed_deviation, r.ratio, r.flag
            );
        }
        s
    }

    /// Parses [`Self::to_csv`] output; error offsets are 1-based line numbers.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, h)) if h.trim() == BOUND_CSV_HEADER => {}
            _ => return Err(Error::Parse { offset: 0, message: format!("expected header `{BOUND_CSV_HEADER}`") }),
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            let line_err = |m: String| Error::Parse { offset: i + 1, message: format!("line {}: {m}", i + 1) };
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 6 {
                return Err(line_err(format!("expected 6 fields, found {}", f.len())));
            }
            let num = |j: usize| f[j].parse::<f64>().map_err(|_| line_err(format!("bad number `{}`", f[j])));
            rows.push(BoundRow {
                layer: f[0].parse().map_err(|_| line_err(format!("bad layer `{}`", f[0])))?,
                perturb_norm: num(1)?,
                theoretical_bound: num(2)?,
                observed_deviation: num(3)?,
                ratio: num(4)?,
                flag: f[5].parse().map_err(|_| line_err(format!("bad flag `{}`", f[5])))?,
            });
        }
        Ok(Self { rows })
    }

    /// Fixed-width table with two decimals.
    pub fn render_table(&self) -> String {
        let mut s = format!(
            "{:>5}  {:>12}  {:>12}  {:>12}  {:>8}  {}\n",
            "layer", "perturb_norm", "bound", "observed", "ratio", "flag"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:>5}  {:>12.2}  {:>12.2}  {:>12.2}  {:>8.2}  {}",
                r.layer, r.perturb_norm, r.theoretical_bound, r.observed_deviation, r.ratio, r.flag
            );
        }
        s
    }
}

// ── Softmax shift ───────────────────────────────────────────────────────────

/// `(observed ℓ1 shift, min(2, √n·‖Δz‖₂))`.
pub fn softmax_shift_bound(z: &[f64], dz: &[f64]) -> Result<(f64, f64)> {
    if z.len() != dz.len() {
        return Err(invalid_arg!("z has {} entries but dz has {}", z.len(), dz.len()));
    }
    let p = linalg::softmax(z)?;
    let zt: Vec<f64> = z.iter().zip(dz).map(|(a, b)| a + b).collect();
    let pt = linalg::softmax(&zt)?;
    let observed = linalg::norm1(&sub(&pt, &p));
    Ok((observed, softmax_shift_limit(dz)))
}

/// `min(2, √n·‖Δz‖₂)`
pub fn softmax_shift_limit(dz: &[f64]) -> f64 {
    ((dz.len() as f64).sqrt() * norm2(dz)).min(2.0)
}

// ── Multi-head output ───────────────────────────────────────────────────────

/// `‖W_O‖₂·H·ε·max_h‖q_h‖₂`
pub fn multi_head_bound(wo_norm: f64, n_heads: usize, epsilon: f64, max_q_norm: f64) -> f64 {
    wo_norm * n_heads as f64 * epsilon * max_q_norm
}

/// Spectral norm of an output projection (power iteration).
pub fn output_projection_norm(wo: &Matrix) -> f64 {
    spectral_norm(wo, 1000, 1e-13)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiHeadCheck {
    pub step: usize,
    pub layer: usize,
    /// `max_h ‖ΔK_h‖_F`
    pub epsilon: f64,
    pub max_q_norm: f64,
    pub bound: f64,
    /// `‖W_O·concat(c̃) − W_O·concat(c)‖₂`
    pub observed: f64,
    pub ratio: f64,
    pub flag: BoundFlag,
}

/// Checks one layer-step; `heads` must hold every head of the layer in order.
pub fn verify_multi_head(heads: &[AttackInstance], wo: &Matrix, wo_norm: f64) -> Result<MultiHeadCheck> {
    if heads.is_empty() {
        return Err(invalid_arg!("no heads"));
    }
    let (step, layer) = (heads[0].step, heads[0].layer);
    let mut clean = Vec::with_capacity(wo.cols());
    let mut pert = Vec::with_capacity(wo.cols());
    let mut epsilon: f64 = 0.0;
    let mut max_q: f64 = 0.0;
    for (h, inst) in heads.iter().enumerate() {
        if inst.head != h || inst.step != step || inst.layer != layer {
            return Err(invalid_arg!("heads must come from one layer-step in head order"));
        }
        let ((c, _), (p, _)) = inst.contexts()?;
        clean.extend(c);
        pert.extend(p);
        epsilon = epsilon.max(inst.perturb_norm());
        max_q = max_q.max(norm2(&inst.query));
    }
    if clean.len() != wo.cols() {
        return Err(invalid_arg!("concatenated context has {} entries, W_O expects {}", clean.len(), wo.cols()));
    }
    let observed = norm2(&sub(&wo.matvec(&pert), &wo.matvec(&clean)));
    let bound = multi_head_bound(wo_norm, heads.len(), epsilon, max_q);
    let (ratio, flag) = classify(bound, observed);
    Ok(MultiHeadCheck { step, layer, epsilon, max_q_norm: max_q, bound, observed, ratio, flag })
}

// ── Layer-norm probe ────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub dim: usize,
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
    pub n_samples: usize,
    /// Inputs are drawn with variance in `[floor, 4·floor]`.
    pub variance_floor: f64,
    /// Size of the probing displacement relative to `sqrt(variance_floor)`.
    pub delta_scale: f64,
    /// Restrict displacements to the tangent space of the input's
    /// mean/variance level set.
    pub tangent: bool,
    pub seed: u64,
}

impl ProbeConfig {
    pub fn unit(dim: usize) -> Self {
        Self {
            dim,
            gain: vec![1.0; dim],
            bias: vec![0.0; dim],
            n_samples: 1000,
            variance_floor: 1.0,
            delta_scale: 1e-6,
            tangent: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub samples: usize,
    pub max_ratio: f64,
    pub mean_ratio: f64,
    pub claimed_constant: f64,
    /// `max_ratio ≤ 1 + 1e-6`
    pub holds: bool,
    pub variance_floor: f64,
    pub max_gain: f64,
}

/// Samples `‖LN(x+Δ) − LN(x)‖₂ / ‖Δ‖₂`.
pub fn ln_lipschitz_probe(gain: &[f64], bias: &[f64], n_samples: usize, variance_floor: f64) -> Result<ProbeReport> {
    let mut cfg = ProbeConfig::unit(gain.len());
    cfg.gain = gain.to_vec();
    cfg.bias = bias.to_vec();
    cfg.n_samples = n_samples;
    cfg.variance_floor = variance_floor;
    ln_lipschitz_probe_with(&cfg)
}

pub fn ln_lipschitz_probe_with(cfg: &ProbeConfig) -> Result<ProbeReport> {
    let d = cfg.dim;
    if d < 2 || cfg.gain.len() != d || cfg.bias.len() != d {
        return Err(invalid_arg!("probe needs dim >= 2 and matching gain/bias"));
    }
    if !(cfg.variance_floor > 0.0) || !(cfg.delta_scale > 0.0) || cfg.n_samples == 0 {
        return Err(invalid_arg!("variance floor, delta scale and sample count must be positive"));
    }
    let mut rng = SeededRng::stream(cfg.seed, &[0x6c6e]);
    let mut max_ratio: f64 = 0.0;
    let mut sum = 0.0;
    for _ in 0..cfg.n_samples {
        let mut x: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let mean = x.iter().sum::<f64>() / d as f64;
        x.iter_mut().for_each(|v| *v -= mean);
        let var = x.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let target = cfg.variance_floor * (1.0 + 3.0 * rng.uniform());
        let s = (target / var).sqrt();
        let offset = rng.normal();
        x.iter_mut().for_each(|v| *v = *v * s + offset);

        let mut delta: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        if cfg.tangent {
            let dm = delta.iter().sum::<f64>() / d as f64;
            delta.iter_mut().for_each(|v| *v -= dm);
            let centered: Vec<f64> = x.iter().map(|v| v - offset).collect();
            let c = dot(&delta, &centered) / dot(&centered, &centered);
            linalg::axpy(&mut delta, -c, &centered);
        }
        let scale = cfg.delta_scale * cfg.variance_floor.sqrt() / norm2(&delta);
        delta.iter_mut().for_each(|v| *v *= scale);

        let xt: Vec<f64> = x.iter().zip(&delta).map(|(a, b)| a + b).collect();
        let a = layer_norm(&x, &cfg.gain, &cfg.bias)?;
        let b = layer_norm(&xt, &cfg.gain, &cfg.bias)?;
        let ratio = norm2(&sub(&b, &a)) / norm2(&delta);
        max_ratio = max_ratio.max(ratio);
        sum += ratio;
    }
    Ok(ProbeReport {
        samples: cfg.n_samples,
        max_ratio,
        mean_ratio: sum / cfg.n_samples as f64,
        claimed_constant: 1.0,
        holds: max_ratio <= 1.0 + 1e-6,
        variance_floor: cfg.variance_floor,
        max_gain: cfg.gain.iter().fold(0.0, |m, g| m.max(g.abs())),
    })
}

/// Local Lipschitz constant `max|g|/sqrt(var + eps)` of layer norm at an
/// input of variance `var`.
pub fn ln_local_constant(max_gain: f64, variance: f64) -> f64 {
    max_gain / (variance + LN_EPS).sqrt()
}

// ── Campaigns over live runs ────────────────────────────────────────────────

/// Randomized attack runs on a model: every family over a magnitude grid,
/// every layer, all heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignConfig {
    pub prompts: usize,
    pub prompt_len: usize,
    pub steps: usize,
    pub seed: u64,
    pub gaussian_sigmas: Vec<f64>,
    pub rotation_thetas: Vec<f64>,
    pub zeroing_rates: Vec<f64>,
    pub optimized_epsilons: Vec<f64>,
    pub optimizer_steps: usize,
    pub positions: usize,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            prompts: 1,
            prompt_len: 6,
            steps: 6,
            seed: 0,
            gaussian_sigmas: vec![0.01, 0.1, 1.0, 5.0],
            rotation_thetas: vec![15.0, 45.0, 90.0, 180.0],
            zeroing_rates: vec![0.005, 0.01, 0.05, 1.0],
            optimized_epsilons: vec![0.5, 5.0],
            optimizer_steps: 2,
            positions: 3,
        }
    }
}

impl CampaignConfig {
    /// Every `(attack, prompt)` cell of the campaign.
    pub fn attacks(&self, n_layers: usize) -> Vec<AttackConfig> {
        let mut grid: Vec<(Family, f64)> = Vec::new();
        grid.extend(self.gaussian_sigmas.iter().map(|m| (Family::Gaussian, *m)));
        grid.extend(self.rotation_thetas.iter().map(|m| (Family::Rotation, *m)));
        grid.extend(self.zeroing_rates.iter().map(|m| (Family::Zeroing, *m)));
        grid.extend(self.optimized_epsilons.iter().map(|m| (Family::Optimized, *m)));
        let mut out = Vec::new();
        for (i, (family, m)) in grid.into_iter().enumerate() {
            for layer in 0..n_layers {
                let mut a = AttackConfig {
                    family,
                    layers: vec![layer],
                    schedule: Schedule::EveryStep,
                    policy: PositionPolicy::RandomK { k: self.positions, seed: self.seed ^ ((i as u64) << 8) },
                    seed: self.seed.wrapping_add((i * n_layers + layer) as u64),
                    optimizer: OptimizerConfig { steps: self.optimizer_steps, step_size: 0.5, ..Default::default() },
                    ..Default::default()
                };
                a.set_magnitude(m);
                // one jointly optimized δ per position keeps the finite-difference cost down
                a.per_head = family != Family::Optimized;
                out.push(a);
            }
        }
        out
    }

    fn prompt(&self, vocab: usize, idx: usize) -> Vec<Token> {
        let mut rng = SeededRng::stream(self.seed, &[0x70726f6d7074, idx as u64]);
        (0..self.prompt_len).map(|_| rng.below(vocab) as Token).collect()
    }

    /// All recorded attack instances, in deterministic order.
    pub fn instances(&self, weights: &Weights) -> Result<Vec<AttackInstance>> {
        let attacks = self.attacks(weights.config.n_layers);
        let n = attacks.len() * self.prompts;
        let per_cell = try_map_indexed(n, |i| {
            let attack = &attacks[i / self.prompts];
            let prompt = self.prompt(weights.config.vocab, i % self.prompts);
            let opts = RunOptions { attack: Some(attack), defense: None, collect_bounds: true };
            let rec = execute(weights, Feed::Free { prompt: &prompt, steps: self.steps, mode: DecodeMode::Greedy }, &opts)?;
            Ok(rec.instances)
        })?;
        Ok(per_cell.into_iter().flatten().collect())
    }
}

/// Score-bound report over a campaign.
pub fn single_head_campaign(weights: &Weights, cfg: &CampaignConfig) -> Result<BoundReport> {
    Ok(BoundReport::from_instances(&cfg.instances(weights)?))
}

/// Multi-head checks over a campaign, one per attacked layer-step.
pub fn multi_head_campaign(weights: &Weights, cfg: &CampaignConfig) -> Result<Vec<MultiHeadCheck>> {
    let norms: Vec<f64> = weights.layers.iter().map(|l| output_projection_norm(&l.wo)).collect();
    let instances = cfg.instances(weights)?;
    let h = weights.config.n_heads;
    instances
        .chunks(h)
        .map(|group| {
            let layer = group[0].layer;
            verify_multi_head(group, &weights.layers[layer].wo, norms[layer])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn score_bound_examples() {
        assert_eq!(score_deviation_bound(&[1.0, 2.0], &[vec![0.0, 0.0]]), 0.0);

        // q = e1, δ = 0.2·e1 at one position in d = 4: Δs = 0.2/2 = 0.1 = B
        let q = [1.0, 0.0, 0.0, 0.0];
        let keys = vec![vec![0.3, -0.1, 0.2, 0.0], vec![0.0, 1.0, 0.0, 0.5]];
        let inst = parallel_delta_instance(&q, &keys, 1, 0.2).unwrap();
        assert!((inst.observed_score_deviation() - 0.1).abs() < 1e-15);
        assert!((inst.bound() - 0.1).abs() < 1e-15);
        let row = verify_single_head(&inst);
        assert_eq!(row.flag, BoundFlag::Ok);
        assert!((row.ratio - 1.0).abs() < 1e-12);
    }

    #[test]
    fn classify_edges() {
        assert_eq!(classify(0.0, 0.0), (0.0, BoundFlag::Ok));
        assert_eq!(classify(0.0, 0.14).1, BoundFlag::Violation);
        assert!(classify(0.0, 0.14).0.is_infinite());
        assert_eq!(classify(f64::NAN, 1.0).1, BoundFlag::Undefined);
        assert_eq!(classify(1.0, 1.0 + 1e-12).1, BoundFlag::Ok);
        assert_eq!(classify(1.0, 1.0 + 1e-6).1, BoundFlag::Violation);
    }

    #[test]
    fn report_csv_round_trip() {
        let empty = BoundReport::default();
        assert_eq!(empty.to_csv(), format!("{BOUND_CSV_HEADER}\n"));
        let r = BoundReport { rows: vec![BoundRow::evaluate(6, 6.16, 7.4, 0.148)] };
        let back = BoundReport::from_csv(&r.to_csv()).unwrap();
        assert_eq!(back, r);
        assert!(r.render_table().contains("0.02"));
        let bad = BoundReport::from_csv("layer,x\n");
        assert!(bad.is_err());
        let bad_line = format!("{BOUND_CSV_HEADER}\n1,2,3\n");
        assert!(matches!(BoundReport::from_csv(&bad_line), Err(Error::Parse { offset: 2, .. })));
    }

    #[test]
    fn softmax_shift_examples() {
        let (o, b) = softmax_shift_bound(&[0.3, -1.0, 2.0], &[0.0; 3]).unwrap();
        assert_eq!((o, b), (0.0, 0.0));
        let (o, b) = softmax_shift_bound(&[0.0, 0.0], &[100.0, -100.0]).unwrap();
        assert_eq!(b, 2.0);
        assert!(o <= 2.0);
        assert!(softmax_shift_bound(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn multi_head_bound_examples() {
        assert_eq!(multi_head_bound(3.0, 4, 0.0, 2.0), 0.0);
        assert_eq!(multi_head_bound(3.0, 1, 0.5, 2.0), 3.0);
    }

    #[test]
    fn ln_probe_regimes() {
        let d = 16;
        let mut cfg = ProbeConfig::unit(d);
        cfg.tangent = true;
        let unit = ln_lipschitz_probe_with(&cfg).unwrap();
        assert!(unit.holds, "{unit:?}");

        let doubled = ln_lipschitz_probe(&vec![2.0; d], &vec![0.0; d], 500, 1.0).unwrap();
        assert!(!doubled.holds && doubled.max_ratio > 1.5, "{doubled:?}");

        let flat = ln_lipschitz_probe(&vec![1.0; d], &vec![0.0; d], 500, 1e-4).unwrap();
        assert!(flat.max_ratio > 10.0, "{flat:?}");
    }

    proptest! {
        #[test]
        fn score_bound_holds(
            q in prop::collection::vec(-3.0f64..3.0, 4),
            keys in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 1..6),
            noise in prop::collection::vec(-2.0f64..2.0, 24),
        ) {
            let perturbed: Vec<Vec<f64>> = keys
                .iter()
                .enumerate()
                .map(|(j, k)| k.iter().enumerate().map(|(i, x)| x + noise[j * 4 + i]).collect())
                .collect();
            let inst = AttackInstance {
                step: 1, layer: 0, head: 0, query: q,
                values: keys.clone(), clean_keys: keys, perturbed_keys: perturbed,
            };
            prop_assert_ne!(verify_single_head(&inst).flag, BoundFlag::Violation);
        }
    }
}
