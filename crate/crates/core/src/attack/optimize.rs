//! Inner-loop adversarial perturbation search.
//!
//! Starting from `δ = 0`, each of the `K` iterations evaluates the objective
//! at the tentative key `k + δ`, estimates `∇_δ ℓ` and takes an ascent step.
//! The default update adds `η·proj_ε(g)`; the classic projected-ascent rule
//! is available through [`UpdateRule::ProjectIterate`]. Either way the
//! returned `δ` lies inside the ε-ball.

use super::{project_ball, AdvLoss, GradientMode, OptimizerConfig, UpdateRule};
use crate::cache::KVCache;
use crate::error::{invalid_arg, Error, Result};
use crate::linalg::{all_finite, axpy, log_softmax, softmax_unchecked};
use crate::model::{forward_peek, last_layer_key_gradient, KeyOverride, NoHook, Token, Weights};

/// A scalar function of a perturbation vector.
pub trait Objective {
    fn dim(&self) -> usize;

    fn value(&self, delta: &[f64]) -> Result<f64>;

    fn analytic_gradient(&self, _delta: &[f64]) -> Result<Vec<f64>> {
        Err(invalid_arg!("objective has no analytic gradient"))
    }
}

/// Closure-backed objective with an optional closed-form gradient.
pub struct FnObjective<F, G = fn(&[f64]) -> Vec<f64>> {
    pub dim: usize,
    pub f: F,
    pub grad: Option<G>,
}

impl<F: Fn(&[f64]) -> f64> FnObjective<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f, grad: None }
    }
}

impl<F, G> Objective for FnObjective<F, G>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, delta: &[f64]) -> Result<f64> {
        Ok((self.f)(delta))
    }

    fn analytic_gradient(&self, delta: &[f64]) -> Result<Vec<f64>> {
        self.grad
            .as_ref()
            .map(|g| g(delta))
            .ok_or_else(|| invalid_arg!("objective has no analytic gradient"))
    }
}

/// Central finite differences.
pub(crate) fn finite_difference<O: Objective + ?Sized>(obj: &O, delta: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut probe = delta.to_vec();
    let mut g = Vec::with_capacity(delta.len());
    for i in 0..delta.len() {
        let x = probe[i];
        probe[i] = x + h;
        let up = obj.value(&probe)?;
        probe[i] = x - h;
        let down = obj.value(&probe)?;
        probe[i] = x;
        g.push((up - down) / (2.0 * h));
    }
    Ok(g)
}

pub(crate) fn gradient<O: Objective + ?Sized>(obj: &O, delta: &[f64], mode: GradientMode) -> Result<Vec<f64>> {
    match mode {
        GradientMode::FiniteDifference { h } => finite_difference(obj, delta, h),
        GradientMode::AnalyticLastLayer => obj.analytic_gradient(delta),
    }
}

/// Runs the ascent loop on any objective.
pub fn ascend<O: Objective + ?Sized>(obj: &O, cfg: &OptimizerConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut delta = vec![0.0; obj.dim()];
    for iter in 0..cfg.steps {
        let loss = obj.value(&delta)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "adversarial loss {loss} at iteration {iter} (|δ| = {:.3e})",
                crate::linalg::norm2(&delta)
            )));
        }
        let g = gradient(obj, &delta, cfg.gradient)?;
        if !all_finite(&g) {
            return Err(Error::NonFinite(format!("gradient at iteration {iter}")));
        }
        match cfg.update {
            UpdateRule::ProjectGradient => {
                let step = project_ball(&g, cfg.epsilon)?;
                axpy(&mut delta, cfg.step_size, &step);
            }
            UpdateRule::ProjectIterate => {
                axpy(&mut delta, cfg.step_size, &g);
                delta = project_ball(&delta, cfg.epsilon)?;
            }
        }
    }
    project_ball(&delta, cfg.epsilon)
}

/// Where the optimized perturbation lands: key `pos` of `heads` at `layer`,
/// evaluated on the step that feeds `token`.
#[derive(Debug, Clone, Copy)]
pub struct OptimizationTarget<'a> {
    pub layer: usize,
    pub heads: &'a [usize],
    pub pos: usize,
    pub token: Token,
}

/// Adversarial loss of a key perturbation, read through the live cache via a
/// copy-on-read override (the cache itself is never modified).
pub struct CacheObjective<'a> {
    weights: &'a Weights,
    cache: &'a KVCache,
    target: OptimizationTarget<'a>,
    loss: AdvLoss,
    clean_probs: Option<Vec<f64>>,
}

impl<'a> CacheObjective<'a> {
    pub fn new(
        weights: &'a Weights,
        cache: &'a KVCache,
        target: OptimizationTarget<'a>,
        loss: AdvLoss,
    ) -> Result<Self> {
        if target.pos >= cache.len() {
            return Err(invalid_arg!("target position {} outside cache of {}", target.pos, cache.len()));
        }
        if target.heads.is_empty() || target.heads.iter().any(|h| *h >= cache.n_heads()) {
            return Err(invalid_arg!("bad head set {:?}", target.heads));
        }
        let clean_probs = match loss {
            AdvLoss::KlFromClean => {
                let out = forward_peek(weights, cache, target.token, None, &mut NoHook)?;
                Some(softmax_unchecked(&out.logits))
            }
            AdvLoss::TargetTokenLogProb(tok) => {
                if tok as usize >= weights.config.vocab {
                    return Err(invalid_arg!("target token {tok} outside vocabulary"));
                }
                None
            }
        };
        Ok(Self { weights, cache, target, loss, clean_probs })
    }

    fn eval(&self, delta: &[f64]) -> Result<crate::model::StepOutput> {
        let ov = KeyOverride {
            layer: self.target.layer,
            heads: self.target.heads,
            pos: self.target.pos,
            delta,
        };
        forward_peek(self.weights, self.cache, self.target.token, Some(ov), &mut NoHook)
    }

    fn loss_of(&self, logits: &[f64]) -> f64 {
        let logp = log_softmax(logits);
        match self.loss {
            AdvLoss::TargetTokenLogProb(tok) => logp[tok as usize],
            AdvLoss::KlFromClean => {
                let pc = self.clean_probs.as_ref().expect("clean distribution");
                pc.iter()
                    .zip(&logp)
                    .filter(|(p, _)| **p > 0.0)
                    .map(|(p, lq)| p * (p.ln() - lq))
                    .sum()
            }
        }
    }
}

impl Objective for CacheObjective<'_> {
    fn dim(&self) -> usize {
        self.cache.d_head()
    }

    fn value(&self, delta: &[f64]) -> Result<f64> {
        Ok(self.loss_of(&self.eval(delta)?.logits))
    }

    fn analytic_gradient(&self, delta: &[f64]) -> Result<Vec<f64>> {
        if self.target.layer + 1 != self.weights.config.n_layers {
            return Err(invalid_arg!(
                "analytic gradient only available at the last layer ({}), not {}",
                self.weights.config.n_layers - 1,
                self.target.layer
            ));
        }
        let out = self.eval(delta)?;
        let p = softmax_unchecked(&out.logits);
        let logit_grad: Vec<f64> = match self.loss {
            AdvLoss::TargetTokenLogProb(tok) => p
                .iter()
                .enumerate()
                .map(|(i, pi)| if i == tok as usize { 1.0 - pi } else { -pi })
                .collect(),
            AdvLoss::KlFromClean => {
                let pc = self.clean_probs.as_ref().expect("clean distribution");
                p.iter().zip(pc).map(|(a, b)| a - b).collect()
            }
        };
        last_layer_key_gradient(self.weights, self.cache, &out, self.target.heads, self.target.pos, &logit_grad)
    }
}

/// Optimizes one key perturbation against the live cache.
pub fn optimize_perturbation(
    weights: &Weights,
    cache: &KVCache,
    target: OptimizationTarget<'_>,
    cfg: &OptimizerConfig,
) -> Result<Vec<f64>> {
    let obj = CacheObjective::new(weights, cache, target, cfg.loss)?;
    ascend(&obj, cfg)
}
