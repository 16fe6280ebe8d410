//! Cache injection attacks: perturbation families, injection schedules,
//! target-position policies, the adaptive optimizer and the step-wise attack
//! loop.

mod optimize;
mod perturb;
mod run;
mod schedule;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub use optimize::{
    ascend, optimize_perturbation, CacheObjective, FnObjective, Objective, OptimizationTarget,
};
pub use perturb::{make_delta, project_ball};
pub use run::{inject_step, run_attack, AttackOutcome, Injection};
pub use schedule::{select_positions, should_inject};

use crate::cache::PerturbationKind;
use crate::error::{invalid_arg, Error, Result};
use crate::model::{ModelConfig, Token};

/// Perturbation family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Gaussian,
    Zeroing,
    Rotation,
    Optimized,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Gaussian, Family::Zeroing, Family::Rotation, Family::Optimized];

    pub fn kind(self) -> PerturbationKind {
        match self {
            Family::Gaussian => PerturbationKind::Gaussian,
            Family::Zeroing => PerturbationKind::Zeroing,
            Family::Rotation => PerturbationKind::Rotation,
            Family::Optimized => PerturbationKind::Optimized,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Zeroing => "zeroing",
            Family::Rotation => "rotation",
            Family::Optimized => "optimized",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| invalid_arg!("unknown attack family `{s}`"))
    }
}

/// How a rotation perturbation builds its orthogonal matrix.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationKind {
    /// Block-diagonal rotation of every consecutive coordinate pair.
    #[default]
    Givens,
    /// Rotation inside one seeded random 2-plane.
    RandomPlane,
}

/// When injections fire. Steps are 1-based.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    EveryStep,
    /// Fires when `t mod n == offset mod n`.
    EveryN { n: usize, offset: usize },
    OneShot(usize),
    /// Independent seeded coin per step.
    Bernoulli { p: f64, seed: u64 },
}

/// Which cached positions receive a perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionPolicy {
    LastM(usize),
    RandomK { k: usize, seed: u64 },
    /// Highest previous-step attention (averaged over heads at the lowest
    /// attacked layer), ties to the lowest position.
    TopAttention(usize),
}

/// Adversarial objective maximised by the optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdvLoss {
    /// `log p(token)` of the next-token distribution.
    TargetTokenLogProb(Token),
    /// KL(clean ‖ attacked) of the next-token distribution.
    KlFromClean,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradientMode {
    /// Central differences with step `h`.
    FiniteDifference { h: f64 },
    /// Closed-form softmax-attention gradient; only valid at the last layer.
    AnalyticLastLayer,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    /// `δ ← δ + η·proj_ε(g)`.
    #[default]
    ProjectGradient,
    /// `δ ← proj_ε(δ + η·g)` (classic projected gradient ascent).
    ProjectIterate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub steps: usize,
    pub step_size: f64,
    pub loss: AdvLoss,
    pub epsilon: f64,
    pub gradient: GradientMode,
    pub update: UpdateRule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            step_size: 0.2,
            loss: AdvLoss::KlFromClean,
            epsilon: 1.0,
            gradient: GradientMode::FiniteDifference { h: 1e-4 },
            update: UpdateRule::ProjectGradient,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(invalid_arg!("optimizer steps must be >= 1"));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(invalid_arg!("optimizer epsilon must be > 0"));
        }
        if !(self.step_size >= 0.0) || !self.step_size.is_finite() {
            return Err(invalid_arg!("optimizer step size must be finite and >= 0"));
        }
        if let GradientMode::FiniteDifference { h } = self.gradient {
            if !(h > 0.0) {
                return Err(invalid_arg!("finite-difference step must be > 0"));
            }
        }
        Ok(())
    }
}

/// Full attack description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub family: Family,
    pub sigma: f64,
    /// Degrees.
    pub theta: f64,
    pub r: f64,
    pub rotation: RotationKind,
    pub schedule: Schedule,
    /// 0-based layer indices.
    pub layers: Vec<usize>,
    pub policy: PositionPolicy,
    pub per_head: bool,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            family: Family::Gaussian,
            sigma: 0.1,
            theta: 45.0,
            r: 1.0,
            rotation: RotationKind::Givens,
            schedule: Schedule::EveryStep,
            layers: vec![1],
            policy: PositionPolicy::LastM(4),
            per_head: true,
            seed: 0,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl AttackConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(invalid_arg!("sigma must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.r) {
            return Err(invalid_arg!("r must lie in [0, 1]"));
        }
        if !self.theta.is_finite() {
            return Err(invalid_arg!("theta must be finite"));
        }
        if let Some(l) = self.layers.iter().find(|l| **l >= model.n_layers) {
            return Err(invalid_arg!("layer {l} outside model with {} layers", model.n_layers));
        }
        if self.family == Family::Rotation
            && self.rotation == RotationKind::Givens
            && !model.d_head().is_multiple_of(2)
        {
            return Err(invalid_arg!("givens rotation needs an even head dimension"));
        }
        self.schedule.validate()?;
        self.policy.validate()?;
        if self.family == Family::Optimized {
            self.optimizer.validate()?;
        }
        Ok(())
    }

    /// Attacked layers, sorted and de-duplicated.
    pub fn layer_set(&self) -> Vec<usize> {
        let mut l = self.layers.clone();
        l.sort_unstable();
        l.dedup();
        l
    }

    /// The family's magnitude parameter (σ, r, θ or ε).
    pub fn magnitude(&self) -> f64 {
        match self.family {
            Family::Gaussian => self.sigma,
            Family::Zeroing => self.r,
            Family::Rotation => self.theta,
            Family::Optimized => self.optimizer.epsilon,
        }
    }

    pub fn set_magnitude(&mut self, m: f64) {
        match self.family {
            Family::Gaussian => self.sigma = m,
            Family::Zeroing => self.r = m,
            Family::Rotation => self.theta = m,
            Family::Optimized => self.optimizer.epsilon = m,
        }
    }
}

// ── Text forms ──────────────────────────────────────────────────────────────
//
// Schedules, policies, losses and gradient modes are written as compact
// strings in config files: `every_n:5`, `last_m:4`, `target_token:65`, …

fn split_args(s: &str) -> (&str, Vec<&str>) {
    let mut it = s.split(':');
    let head = it.next().unwrap_or_default().trim();
    (head, it.map(str::trim).collect())
}

fn parse_num<T: FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse().map_err(|_| invalid_arg!("bad {what} `{s}`"))
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Schedule::EveryN { n, .. } if n == 0 => Err(invalid_arg!("every_n needs n >= 1")),
            Schedule::OneShot(0) => Err(invalid_arg!("one_shot step is 1-based")),
            Schedule::Bernoulli { p, .. } if !(0.0..=1.0).contains(&p) => {
                Err(invalid_arg!("bernoulli p must lie in [0, 1]"))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Schedule::EveryStep => write!(f, "every_step"),
            Schedule::EveryN { n, offset: 0 } => write!(f, "every_n:{n}"),
            Schedule::EveryN { n, offset } => write!(f, "every_n:{n}:{offset}"),
            Schedule::OneShot(t) => write!(f, "one_shot:{t}"),
            Schedule::Bernoulli { p, seed } => write!(f, "bernoulli:{p}:{seed}"),
        }
    }
}

impl FromStr for Schedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (head, args) = split_args(s);
        let sched = match (head, args.as_slice()) {
            ("every_step", []) => Schedule::EveryStep,
            ("every_n", [n]) => Schedule::EveryN { n: parse_num(n, "period")?, offset: 0 },
            ("every_n", [n, o]) => {
                Schedule::EveryN { n: parse_num(n, "period")?, offset: parse_num(o, "offset")? }
            }
            ("one_shot", [t]) => Schedule::OneShot(parse_num(t, "step")?),
            ("bernoulli", [p]) => Schedule::Bernoulli { p: parse_num(p, "probability")?, seed: 0 },
            ("bernoulli", [p, seed]) => {
                Schedule::Bernoulli { p: parse_num(p, "probability")?, seed: parse_num(seed, "seed")? }
            }
            _ => return Err(invalid_arg!("unknown schedule `{s}`")),
        };
        sched.validate()?;
        Ok(sched)
    }
}

impl PositionPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PositionPolicy::LastM(0) | PositionPolicy::RandomK { k: 0, .. } | PositionPolicy::TopAttention(0) => {
                Err(invalid_arg!("position policy count must be >= 1"))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for PositionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PositionPolicy::LastM(m) => write!(f, "last_m:{m}"),
            PositionPolicy::RandomK { k, seed } => write!(f, "random_k:{k}:{seed}"),
            PositionPolicy::TopAttention(k) => write!(f, "top_attention:{k}"),
        }
    }
}

impl FromStr for PositionPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (head, args) = split_args(s);
        let p = match (head, args.as_slice()) {
            ("last_m", [m]) => PositionPolicy::LastM(parse_num(m, "count")?),
            ("random_k", [k]) => PositionPolicy::RandomK { k: parse_num(k, "count")?, seed: 0 },
            ("random_k", [k, seed]) => {
                PositionPolicy::RandomK { k: parse_num(k, "count")?, seed: parse_num(seed, "seed")? }
            }
            ("top_attention", [k]) => PositionPolicy::TopAttention(parse_num(k, "count")?),
            _ => return Err(invalid_arg!("unknown position policy `{s}`")),
        };
        p.validate()?;
        Ok(p)
    }
}

impl fmt::Display for AdvLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AdvLoss::TargetTokenLogProb(t) => write!(f, "target_token:{t}"),
            AdvLoss::KlFromClean => write!(f, "kl_from_clean"),
        }
    }
}

impl FromStr for AdvLoss {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match split_args(s) {
            ("target_token", a) if a.len() == 1 => Ok(AdvLoss::TargetTokenLogProb(parse_num(a[0], "token")?)),
            ("kl_from_clean", a) if a.is_empty() => Ok(AdvLoss::KlFromClean),
            _ => Err(invalid_arg!("unknown adversarial loss `{s}`")),
        }
    }
}

impl fmt::Display for GradientMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GradientMode::FiniteDifference { h } => write!(f, "finite_difference:{h}"),
            GradientMode::AnalyticLastLayer => write!(f, "analytic"),
        }
    }
}

impl FromStr for GradientMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match split_args(s) {
            ("finite_difference", a) if a.is_empty() => Ok(GradientMode::FiniteDifference { h: 1e-4 }),
            ("finite_difference", a) if a.len() == 1 => {
                Ok(GradientMode::FiniteDifference { h: parse_num(a[0], "step")? })
            }
            ("analytic", a) if a.is_empty() => Ok(GradientMode::AnalyticLastLayer),
            _ => Err(invalid_arg!("unknown gradient mode `{s}`")),
        }
    }
}

macro_rules! serde_via_str {
    ($($ty:ty),*) => {$(
        impl Serialize for $ty {
            fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                s.collect_str(self)
            }
        }
        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    )*};
}

serde_via_str!(Schedule, PositionPolicy, AdvLoss, GradientMode);

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn text_forms_parse() {
        assert_eq!("every_n:5".parse::<Schedule>().unwrap(), Schedule::EveryN { n: 5, offset: 0 });
        assert_eq!("one_shot:3".parse::<Schedule>().unwrap(), Schedule::OneShot(3));
        assert!("every_n:0".parse::<Schedule>().is_err());
        assert!("bernoulli:1.5".parse::<Schedule>().is_err());
        assert_eq!("top_attention:2".parse::<PositionPolicy>().unwrap(), PositionPolicy::TopAttention(2));
        assert!("last_m:0".parse::<PositionPolicy>().is_err());
        assert_eq!("target_token:65".parse::<AdvLoss>().unwrap(), AdvLoss::TargetTokenLogProb(65));
        assert_eq!("analytic".parse::<GradientMode>().unwrap(), GradientMode::AnalyticLastLayer);
        assert!("whatever".parse::<Family>().is_err());
    }

    #[test]
    fn validation() {
        let m = ModelConfig::default();
        assert!(AttackConfig::default().validate(&m).is_ok());
        assert!(AttackConfig { r: 1.5, ..Default::default() }.validate(&m).is_err());
        assert!(AttackConfig { sigma: -0.1, ..Default::default() }.validate(&m).is_err());
        assert!(AttackConfig { layers: vec![4], ..Default::default() }.validate(&m).is_err());
        let mut opt = AttackConfig { family: Family::Optimized, ..Default::default() };
        opt.optimizer.epsilon = 0.0;
        assert!(opt.validate(&m).is_err());
    }

    proptest! {
        #[test]
        fn schedule_text_round_trips(n in 1usize..50, off in 0usize..50, t in 1usize..500, p in 0.0f64..=1.0, seed: u64) {
            for s in [Schedule::EveryStep, Schedule::EveryN { n, offset: off }, Schedule::OneShot(t), Schedule::Bernoulli { p, seed }] {
                prop_assert_eq!(s.to_string().parse::<Schedule>().unwrap(), s);
            }
        }

        #[test]
        fn policy_text_round_trips(k in 1usize..64, seed: u64) {
            for p in [PositionPolicy::LastM(k), PositionPolicy::RandomK { k, seed }, PositionPolicy::TopAttention(k)] {
                prop_assert_eq!(p.to_string().parse::<PositionPolicy>().unwrap(), p);
            }
        }
    }
}
