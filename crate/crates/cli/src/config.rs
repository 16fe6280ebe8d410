//! Experiment configuration files.
//!
//! Configs are sectioned `key = value` text (TOML); a document starting
//! with `{` is read as JSON instead. Unknown keys are rejected. Every field
//! has a default, so an empty file is a valid clean run of the default toy
//! model.
//!
//! ```toml
//! name = "gaussian-mid"
//! seed = 0
//! steps = 32
//! repetitions = 1
//! decode = "greedy"            # or "sampled:SEED"
//!
//! [model]
//! n_layers = 4
//! n_heads = 4
//! d_model = 64
//!
//! [prompt]
//! random_len = 16              # or: text = "The cache ..."
//!
//! [attack]
//! family = "gaussian"          # gaussian | zeroing | rotation | optimized
//! sigma = 0.1
//! schedule = "every_step"      # every_n:N[:OFFSET] | one_shot:T | bernoulli:P[:SEED]
//! layers = [1]
//! policy = "last_m:4"          # random_k:K[:SEED] | top_attention:K
//!
//! [defense]
//! method = "cache_reset:1"     # dropout:P[:SEED] | smoothing:BETA | none
//! target_layers = [1]
//!
//! [sweep]
//! layers = [[0], [1], [3]]
//! magnitudes = [0.01, 0.05, 0.1, 0.2]
//! seeds = [0, 1, 2]
//! ```

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use kvlab::attack::{AttackConfig, Family, Schedule};
use kvlab::defense::DefenseConfig;
use kvlab::linalg::SeededRng;
use kvlab::model::{tokens_from_bytes, DecodeMode, ModelConfig, Token};
use serde::{Deserialize, Serialize};

/// A configuration problem, with its location when known.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn bad(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

/// `greedy` or `sampled:SEED`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Decode(pub DecodeMode);

impl TryFrom<String> for Decode {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        match s.split_once(':') {
            None if s == "greedy" => Ok(Decode(DecodeMode::Greedy)),
            Some(("sampled", seed)) => seed
                .parse()
                .map(|seed| Decode(DecodeMode::Sampled { seed }))
                .map_err(|_| format!("bad sampling seed `{seed}`")),
            _ => Err(format!("unknown decode mode `{s}` (expected greedy or sampled:SEED)")),
        }
    }
}

impl From<Decode> for String {
    fn from(d: Decode) -> String {
        match d.0 {
            DecodeMode::Greedy => "greedy".into(),
            DecodeMode::Sampled { seed } => format!("sampled:{seed}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSpec {
    /// Literal prompt; its bytes are the tokens.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    /// Seeded random prompt of this many tokens (default 16).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random_len: Option<usize>,
}

pub const DEFAULT_PROMPT_LEN: usize = 16;

impl PromptSpec {
    pub fn len(&self) -> usize {
        match (&self.text, self.random_len) {
            (Some(t), _) => t.len(),
            (None, n) => n.unwrap_or(DEFAULT_PROMPT_LEN),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Prompt tokens for repetition `rep` of an experiment seeded with `seed`.
    pub fn tokens(&self, vocab: usize, seed: u64, rep: usize) -> Vec<Token> {
        match &self.text {
            Some(t) => tokens_from_bytes(t.as_bytes()),
            None => {
                let mut rng = SeededRng::stream(seed, &[0x7072_6f6d_7074, rep as u64]);
                (0..self.len()).map(|_| rng.below(vocab) as Token).collect()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

impl Format {
    pub fn ext(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSpec {
    pub format: Format,
    /// Write the score-bound report for attacked runs.
    pub bounds: bool,
    /// Timed repetitions behind the defense overhead factor (at least 5).
    pub timing_reps: usize,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self { format: Format::Csv, bounds: true, timing_reps: 5 }
    }
}

/// Ablation grid. Empty axes inherit the base attack's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    pub families: Vec<Family>,
    pub layers: Vec<Vec<usize>>,
    /// σ, r, θ or ε depending on the family.
    pub magnitudes: Vec<f64>,
    pub schedules: Vec<Schedule>,
    pub seeds: Vec<u64>,
}

/// One grid point of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub attack: AttackConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default)]
    pub decode: Decode,
    /// Binary weight file to load instead of seeded initialisation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub prompt: PromptSpec,
    #[serde(default)]
    pub output: OutputSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub defense: Option<DefenseConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
}

fn default_steps() -> usize {
    32
}

fn default_repetitions() -> usize {
    1
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        parse_config("").expect("empty config is valid")
    }
}

/// Parses and validates a config document.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let cfg: ExperimentConfig = if text.trim_start().starts_with('{') {
        serde_json::from_str(text).map_err(|e| bad(format!("invalid JSON config: {e}")))?
    } else {
        toml::from_str(text).map_err(|e| bad(format!("invalid config: {}", e.to_string().trim_end())))?
    };
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let m = &self.model;
        m.validate().map_err(|e| bad(format!("[model]: {e}")))?;
        if self.repetitions == 0 {
            return Err(bad("repetitions must be >= 1"));
        }
        if let (Some(_), Some(_)) = (&self.prompt.text, self.prompt.random_len) {
            return Err(bad("[prompt]: give either `text` or `random_len`, not both"));
        }
        if self.prompt.is_empty() {
            return Err(bad("[prompt]: prompt must be non-empty"));
        }
        if let Some(t) = &self.prompt.text {
            if let Some(b) = t.bytes().find(|b| usize::from(*b) >= m.vocab) {
                return Err(bad(format!("[prompt]: byte {b} outside vocabulary of {}", m.vocab)));
            }
        }
        let slots = self.prompt.len() + self.steps - 1;
        if slots > m.max_seq {
            return Err(bad(format!(
                "prompt ({}) + steps ({}) needs {slots} cache slots, max_seq is {}",
                self.prompt.len(),
                self.steps,
                m.max_seq
            )));
        }
        if let Some(a) = &self.attack {
            a.validate(m).map_err(|e| bad(format!("[attack]: {e}")))?;
        }
        if let Some(d) = &self.defense {
            d.validate(m.n_layers).map_err(|e| bad(format!("[defense]: {e}")))?;
        }
        if let Some(s) = &self.sweep {
            if self.attack.is_none() {
                return Err(bad("[sweep] needs an [attack] section as the base of the grid"));
            }
            for cell in self.sweep_cells(s) {
                cell.attack.validate(m).map_err(|e| bad(format!("[sweep]: {e}")))?;
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Cartesian product of the sweep axes, in file order with the
    /// last axis varying fastest: family, layers, magnitude, schedule, seed.
    pub fn sweep_cells(&self, spec: &SweepSpec) -> Vec<SweepCell> {
        let base = self.attack.clone().unwrap_or_default();
        let or = |v: &[Family]| if v.is_empty() { vec![base.family] } else { v.to_vec() };
        let families = or(&spec.families);
        let layers = if spec.layers.is_empty() { vec![base.layers.clone()] } else { spec.layers.clone() };
        let schedules = if spec.schedules.is_empty() { vec![base.schedule] } else { spec.schedules.clone() };
        let seeds = if spec.seeds.is_empty() { vec![self.seed] } else { spec.seeds.clone() };
        let mut cells = Vec::new();
        for family in &families {
            let mut fam_base = base.clone();
            fam_base.family = *family;
            let mags = if spec.magnitudes.is_empty() { vec![fam_base.magnitude()] } else { spec.magnitudes.clone() };
            for l in &layers {
                for m in &mags {
                    for s in &schedules {
                        for seed in &seeds {
                            let mut attack = fam_base.clone();
                            attack.layers = l.clone();
                            attack.set_magnitude(*m);
                            attack.schedule = *s;
                            cells.push(SweepCell { attack, seed: *seed });
                        }
                    }
                }
            }
        }
        cells
    }
}

/// Seed of repetition `rep` derived from a base seed and the experiment seed.
/// `derive_seed(b, 0, 0) == b`.
pub fn derive_seed(base: u64, experiment_seed: u64, rep: usize) -> u64 {
    base.wrapping_add(experiment_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add((rep as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9))
}

// ── Presets ─────────────────────────────────────────────────────────────────

pub const PRESETS: &[(&str, &str)] = &[
    ("gaussian-mid", include_str!("../presets/gaussian-mid.toml")),
    ("zeroing-late", include_str!("../presets/zeroing-late.toml")),
    ("rotation-early", include_str!("../presets/rotation-early.toml")),
    ("magnitude-grid", include_str!("../presets/magnitude-grid.toml")),
    ("frequency", include_str!("../presets/frequency.toml")),
    ("joint-ablation", include_str!("../presets/joint-ablation.toml")),
    ("defenses", include_str!("../presets/defenses.toml")),
];

pub fn preset(name: &str) -> Result<ExperimentConfig, ConfigError> {
    let (_, text) = PRESETS.iter().find(|(n, _)| *n == name).ok_or_else(|| {
        let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
        bad(format!("unknown preset `{name}` (available: {})", names.join(", ")))
    })?;
    parse_config(text).map_err(|e| bad(format!("preset `{name}`: {e}")))
}

impl FromStr for ExperimentConfig {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, ConfigError> {
        parse_config(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use kvlab::attack::PositionPolicy;

    #[test]
    fn empty_config_fills_defaults() {
        let c = parse_config("").unwrap();
        assert_eq!(c.steps, 32);
        assert_eq!(c.repetitions, 1);
        assert_eq!(c.model, ModelConfig::default());
        assert_eq!(c.prompt.len(), DEFAULT_PROMPT_LEN);
        assert!(c.attack.is_none() && c.defense.is_none() && c.sweep.is_none());
    }

    #[test]
    fn unknown_key_is_named_with_line() {
        let err = parse_config("steps = 4\n\n[attack]\nfamily = \"gaussian\"\nsigmaa = 0.3\n").unwrap_err();
        assert!(err.0.contains("sigmaa"), "{err}");
        assert!(err.0.contains("line 5"), "{err}");
        let err = parse_config("stepz = 4\n").unwrap_err();
        assert!(err.0.contains("stepz") && err.0.contains("line 1"), "{err}");
    }

    #[test]
    fn semantic_errors() {
        assert!(parse_config("repetitions = 0").is_err());
        assert!(parse_config("[attack]\nlayers = [9]").unwrap_err().0.contains("[attack]"));
        assert!(parse_config("[prompt]\ntext = \"a\"\nrandom_len = 3").is_err());
        assert!(parse_config("steps = 500").is_err());
        assert!(parse_config("[attack]\nschedule = \"every_n:0\"").is_err());
        assert!(parse_config("[sweep]\nmagnitudes = [0.1]").is_err());
        assert!(parse_config("decode = \"beam\"").is_err());
    }

    #[test]
    fn round_trip_and_json() {
        let text = "name = \"x\"\nseed = 3\ndecode = \"sampled:9\"\n[prompt]\ntext = \"hello\"\n[attack]\nfamily = \"rotation\"\ntheta = 90.0\npolicy = \"random_k:2:5\"\nlayers = [0, 2]\n[attack.optimizer]\nloss = \"target_token:65\"\n[defense]\nmethod = \"smoothing:0.5\"\n[sweep]\nlayers = [[0], [1]]\nseeds = [1, 2]\n";
        let c = parse_config(text).unwrap();
        assert_eq!(c.attack.as_ref().unwrap().policy, PositionPolicy::RandomK { k: 2, seed: 5 });
        assert_eq!(c.decode.0, DecodeMode::Sampled { seed: 9 });
        let back = parse_config(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(parse_config(&json).unwrap(), c);
    }

    #[test]
    fn sweep_cardinality() {
        let c = parse_config(
            "[attack]\nfamily = \"gaussian\"\n[sweep]\nlayers = [[0], [1], [3]]\nmagnitudes = [0.01, 0.05, 0.1, 0.2]\nseeds = [0, 1, 2]\n",
        )
        .unwrap();
        let cells = c.sweep_cells(c.sweep.as_ref().unwrap());
        assert_eq!(cells.len(), 36);
        assert_eq!(cells[1].seed, 1);
        assert_eq!(cells[3].attack.sigma, 0.05);
        assert_eq!(cells[12].attack.layers, vec![1]);
    }

    #[test]
    fn presets_parse() {
        for (name, _) in PRESETS {
            preset(name).unwrap();
        }
        let g = preset("gaussian-mid").unwrap();
        let a = g.attack.unwrap();
        assert_eq!((a.family, a.sigma, a.schedule, a.layers), (Family::Gaussian, 0.1, Schedule::EveryStep, vec![1]));
        assert!(preset("nope").is_err());
    }

    #[test]
    fn derived_seeds() {
        assert_eq!(derive_seed(42, 0, 0), 42);
        assert_ne!(derive_seed(42, 0, 1), 42);
        assert_ne!(derive_seed(42, 1, 0), derive_seed(42, 0, 1));
    }
}
