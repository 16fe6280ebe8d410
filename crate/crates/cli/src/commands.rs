//! Subcommand implementations. Each writes its artifacts under an output
//! directory and returns a small report for the caller to print.
//!
//! Wall-clock measurements go under `timing/`; everything else is a pure
//! function of the config and seed, so reruns can be compared by hashing
//! the rest of the directory.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use kvlab::attack::AttackConfig;
use kvlab::cache::{KVCache, TraceLog};
use kvlab::defense::{run_defended, DefenseRow, OverheadTiming, DEFENSE_CSV_HEADER};
use kvlab::exec::map_indexed;
use kvlab::metrics::{summarize, RunSummary, StepMetrics};
use kvlab::model::{init_weights, read_weights, write_weights, DecodeMode, Token, Weights};
use kvlab::pipeline::{execute, Feed, RunOptions, RunRecord};
use kvlab::theory::{
    ln_lipschitz_probe_with, multi_head_campaign, single_head_campaign, BoundFlag, BoundReport, BoundRow,
    CampaignConfig, MultiHeadCheck, ProbeConfig, ProbeReport,
};
use serde::Serialize;

use crate::config::{derive_seed, ConfigError, ExperimentConfig, Format};

/// Sweep rows computed between flushes.
const SWEEP_CHUNK: usize = 8;

fn write_file(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

/// Subdirectory holding the only non-reproducible artifacts.
pub const TIMING_DIR: &str = "timing";

fn write_timing(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
    let t = dir.join(TIMING_DIR);
    ensure_dir(&t)?;
    write_file(&t, name, contents)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn json<T: Serialize + ?Sized>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

/// Weights named by the config, or seeded initialisation of its model.
/// A weight file replaces the `[model]` section and the config is
/// re-validated against it.
pub fn load_weights(cfg: &mut ExperimentConfig) -> Result<Weights> {
    match &cfg.weights {
        Some(path) => {
            let bytes = fs::read(path).with_context(|| format!("reading weights {}", path.display()))?;
            let w = read_weights(&bytes).with_context(|| format!("decoding weights {}", path.display()))?;
            cfg.model = w.config.clone();
            cfg.validate()?;
            Ok(w)
        }
        None => Ok(init_weights(&cfg.model)?),
    }
}

/// Inputs of one repetition.
#[derive(Debug, Clone)]
pub struct RepSetup {
    pub rep: usize,
    pub prompt: Vec<Token>,
    pub mode: DecodeMode,
    pub attack: Option<AttackConfig>,
}

/// Seeds of repetition `rep`: the experiment seed moves the attack,
/// dropout, sampling and prompt streams together.
pub fn rep_setup(cfg: &ExperimentConfig, attack: Option<&AttackConfig>, seed: u64, rep: usize) -> RepSetup {
    let mode = match cfg.decode.0 {
        DecodeMode::Sampled { seed: s } => DecodeMode::Sampled { seed: derive_seed(s, seed, rep) },
        m => m,
    };
    let attack = attack.map(|a| AttackConfig { seed: derive_seed(a.seed, seed, rep), ..a.clone() });
    RepSetup { rep, prompt: cfg.prompt.tokens(cfg.model.vocab, seed, rep), mode, attack }
}

/// Clean free run and the teacher-forced attacked run over its tokens.
pub fn paired_runs(
    weights: &Weights,
    setup: &RepSetup,
    steps: usize,
    collect_bounds: bool,
) -> Result<(RunRecord, RunRecord)> {
    let clean = execute(
        weights,
        Feed::Free { prompt: &setup.prompt, steps, mode: setup.mode },
        &RunOptions::default(),
    )?;
    let attacked = match &setup.attack {
        Some(a) => execute(
            weights,
            Feed::Forced(&clean.tokens),
            &RunOptions { attack: Some(a), defense: None, collect_bounds },
        )?,
        None => clean.clone(),
    };
    Ok((clean, attacked))
}

// ── run ─────────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub rep: usize,
    pub attack_seed: Option<u64>,
    #[serde(flatten)]
    pub summary: RunSummary,
}

const SUMMARY_CSV_HEADER: &str = "rep,attack_seed,steps,mean_kl,max_kl,perplexity_clean,perplexity_attacked,\
perplexity_change_pct,top1_flip_rate,mean_attention_shift,shift_bound_violations,injections,mean_delta_norm,max_delta_norm";

impl SummaryRow {
    fn csv_line(&self) -> String {
        let s = &self.summary;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.rep,
            self.attack_seed.map(|x| x.to_string()).unwrap_or_default(),
            s.steps,
            s.mean_kl,
            s.max_kl,
            s.perplexity_clean,
            s.perplexity_attacked,
            s.perplexity_change_pct,
            s.top1_flip_rate,
            s.mean_attention_shift,
            s.shift_bound_violations,
            s.injections,
            s.mean_delta_norm,
            s.max_delta_norm
        )
    }
}

#[derive(Debug, Clone, Serialize)]
struct TokenRow {
    rep: usize,
    prompt: Vec<Token>,
    clean: Vec<Token>,
    attacked: Vec<Token>,
}

#[derive(Debug, Default, Serialize)]
struct RunTiming {
    run_ms: Vec<f64>,
    defense: Vec<OverheadTiming>,
}

/// Outcome of `run`.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub summaries: Vec<SummaryRow>,
    pub bound_rows: usize,
    pub bound_violations: usize,
    pub defense: Vec<DefenseRow>,
    pub files: Vec<PathBuf>,
}

fn trace_csv(trace: &TraceLog) -> String {
    let mut s = String::from("t,layer,head,pos,target,type,delta_norm\n");
    for r in trace.records() {
        let target = serde_json::to_value(r.target).expect("enum serializes");
        let kind = serde_json::to_value(r.kind).expect("enum serializes");
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.step,
            r.layer,
            r.head,
            r.pos,
            target.as_str().unwrap_or_default(),
            kind.as_str().unwrap_or_default(),
            r.delta_norm
        )
        .unwrap();
    }
    s
}

/// Clean shadow, attacked and (when configured) defended runs for every
/// repetition, with their reports.
pub fn cmd_run(mut cfg: ExperimentConfig, out: &Path) -> Result<RunReport> {
    let weights = load_weights(&mut cfg)?;
    ensure_dir(out)?;
    let fmt = cfg.output.format;
    let mut files = vec![write_file(out, "config.toml", cfg.to_toml())?];
    let mut summaries = Vec::new();
    let mut tokens = Vec::new();
    let mut bounds = BoundReport::default();
    let mut defense_rows = Vec::new();
    let mut timing = RunTiming::default();
    let model_label = weights.config.label();

    for rep in 0..cfg.repetitions {
        let t0 = Instant::now();
        let setup = rep_setup(&cfg, cfg.attack.as_ref(), cfg.seed, rep);
        let collect = cfg.output.bounds && setup.attack.is_some();
        let (clean, attacked) = paired_runs(&weights, &setup, cfg.steps, collect)?;
        let focus = setup.attack.as_ref().map(|a| a.layer_set()).unwrap_or_default();
        let (steps, summary) = summarize(&clean, &attacked, &focus)?;
        let free = match &setup.attack {
            Some(a) => execute(
                &weights,
                Feed::Free { prompt: &setup.prompt, steps: cfg.steps, mode: setup.mode },
                &RunOptions { attack: Some(a), ..Default::default() },
            )?,
            None => clean.clone(),
        };
        timing.run_ms.push(t0.elapsed().as_secs_f64() * 1e3);
        bounds.rows.extend(BoundReport::from_instances(&attacked.instances).rows);

        files.push(match fmt {
            Format::Csv => write_file(out, &format!("trace-r{rep}.csv"), trace_csv(&attacked.trace))?,
            Format::Json => write_file(out, &format!("trace-r{rep}.json"), json(&attacked.trace))?,
        });
        files.push(write_file(out, &format!("steps-r{rep}.jsonl"), steps_jsonl(&steps))?);

        if let Some(defense) = &cfg.defense {
            let mut d = defense.clone();
            if let kvlab::defense::DefenseMethod::DropoutMask { p, seed } = d.method {
                d.method = kvlab::defense::DefenseMethod::DropoutMask { p, seed: derive_seed(seed, cfg.seed, rep) };
            }
            let outcome = run_defended(
                &weights,
                &setup.prompt,
                cfg.steps,
                setup.mode,
                setup.attack.as_ref(),
                &d,
                cfg.output.timing_reps,
            )?;
            defense_rows.push(DefenseRow::new(&model_label, &d, setup.attack.as_ref(), &outcome));
            timing.defense.push(outcome.timing);
        }

        tokens.push(TokenRow { rep, prompt: setup.prompt.clone(), clean: clean.tokens, attacked: free.tokens });
        summaries.push(SummaryRow { rep, attack_seed: setup.attack.as_ref().map(|a| a.seed), summary });
    }

    files.push(match fmt {
        Format::Csv => {
            let mut s = format!("{SUMMARY_CSV_HEADER}\n");
            for r in &summaries {
                s.push_str(&r.csv_line());
                s.push('\n');
            }
            write_file(out, "summary.csv", s)?
        }
        Format::Json => write_file(out, "summary.json", json(&summaries))?,
    });
    files.push(write_file(out, "tokens.json", json(&tokens))?);
    if cfg.output.bounds && cfg.attack.is_some() {
        files.push(write_bounds(out, fmt, &bounds)?);
    }
    if !defense_rows.is_empty() {
        files.extend(write_defense(out, fmt, &defense_rows)?);
    }
    files.push(write_timing(out, "run.json", json(&timing))?);

    Ok(RunReport {
        summaries,
        bound_rows: bounds.rows.len(),
        bound_violations: bounds.violations(),
        defense: defense_rows,
        files,
    })
}

fn steps_jsonl(steps: &[StepMetrics]) -> String {
    steps.iter().map(|s| s.json_line() + "\n").collect()
}

fn write_bounds(out: &Path, fmt: Format, report: &BoundReport) -> Result<PathBuf> {
    match fmt {
        Format::Csv => write_file(out, "bounds.csv", report.to_csv()),
        Format::Json => write_file(out, "bounds.json", json(&report.rows)),
    }
}

/// Defense rows with their measured overhead factor go to
/// `timing/defense.csv`; the reproducible `defense.csv` leaves that column
/// empty.
fn write_defense(out: &Path, fmt: Format, rows: &[DefenseRow]) -> Result<Vec<PathBuf>> {
    let mut timed = format!("{DEFENSE_CSV_HEADER}\n");
    for r in rows {
        timed.push_str(&r.csv_line());
        timed.push('\n');
    }
    let stable = match fmt {
        Format::Csv => {
            let mut s = format!("{DEFENSE_CSV_HEADER}\n");
            for r in rows {
                let line = r.csv_line();
                let cut = line.rfind(',').expect("csv line has columns");
                s.push_str(&line[..=cut]);
                s.push('\n');
            }
            write_file(out, "defense.csv", s)?
        }
        Format::Json => {
            let v: Vec<_> = rows
                .iter()
                .map(|r| {
                    serde_json::json!({
                        "model": r.model, "defense": r.defense, "attack": r.attack,
                        "metric_value": r.metric_value, "degradation": r.degradation, "overhead": null,
                    })
                })
                .collect();
            write_file(out, "defense.json", json(&v))?
        }
    };
    Ok(vec![stable, write_timing(out, "defense.csv", timed)?])
}

// ── sweep ───────────────────────────────────────────────────────────────────

pub const SWEEP_CSV_HEADER: &str = "cell,family,layers,magnitude,schedule,seed,rep,steps,kl_mean,kl_std,\
flip_mean,flip_std,att_shift_mean,att_shift_std,perplexity_change_pct,injections";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub cell: usize,
    pub family: String,
    pub layers: String,
    pub magnitude: f64,
    pub schedule: String,
    pub seed: u64,
    pub rep: usize,
    pub steps: usize,
    pub kl_mean: f64,
    pub kl_std: f64,
    pub flip_mean: f64,
    pub flip_std: f64,
    pub att_shift_mean: f64,
    pub att_shift_std: f64,
    pub perplexity_change_pct: f64,
    pub injections: usize,
}

impl SweepRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.cell,
            self.family,
            self.layers,
            self.magnitude,
            self.schedule,
            self.seed,
            self.rep,
            self.steps,
            self.kl_mean,
            self.kl_std,
            self.flip_mean,
            self.flip_std,
            self.att_shift_mean,
            self.att_shift_std,
            self.perplexity_change_pct,
            self.injections
        )
    }
}

/// Mean and population standard deviation.
fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    let var = xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub rows: usize,
    pub path: PathBuf,
}

/// Every grid cell × repetition, one row each. Rows are computed in
/// parallel chunks and appended in grid order after each chunk.
pub fn cmd_sweep(mut cfg: ExperimentConfig, out: &Path) -> Result<SweepReport> {
    let spec = cfg
        .sweep
        .clone()
        .ok_or_else(|| ConfigError("sweep needs a [sweep] section".into()))?;
    let weights = load_weights(&mut cfg)?;
    ensure_dir(out)?;
    write_file(out, "config.toml", cfg.to_toml())?;
    let cells = cfg.sweep_cells(&spec);
    let reps = cfg.repetitions;
    let total = cells.len() * reps;
    let t0 = Instant::now();

    let path = out.join(match cfg.output.format {
        Format::Csv => "sweep.csv",
        Format::Json => "sweep.jsonl",
    });
    let mut w = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
    if cfg.output.format == Format::Csv {
        writeln!(w, "{SWEEP_CSV_HEADER}")?;
    }
    let mut written = 0;
    for start in (0..total).step_by(SWEEP_CHUNK) {
        let n = SWEEP_CHUNK.min(total - start);
        let rows = map_indexed(n, |i| {
            let idx = start + i;
            let (c, rep) = (idx / reps, idx % reps);
            sweep_row(&weights, &cfg, c, &cells[c].attack, cells[c].seed, rep)
        });
        for row in rows {
            let row = row?;
            match cfg.output.format {
                Format::Csv => writeln!(w, "{}", row.csv_line())?,
                Format::Json => writeln!(w, "{}", serde_json::to_string(&row)?)?,
            }
            written += 1;
        }
        w.flush()?;
    }
    write_timing(out, "sweep.json", json(&serde_json::json!({ "sweep_ms": t0.elapsed().as_secs_f64() * 1e3 })))?;
    Ok(SweepReport { rows: written, path })
}

/// Metrics of one sweep cell and repetition.
pub fn sweep_row(
    weights: &Weights,
    cfg: &ExperimentConfig,
    cell: usize,
    attack: &AttackConfig,
    seed: u64,
    rep: usize,
) -> Result<SweepRow> {
    let setup = rep_setup(cfg, Some(attack), seed, rep);
    let (clean, attacked) = paired_runs(weights, &setup, cfg.steps, false)?;
    let (steps, summary) = summarize(&clean, &attacked, &attack.layer_set())?;
    let (kl_mean, kl_std) = mean_std(steps.iter().map(|s| s.kl));
    let (flip_mean, flip_std) = mean_std(steps.iter().map(|s| if s.flip { 1.0 } else { 0.0 }));
    let (att_shift_mean, att_shift_std) = mean_std(steps.iter().map(|s| s.att_shift));
    Ok(SweepRow {
        cell,
        family: attack.family.to_string(),
        layers: attack.layers.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(";"),
        magnitude: attack.magnitude(),
        schedule: attack.schedule.to_string(),
        seed,
        rep,
        steps: summary.steps,
        kl_mean,
        kl_std,
        flip_mean,
        flip_std,
        att_shift_mean,
        att_shift_std,
        perplexity_change_pct: summary.perplexity_change_pct,
        injections: summary.injections,
    })
}

// ── verify-bounds ───────────────────────────────────────────────────────────

/// One layer-norm probe regime and its outcome.
#[derive(Debug, Clone, Serialize)]
pub struct ProbeRegime {
    pub regime: String,
    pub report: ProbeReport,
}

/// The claimed `1/sqrt(var + eps)` constant holds for unit gain and
/// bounded-below variance; gain scaling and vanishing variance break it.
pub fn ln_probe_regimes(dim: usize, seed: u64) -> Result<Vec<ProbeRegime>> {
    let base = ProbeConfig { seed, ..ProbeConfig::unit(dim) };
    let cases = [
        ("unit_gain_bounded_variance", base.clone()),
        ("gain_scaled_x4", ProbeConfig { gain: vec![4.0; dim], ..base.clone() }),
        ("vanishing_variance", ProbeConfig { variance_floor: 1e-8, ..base.clone() }),
    ];
    cases
        .into_iter()
        .map(|(name, cfg)| Ok(ProbeRegime { regime: name.to_string(), report: ln_lipschitz_probe_with(&cfg)? }))
        .collect()
}

#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub rows: usize,
    pub violations: usize,
    pub max_ratio: f64,
    pub multi_head_checks: usize,
    pub multi_head_violations: usize,
    pub files: Vec<PathBuf>,
}

const MULTIHEAD_CSV_HEADER: &str = "step,layer,epsilon,max_q_norm,bound,observed,ratio,flag";

fn multihead_csv(checks: &[MultiHeadCheck]) -> String {
    let mut s = format!("{MULTIHEAD_CSV_HEADER}\n");
    for c in checks {
        writeln!(s, "{},{},{},{},{},{},{},{}", c.step, c.layer, c.epsilon, c.max_q_norm, c.bound, c.observed, c.ratio, c.flag)
            .unwrap();
    }
    s
}

/// Score-bound campaign over `trials` seeded prompts per attack cell, plus
/// multi-head checks and the layer-norm probe. With `fixture`, re-checks an
/// existing bound CSV instead of running a campaign.
pub fn cmd_verify_bounds(
    cfg: &ExperimentConfig,
    trials: usize,
    seed: u64,
    fixture: Option<&Path>,
    fmt: Format,
    out: &Path,
) -> Result<VerifyReport> {
    if trials == 0 {
        return Err(ConfigError("verify-bounds needs at least one trial".into()).into());
    }
    ensure_dir(out)?;
    let t0 = Instant::now();
    let mut files = Vec::new();

    if let Some(path) = fixture {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let report = BoundReport::from_csv(&text).with_context(|| format!("parsing {}", path.display()))?.reverify();
        files.push(write_bounds(out, fmt, &report)?);
        files.push(write_file(out, "bounds.txt", report.render_table())?);
        return Ok(VerifyReport {
            rows: report.rows.len(),
            violations: report.violations(),
            max_ratio: report.max_ratio(),
            multi_head_checks: 0,
            multi_head_violations: 0,
            files,
        });
    }

    let mut cfg = cfg.clone();
    let weights = load_weights(&mut cfg)?;
    let campaign = CampaignConfig { prompts: trials, seed, ..Default::default() };
    let report = single_head_campaign(&weights, &campaign)?;
    let checks = multi_head_campaign(&weights, &CampaignConfig { optimized_epsilons: vec![1.0], ..campaign })?;
    let probes = ln_probe_regimes(weights.config.d_model, seed)?;

    files.push(write_bounds(out, fmt, &report)?);
    files.push(write_file(out, "bounds.txt", report.render_table())?);
    files.push(match fmt {
        Format::Csv => write_file(out, "multihead.csv", multihead_csv(&checks))?,
        Format::Json => write_file(out, "multihead.json", json(&checks))?,
    });
    files.push(write_file(out, "ln_probe.json", json(&probes))?);
    files.push(write_timing(
        out,
        "verify.json",
        json(&serde_json::json!({ "verify_ms": t0.elapsed().as_secs_f64() * 1e3 })),
    )?);
    Ok(VerifyReport {
        rows: report.rows.len(),
        violations: report.violations(),
        max_ratio: report.max_ratio(),
        multi_head_checks: checks.len(),
        multi_head_violations: checks.iter().filter(|c| c.flag != BoundFlag::Ok).count(),
        files,
    })
}

/// Bound report rows from a planted fixture, for tests and demos: `n` sound
/// rows followed by one row whose observation exceeds its bound.
pub fn planted_violation_fixture(n: usize) -> String {
    let mut rows: Vec<BoundRow> = (0..n).map(|i| BoundRow::evaluate(i % 4, 1.0, 2.0, 1.0)).collect();
    rows.push(BoundRow { layer: 0, perturb_norm: 0.5, theoretical_bound: 0.25, observed_deviation: 0.75, ratio: 3.0, flag: BoundFlag::Ok });
    BoundReport { rows }.to_csv()
}

// ── dump-cache ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct DumpReport {
    pub length: usize,
    pub injections: usize,
    pub files: Vec<PathBuf>,
}

const CACHE_CSV_HEADER: &str = "layer,head,pos,part,vector";

fn cache_csv(cache: &KVCache) -> String {
    let mut s = format!("{CACHE_CSV_HEADER}\n");
    for l in 0..cache.n_layers() {
        for h in 0..cache.n_heads() {
            for (part, rows) in [("key", cache.keys(l, h)), ("value", cache.values(l, h))] {
                for (pos, v) in rows.iter().enumerate() {
                    let vec: Vec<String> = v.iter().map(|x| x.to_string()).collect();
                    writeln!(s, "{l},{h},{pos},{part},{}", vec.join(";")).unwrap();
                }
            }
        }
    }
    s
}

/// Final cache of the first repetition's free-running attacked decode
/// (clean when no attack is configured), as structured text and binary,
/// plus the weights that produced it.
pub fn cmd_dump_cache(mut cfg: ExperimentConfig, out: &Path) -> Result<DumpReport> {
    let weights = load_weights(&mut cfg)?;
    ensure_dir(out)?;
    let setup = rep_setup(&cfg, cfg.attack.as_ref(), cfg.seed, 0);
    let rec = execute(
        &weights,
        Feed::Free { prompt: &setup.prompt, steps: cfg.steps, mode: setup.mode },
        &RunOptions { attack: setup.attack.as_ref(), ..Default::default() },
    )?;
    let cache = rec.cache;
    let mut files = vec![match cfg.output.format {
        Format::Json => write_file(out, "cache.json", json(&cache.to_dump(&weights.config)))?,
        Format::Csv => {
            write_file(out, "cache_trace.csv", trace_csv(cache.trace()))?;
            write_file(out, "cache.csv", cache_csv(&cache))?
        }
    }];
    files.push(write_file(out, "cache.bin", cache.serialize())?);
    files.push(write_file(out, "weights.bin", write_weights(&weights))?);
    Ok(DumpReport { length: cache.len(), injections: cache.trace().len(), files })
}
