use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use kvlab_cli::commands::{cmd_dump_cache, cmd_run, cmd_sweep, cmd_verify_bounds};
use kvlab_cli::config::{parse_config, preset, ConfigError, ExperimentConfig, Format};

/// Prints a line, ignoring a closed stdout (e.g. piped into `head`).
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_VIOLATION: u8 = 3;

/// Deterministic key-value cache attack laboratory.
#[derive(Parser)]
#[command(name = "kvlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Clean, attacked and defended runs of one experiment.
    Run(Common),
    /// Ablation grid over the config's [sweep] section.
    Sweep(Common),
    /// Randomized score-bound campaign (or re-check of a bound CSV).
    VerifyBounds {
        #[command(flatten)]
        common: Common,
        /// Seeded prompts per attack cell.
        #[arg(long, default_value_t = 1)]
        trials: usize,
        /// Re-verify this bound CSV instead of running a campaign.
        #[arg(long, value_name = "CSV")]
        fixture: Option<PathBuf>,
    },
    /// Final cache of a decode as structured text and binary, plus weights.
    DumpCache(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML, or JSON when it starts with `{`).
    #[arg(long, value_name = "PATH", conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in experiment config.
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,
    /// Overrides the config's seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    #[arg(long, value_name = "DIR", env = "KVLAB_OUT", default_value = "kvlab-out")]
    out: PathBuf,
    /// Overrides the config's output format.
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Worker threads (default: all cores).
    #[arg(long, value_name = "N")]
    parallel: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                parse_config(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?
            }
            (None, Some(name)) => preset(name)?,
            (None, None) => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(f) = self.format {
            cfg.output.format = f;
        }
        Ok(cfg)
    }

    fn init_pool(&self) -> Result<()> {
        let Some(n) = self.parallel else { return Ok(()) };
        if n == 0 {
            return Err(ConfigError("--parallel must be >= 1".into()).into());
        }
        #[cfg(feature = "parallel")]
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("starting worker pool")?;
        Ok(())
    }
}

fn show(files: &[PathBuf], out: &Path) {
    for f in files {
        say!("  {}", f.strip_prefix(out).unwrap_or(f).display());
    }
}

fn dispatch(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Run(c) => {
            c.init_pool()?;
            let r = cmd_run(c.load()?, &c.out)?;
            for s in &r.summaries {
                say!(
                    "rep {}: mean KL {:.6}, flip rate {:.4}, attention shift {:.4}, {} injections",
                    s.rep, s.summary.mean_kl, s.summary.top1_flip_rate, s.summary.mean_attention_shift, s.summary.injections
                );
            }
            for d in &r.defense {
                say!("{}", d.csv_line());
            }
            if r.bound_rows > 0 {
                say!("bound rows: {}, violations: {}", r.bound_rows, r.bound_violations);
            }
            say!("wrote {}:", c.out.display());
            show(&r.files, &c.out);
            Ok(if r.bound_violations > 0 { EXIT_VIOLATION } else { 0 })
        }
        Command::Sweep(c) => {
            c.init_pool()?;
            let r = cmd_sweep(c.load()?, &c.out)?;
            say!("wrote {} rows to {}", r.rows, r.path.display());
            Ok(0)
        }
        Command::VerifyBounds { common: c, trials, fixture } => {
            c.init_pool()?;
            let cfg = c.load()?;
            let fmt = cfg.output.format;
            let r = cmd_verify_bounds(&cfg, trials, cfg.seed, fixture.as_deref(), fmt, &c.out)?;
            say!(
                "score bound: {} instances, {} flagged, max ratio {:.6}",
                r.rows, r.violations, r.max_ratio
            );
            if r.multi_head_checks > 0 {
                say!("multi-head bound: {} checks, {} flagged", r.multi_head_checks, r.multi_head_violations);
            }
            show(&r.files, &c.out);
            Ok(if r.violations > 0 { EXIT_VIOLATION } else { 0 })
        }
        Command::DumpCache(c) => {
            let r = cmd_dump_cache(c.load()?, &c.out)?;
            say!("cache length {}, {} injections", r.length, r.injections);
            show(&r.files, &c.out);
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.chain().any(|c| c.is::<ConfigError>());
            ExitCode::from(if usage { EXIT_USAGE } else { EXIT_RUNTIME })
        }
    }
}
