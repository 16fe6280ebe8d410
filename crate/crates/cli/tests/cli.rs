use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;

use kvlab_cli::commands::{cmd_run, cmd_sweep, sweep_row, SWEEP_CSV_HEADER, TIMING_DIR};
use kvlab_cli::config::{parse_config, preset, ExperimentConfig};

fn kvlab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_kvlab"))
}

/// Every reproducible file under `dir`, keyed by relative path.
fn artifacts(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir).unwrap() {
        let e = e.unwrap();
        let name = e.file_name().into_string().unwrap();
        if e.file_type().unwrap().is_file() {
            out.insert(name, fs::read(e.path()).unwrap());
        } else {
            assert_eq!(name, TIMING_DIR);
        }
    }
    out
}

fn small(top: &str, sections: &str) -> ExperimentConfig {
    parse_config(&format!(
        "steps = 6\n{top}[model]\nn_layers = 2\nn_heads = 2\nd_model = 16\nvocab = 64\nmax_seq = 32\n[prompt]\nrandom_len = 5\n{sections}"
    ))
    .unwrap()
}

#[test]
fn clean_run_has_zero_divergence() {
    let dir = tempfile::tempdir().unwrap();
    let report = cmd_run(small("repetitions = 2\n", ""), dir.path()).unwrap();
    for s in &report.summaries {
        assert_eq!(s.summary.mean_kl, 0.0);
        assert_eq!(s.summary.top1_flip_rate, 0.0);
        assert_eq!(s.summary.injections, 0);
    }
    assert!(!dir.path().join("bounds.csv").exists());
}

#[test]
fn run_writes_expected_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse_config(
        "steps = 6\nrepetitions = 2\n[model]\nn_layers = 2\nn_heads = 2\nd_model = 16\nvocab = 64\nmax_seq = 32\n\
         [prompt]\nrandom_len = 5\n[attack]\nlayers = [0]\nsigma = 0.5\n[defense]\nmethod = \"smoothing:0.5\"\n",
    )
    .unwrap();
    let report = cmd_run(cfg, dir.path()).unwrap();
    assert_eq!(report.summaries.len(), 2);
    assert_ne!(report.summaries[0].attack_seed, report.summaries[1].attack_seed);
    let names: Vec<String> = artifacts(dir.path()).into_keys().collect();
    for want in [
        "bounds.csv", "config.toml", "defense.csv", "steps-r0.jsonl", "steps-r1.jsonl", "summary.csv", "tokens.json",
        "trace-r0.csv", "trace-r1.csv",
    ] {
        assert!(names.iter().any(|n| n == want), "missing {want}: {names:?}");
    }
    assert!(dir.path().join(TIMING_DIR).join("run.json").exists());
    assert!(dir.path().join(TIMING_DIR).join("defense.csv").exists());

    let steps = fs::read_to_string(dir.path().join("steps-r0.jsonl")).unwrap();
    // prompt 5 + 6 steps = 10 forward steps
    assert_eq!(steps.lines().count(), 10);
    for line in steps.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        assert_eq!(keys.len(), 4);
        for k in ["t", "kl", "flip", "att_shift"] {
            assert!(v.get(k).is_some());
        }
    }
    let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    // the config echo is itself a valid config
    parse_config(&fs::read_to_string(dir.path().join("config.toml")).unwrap()).unwrap();
}

#[test]
fn json_format_switches_report_encoding() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small("", "[attack]\nlayers = [1]\n");
    cfg.output.format = kvlab_cli::config::Format::Json;
    cmd_run(cfg, dir.path()).unwrap();
    let names: Vec<String> = artifacts(dir.path()).into_keys().collect();
    assert!(names.contains(&"summary.json".to_string()) && names.contains(&"bounds.json".to_string()));
    let trace: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("trace-r0.json")).unwrap()).unwrap();
    let first = &trace.as_array().unwrap()[0];
    for k in ["t", "layer", "head", "pos", "delta_norm", "type"] {
        assert!(first.get(k).is_some(), "{k}");
    }
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = small("repetitions = 2\n", "[attack]\nfamily = \"rotation\"\nschedule = \"bernoulli:0.5:3\"\n[defense]\nmethod = \"dropout:0.3\"\n");
    cmd_run(cfg.clone(), a.path()).unwrap();
    cmd_run(cfg, b.path()).unwrap();
    assert_eq!(artifacts(a.path()), artifacts(b.path()));
}

#[test]
fn sweep_rows_equal_grid_times_repetitions() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small("", "[attack]\n[sweep]\nlayers = [[0], [1], [0, 1]]\nmagnitudes = [0.01, 0.05, 0.1, 0.2]\nseeds = [0, 1, 2]\n");
    let report = cmd_sweep(cfg.clone(), dir.path()).unwrap();
    assert_eq!(report.rows, 36);
    let text = fs::read_to_string(&report.path).unwrap();
    assert_eq!(text.lines().next().unwrap(), SWEEP_CSV_HEADER);
    assert_eq!(text.lines().count(), 37);

    cfg.repetitions = 2;
    let report = cmd_sweep(cfg, dir.path()).unwrap();
    assert_eq!(report.rows, 72);
}

#[test]
fn one_cell_sweep_matches_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small("seed = 4\n", "[attack]\nsigma = 0.3\nlayers = [1]\n[sweep]\n");
    let run = cmd_run(cfg.clone(), dir.path()).unwrap();
    let w = kvlab::model::init_weights(&cfg.model).unwrap();
    let cells = cfg.sweep_cells(cfg.sweep.as_ref().unwrap());
    assert_eq!(cells.len(), 1);
    let row = sweep_row(&w, &cfg, 0, &cells[0].attack, cells[0].seed, 0).unwrap();
    let s = &run.summaries[0].summary;
    assert_eq!(row.kl_mean.to_bits(), s.mean_kl.to_bits());
    assert_eq!(row.flip_mean, s.top1_flip_rate);
    assert_eq!(row.injections, s.injections);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();

    let st = kvlab().arg("frobnicate").output().unwrap();
    assert_eq!(st.status.code(), Some(1));

    fs::write(out.join("bad.toml"), "steps = 3\n[attack]\nsigmaa = 1\n").unwrap();
    let st = kvlab().args(["run", "--config"]).arg(out.join("bad.toml")).arg("--out").arg(out).output().unwrap();
    assert_eq!(st.status.code(), Some(1));
    let err = String::from_utf8_lossy(&st.stderr);
    assert!(err.contains("sigmaa") && err.contains("line 3"), "{err}");

    let st = kvlab().args(["verify-bounds", "--trials", "0", "--out"]).arg(out).output().unwrap();
    assert_eq!(st.status.code(), Some(1));

    fs::write(out.join("w.bin"), b"not weights").unwrap();
    fs::write(out.join("w.toml"), format!("weights = {:?}\n", out.join("w.bin"))).unwrap();
    let st = kvlab().args(["run", "--config"]).arg(out.join("w.toml")).arg("--out").arg(out.join("w")).output().unwrap();
    assert_eq!(st.status.code(), Some(2));

    let fixture = out.join("fixture.csv");
    fs::write(&fixture, kvlab_cli::commands::planted_violation_fixture(20)).unwrap();
    let st = kvlab().args(["verify-bounds", "--fixture"]).arg(&fixture).arg("--out").arg(out.join("v")).output().unwrap();
    assert_eq!(st.status.code(), Some(3));

    let st = kvlab()
        .args(["run", "--preset", "gaussian-mid", "--seed", "2", "--parallel", "1", "--format", "json"])
        .env("KVLAB_OUT", out.join("env"))
        .output()
        .unwrap();
    assert_eq!(st.status.code(), Some(0), "{}", String::from_utf8_lossy(&st.stderr));
    let echoed = parse_config(&fs::read_to_string(out.join("env").join("config.toml")).unwrap()).unwrap();
    assert_eq!(echoed.seed, 2);
    assert!(out.join("env").join("summary.json").exists());
}

#[test]
fn weight_file_drives_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let st = kvlab().args(["dump-cache", "--preset", "gaussian-mid", "--out"]).arg(out).output().unwrap();
    assert_eq!(st.status.code(), Some(0));
    let mut cfg = preset("gaussian-mid").unwrap();
    let baseline = cmd_run(cfg.clone(), &out.join("a")).unwrap();
    // a file-backed model replaces the [model] section
    cfg.model.d_model = 8;
    cfg.weights = Some(out.join("weights.bin"));
    let loaded = cmd_run(cfg, &out.join("b")).unwrap();
    assert_eq!(baseline.summaries[0].summary, loaded.summaries[0].summary);
}
