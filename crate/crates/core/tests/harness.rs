use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use wqtrust::harness::{
    emit, run, run_partial, seed_stream, tables, EvaluationReport, ExperimentConfig, Format, REPORT_FILE,
};

fn smoke_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

/// Smoke config reduced to baseline and evaluation.
fn minimal() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::load(smoke_path()).unwrap();
    cfg.robustness = None;
    cfg.uncertainty = None;
    cfg.attribution = None;
    cfg
}

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn minimal_run_scores_every_basin_variable_pair() {
    let report = run(&minimal()).unwrap();
    assert_eq!(report.baseline.len(), 4 * 3);
    assert!(report.failure.is_none());
    assert_eq!(report.metadata.config_hash, minimal().hash());
    let mut pairs: Vec<_> = report.baseline.iter().map(|r| (r.basin.clone(), r.variable.clone())).collect();
    pairs.dedup();
    assert_eq!(pairs.len(), 12);
}

#[test]
fn hash_follows_experiment_fields_only() {
    let a = minimal();
    let mut b = a.clone();
    b.seed += 1;
    assert_ne!(a.hash(), b.hash());
    let mut c = a.clone();
    c.train.epochs += 1;
    assert_ne!(a.hash(), c.hash());
    let mut d = a.clone();
    d.jobs = 4;
    d.out = Some(PathBuf::from("elsewhere"));
    assert_eq!(a.hash(), d.hash());
    let round = ExperimentConfig::from_toml(&a.to_toml().unwrap()).unwrap();
    assert_eq!(a.hash(), round.hash());
}

#[test]
fn repeated_runs_emit_identical_bytes_and_tables_match_json() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let mut cfg = minimal();
        cfg.out = Some(d.path().to_path_buf());
        let report = run(&cfg).unwrap();
        emit(&report, d.path(), &[Format::Json, Format::Csv]).unwrap();
    }
    let (a, b) = (read_all(dirs[0].path()), read_all(dirs[1].path()));
    assert!(a.iter().any(|(n, _)| n == REPORT_FILE));
    assert_eq!(a, b);

    let text = fs::read_to_string(dirs[0].path().join(REPORT_FILE)).unwrap();
    let parsed = EvaluationReport::from_json(&text).unwrap();
    assert_eq!(parsed.to_json().unwrap(), text);

    let baseline = fs::read_to_string(dirs[0].path().join("baseline.csv")).unwrap();
    let mut lines = baseline.lines();
    assert_eq!(lines.next().unwrap(), "model,basin,variable,condition,kge,r,beta,gamma,pbias");
    assert_eq!(lines.count(), parsed.baseline.len());
    for t in tables(&parsed) {
        let csv = fs::read_to_string(dirs[0].path().join(format!("{}.csv", t.name))).unwrap();
        assert_eq!(csv.lines().count(), t.rows.len() + 1, "{}", t.name);
    }
}

#[test]
fn full_smoke_config_fills_every_section() {
    let report = run(&ExperimentConfig::load(smoke_path()).unwrap()).unwrap();
    assert_eq!(report.robustness.len(), 2);
    assert_eq!(report.uncertainty.len(), 3);
    assert_eq!(report.attribution.len(), 3);
    assert!(!report.statistics.is_empty());
    for r in &report.attribution {
        for v in ["NO3", "TP", "Temp"] {
            let s: f64 = r.rows.iter().filter(|row| row.variable == v).map(|row| row.share).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn sibling_seed_paths_never_collide() {
    let mut seen = HashSet::with_capacity(1_000_000);
    for i in 0..500_000u32 {
        let name = i.to_string();
        assert!(seen.insert(seed_stream(7, &["model", &name, "init"])));
        assert!(seen.insert(seed_stream(7, &["model", &name, "train"])));
    }
    assert_eq!(seen.len(), 1_000_000);
}

#[test]
fn a_failing_stage_is_recorded_with_what_did_not_run() {
    let mut cfg = minimal();
    cfg.split = wqtrust::dataio::SplitPlan::TemporalHeldOut { test_years: vec![1900] };
    let report = run_partial(&cfg).unwrap();
    let f = report.failure.as_ref().expect("failure recorded");
    assert_eq!(f.stage, "split");
    assert_eq!(f.not_run, ["baseline", "evaluate", "statistics"]);
    assert!(report.baseline.is_empty());
    assert!(run(&cfg).is_err());

    let dir = tempfile::tempdir().unwrap();
    emit(&report, dir.path(), &[Format::Csv]).unwrap();
    assert!(dir.path().join("failure.csv").exists());
}

fn cli(args: &[&str], env_out: Option<&Path>) -> std::process::Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_wqtrust"));
    c.args(args).env_remove("WQTRUST_OUT");
    if let Some(p) = env_out {
        c.env("WQTRUST_OUT", p);
    }
    c.output().unwrap()
}

#[test]
fn cli_exit_codes_and_output_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = minimal();
    let good = dir.path().join("good.toml");
    fs::write(&good, cfg.to_toml().unwrap()).unwrap();

    let out = cli(&["validate-config", "--config", good.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains(&cfg.hash()));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "seed = 1\nunknown_key = 2\n").unwrap();
    assert_eq!(cli(&["run", "--config", bad.to_str().unwrap()], None).status.code(), Some(2));

    let mut broken = cfg.clone();
    broken.split = wqtrust::dataio::SplitPlan::TemporalHeldOut { test_years: vec![1900] };
    let failing = dir.path().join("failing.toml");
    fs::write(&failing, broken.to_toml().unwrap()).unwrap();
    let failed_out = dir.path().join("failed");
    let out = cli(&["run", "--config", failing.to_str().unwrap(), "--out", failed_out.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(3));

    let from_env = dir.path().join("env");
    let from_flag = dir.path().join("flag");
    let out = cli(&["run", "--config", good.to_str().unwrap(), "--formats", "json"], Some(&from_env));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(from_env.join(REPORT_FILE).exists());
    let args = ["run", "--config", good.to_str().unwrap(), "--formats", "json", "--out", from_flag.to_str().unwrap()];
    let out = cli(&args, Some(&from_env.join("ignored")));
    assert_eq!(out.status.code(), Some(0));
    assert!(from_flag.join(REPORT_FILE).exists());
    assert!(!from_env.join("ignored").exists());
    assert_eq!(fs::read(from_env.join(REPORT_FILE)).unwrap(), fs::read(from_flag.join(REPORT_FILE)).unwrap());
}
