use std::fs;
use std::path::Path;
use std::process::Command;

use frisbi::baselines::BaselineKind;
use frisbi::simulate::BundleSizes;
use frisbi_cli::experiment::{cmd_run, cmd_simulate, collect_results, read_summary, RunOptions, Stage};
use frisbi_cli::report::cmd_report;
use frisbi_cli::{CliError, ExperimentConfig};

fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed: 7,
        sizes: BundleSizes {
            n_sbi: 120,
            n_u: 40,
            n_ot: 40,
            n_calib_pool: 30,
            n_test: 12,
        },
        n_calib: 20,
        folds: 2,
        baselines: vec![BaselineKind::FrisbiFull, BaselineKind::NpeDirect, BaselineKind::Prior],
        calib_sweep: vec![10, 20],
        noise_sweep: vec![0.0],
        ..ExperimentConfig::default()
    };
    cfg.npe.epochs = 2;
    cfg.transfer.epochs = 2;
    cfg.amortize.epochs = 1;
    cfg.eval.samples_per_point = 256;
    cfg
}

fn write_cfg(dir: &Path, cfg: &ExperimentConfig) -> std::path::PathBuf {
    let p = dir.join("cfg.json");
    fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn simulate_is_byte_reproducible() {
    let cfg = tiny();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = cmd_simulate(&cfg, a.path()).unwrap();
    let mb = cmd_simulate(&cfg, b.path()).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(files(&a.path().join("data")), files(&b.path().join("data")));
}

#[test]
fn zero_sizes_are_config_errors() {
    let mut cfg = tiny();
    cfg.sizes.n_test = 0;
    let text = serde_json::to_string(&cfg).unwrap();
    match ExperimentConfig::from_json(&text) {
        Err(CliError::Config { field, .. }) => assert_eq!(field, "sizes.n_test"),
        other => panic!("expected config error, got {other:?}"),
    }
    let err = ExperimentConfig::from_json(r#"{"seed": 1, "bogus": 2}"#).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn run_without_data_is_missing_simulate() {
    let dir = tempfile::tempdir().unwrap();
    let err = cmd_run(&tiny(), dir.path(), &RunOptions::default()).unwrap_err();
    assert!(matches!(&err, CliError::MissingStage(s) if s == "simulate"), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn evaluate_without_transfer_is_missing_stage() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    cmd_simulate(&cfg, dir.path()).unwrap();
    let opts = RunOptions {
        stages: vec![Stage::Npe, Stage::Evaluate],
        ..RunOptions::default()
    };
    let err = cmd_run(&cfg, dir.path(), &opts).unwrap_err();
    assert!(matches!(&err, CliError::MissingStage(s) if s == "transfer"), "{err}");
}

#[test]
fn data_from_another_seed_is_rejected() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    cmd_simulate(&cfg, dir.path()).unwrap();
    let other = ExperimentConfig { seed: 8, ..cfg };
    let err = cmd_run(&other, dir.path(), &RunOptions::default()).unwrap_err();
    assert!(matches!(err, CliError::Config { .. }), "{err}");
}

#[test]
fn full_run_summary_report_and_reuse() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    cmd_simulate(&cfg, out).unwrap();
    let manifests = cmd_run(&cfg, out, &RunOptions::default()).unwrap();
    assert_eq!(manifests.len(), 1);
    assert_eq!(manifests[0].fold_seeds.len(), cfg.folds);

    let rows = read_summary(&out.join("summary.csv")).unwrap();
    assert_eq!(rows.len(), cfg.folds * cfg.baselines.len());
    let records = collect_results(out).unwrap();
    assert_eq!(records.len(), rows.len());
    for r in &records {
        assert!(r.report.lpp.is_finite());
    }

    let report = cmd_report(out).unwrap();
    assert_eq!(report.len(), cfg.baselines.len());
    assert!(out.join("report.md").exists() && out.join("report.csv").exists());

    // A second config must not pick up these checkpoints.
    let mut changed = cfg.clone();
    changed.transfer.lambda += 1.0;
    let opts = RunOptions {
        stages: vec![Stage::Evaluate],
        ..RunOptions::default()
    };
    let err = cmd_run(&changed, out, &opts).unwrap_err();
    assert!(matches!(err, CliError::Core(frisbi::Error::Format(_))), "{err}");

    // Evaluating FrisbiFull needs only the test split and its own checkpoints.
    for f in ["sbi.csv", "u.csv", "ot.csv", "calib.csv"] {
        let p = out.join("data").join(f);
        if p.exists() {
            fs::remove_file(p).unwrap();
        }
    }
    let full_only = RunOptions {
        stages: vec![Stage::Evaluate],
        baselines: Some(vec![BaselineKind::FrisbiFull]),
        ..RunOptions::default()
    };
    let before: Vec<_> = records
        .iter()
        .filter(|r| r.baseline == BaselineKind::FrisbiFull)
        .map(|r| r.report.clone())
        .collect();
    cmd_run(&cfg, out, &full_only).unwrap();
    let after: Vec<_> = collect_results(out)
        .unwrap()
        .into_iter()
        .filter(|r| r.baseline == BaselineKind::FrisbiFull)
        .map(|r| r.report)
        .collect();
    assert_eq!(before, after);
}

#[test]
fn folds_are_reproducible() {
    let cfg = ExperimentConfig { folds: 1, ..tiny() };
    let mut reports = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        cmd_simulate(&cfg, dir.path()).unwrap();
        cmd_run(&cfg, dir.path(), &RunOptions::default()).unwrap();
        reports.push(
            collect_results(dir.path())
                .unwrap()
                .into_iter()
                .map(|r| r.report)
                .collect::<Vec<_>>(),
        );
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_frisbi");
    let dir = tempfile::tempdir().unwrap();
    let mut bad = tiny();
    bad.folds = 0;
    let bad_path = dir.path().join("bad.json");
    fs::write(&bad_path, serde_json::to_string(&bad).unwrap()).unwrap();
    let status = Command::new(bin)
        .args(["simulate", "--config"])
        .arg(&bad_path)
        .arg("--out")
        .arg(dir.path())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));

    let good = write_cfg(dir.path(), &tiny());
    let status = Command::new(bin)
        .args(["run", "--config"])
        .arg(&good)
        .arg("--out")
        .arg(dir.path().join("empty"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));

    let status = Command::new(bin)
        .args(["report", "--out"])
        .arg(dir.path().join("empty"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));
}
