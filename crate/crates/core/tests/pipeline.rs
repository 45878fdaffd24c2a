use std::fs;
use std::path::Path;

use quantlab_core::pipeline::{run_pipeline, PipelineConfig, LOCK_FILE, STAGES_CSV, SUMMARY_JSON};
use quantlab_core::Error;

fn config(dir: &Path, extra: &str) -> PipelineConfig {
    PipelineConfig::parse(&format!("output = \"{}\"\nseed = 7\n{extra}", dir.display())).unwrap()
}

const SMALL: &str = "[input]\nsamples = 4\ntokens = 128\ndim = 32\n[psot]\nepochs = 3\n[asot]\ngrid = 1:8:0.25\n[metrics]\nbins = 2000\n";

#[test]
fn full_pipeline_orders_stages() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "[input]\nsamples = 32\n[psot]\ntemperature = 10\n");
    let report = run_pipeline(&cfg, false).unwrap();
    let names: Vec<&str> = report.stages.iter().map(|s| s.name.as_str()).collect();
    assert_eq!(names, ["baseline", "hadamard", "psot", "psot+lac"]);
    let mse: Vec<f64> = report.stages.iter().map(|s| s.quant_mse).collect();
    assert!(mse[0] > mse[1] && mse[1] > mse[2] && mse[2] >= mse[3], "{mse:?}");
    assert!(report.stages[2].mean_peak < report.stages[1].mean_peak);
    assert!(report.stages[2].mean_bn > report.stages[1].mean_bn);
    assert!(report.k_star.is_some());
    assert!(report.max_orthogonality_error.unwrap() < 1e-8);
    for f in [STAGES_CSV, SUMMARY_JSON, "timing.csv", "eta_curve.csv", "loss_trace.csv", "lac_trace.csv", "transform.ortm"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    assert!(!dir.path().join(LOCK_FILE).exists());
}

#[test]
fn disabled_stages_are_absent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &format!("{SMALL}[stages]\npsot = false\nasot = false\nlac = false\n"));
    let report = run_pipeline(&cfg, false).unwrap();
    let names: Vec<&str> = report.stages.iter().map(|s| s.name.as_str()).collect();
    assert_eq!(names, ["baseline", "hadamard"]);
    assert!(report.eta_curve.is_none() && report.loss_trace.is_none() && report.clip.is_none());
    let csv = fs::read_to_string(dir.path().join(STAGES_CSV)).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(!dir.path().join("loss_trace.csv").exists());
}

#[test]
fn identical_runs_write_identical_reports() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_pipeline(&config(a.path(), SMALL), false).unwrap();
    run_pipeline(&config(b.path(), SMALL), false).unwrap();
    for f in [STAGES_CSV, "eta_curve.csv", "loss_trace.csv", "lac_trace.csv", "transform.ortm"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let strip = |p: &Path| fs::read_to_string(p.join(SUMMARY_JSON)).unwrap().replace(&p.display().to_string(), "");
    assert_eq!(strip(a.path()), strip(b.path()));
}

#[test]
fn reruns_need_force() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &format!("{SMALL}[stages]\npsot = false\n"));
    run_pipeline(&cfg, false).unwrap();
    let before = fs::read(dir.path().join(STAGES_CSV)).unwrap();
    let err = run_pipeline(&cfg, false).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert_eq!(fs::read(dir.path().join(STAGES_CSV)).unwrap(), before);
    run_pipeline(&cfg, true).unwrap();
}

#[test]
fn locked_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join(LOCK_FILE), "").unwrap();
    let err = run_pipeline(&config(dir.path(), SMALL), false).unwrap_err();
    assert!(matches!(err, Error::Config { .. }));
    assert!(dir.path().join(LOCK_FILE).exists());
}

#[test]
fn failed_stage_flushes_partial_report() {
    let dir = tempfile::tempdir().unwrap();
    // A grid far above every score leaves nothing to select.
    let cfg = config(dir.path(), &format!("{SMALL}[asot]\ngrid = 50:60:1\n"));
    let err = run_pipeline(&cfg, false).unwrap_err();
    match &err {
        Error::Stage { stage, source } => {
            assert_eq!(stage, "asot");
            assert!(matches!(**source, Error::SelectionFailure { .. }));
        }
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(err.exit_code(), 4);
    let csv = fs::read_to_string(dir.path().join(STAGES_CSV)).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join(SUMMARY_JSON)).unwrap()).unwrap();
    assert_eq!(summary["status"], "failed");
    assert_eq!(summary["failed_stage"], "asot");
    assert!(!dir.path().join(LOCK_FILE).exists());
}

#[test]
fn missing_input_file_is_a_format_level_failure() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.actd");
    fs::write(&bad, b"XXXX").unwrap();
    let cfg = config(&dir.path().join("out"), &format!("[input]\npaths = {}\n", bad.display()));
    let err = run_pipeline(&cfg, false).unwrap_err();
    assert_eq!(err.exit_code(), 3);
}
