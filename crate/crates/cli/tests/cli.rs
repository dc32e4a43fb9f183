use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_phenoaudit");

const COHORT: &str = "n_patients = 700\ntrue_prevalence = 0.3\nsignal_strength = 0.8\nseed = 5\n";
const QUICK_MODEL: &str = "depth = 3\n[schedule]\nmax_epochs = 4\npatience = 2\n";
const QUICK_SEARCH: &str = "[grid]\nactivations = [\"tanh\"]\noptimizers = [\"adam\"]\nlosses = [\"mse\"]\ndepths = [2, 3]\n\n[schedule]\nmax_epochs = 3\npatience = 0\n";

fn phenoaudit(args: &[&str]) -> Output {
    Command::new(BIN).arg("-q").args(args).output().expect("binary runs")
}

#[track_caller]
fn ok(args: &[&str]) -> Output {
    let out = phenoaudit(args);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small run through evaluate, with quick-training configs.
fn small_run(dir: &Path) -> std::path::PathBuf {
    let run = dir.join("run");
    fs::write(dir.join("cohort.toml"), COHORT).unwrap();
    fs::write(dir.join("model.toml"), QUICK_MODEL).unwrap();
    ok(&["generate", "--config", s(&dir.join("cohort.toml")), "--out", s(&run)]);
    ok(&["featurize", "--run", s(&run)]);
    ok(&["train", "--run", s(&run), "--config", s(&dir.join("model.toml"))]);
    ok(&["baselines", "--run", s(&run), "--config", s(&dir.join("model.toml"))]);
    ok(&["evaluate", "--run", s(&run)]);
    run
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    let out = phenoaudit(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(phenoaudit(&[]).status.code(), Some(1));
    let help = phenoaudit(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    for sub in ["generate", "featurize", "train", "search", "baselines", "evaluate", "audit", "serve", "report"] {
        assert!(String::from_utf8_lossy(&help.stdout).contains(sub), "{sub}");
    }
}

#[test]
fn missing_run_and_bad_config_are_user_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = phenoaudit(&["featurize", "--run", s(&dir.path().join("nowhere"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifest.json"));

    fs::write(dir.path().join("bad.toml"), "n_patients = 0\ntrue_prevalence = 0.3\nsignal_strength = 0.8\nseed = 1\n")
        .unwrap();
    let out = phenoaudit(&["generate", "--run", s(&dir.path().join("r")), "--config", s(&dir.path().join("bad.toml"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_patients"));
}

#[test]
fn full_pipeline_with_audit_search_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let run = small_run(dir.path());
    let r = s(&run);

    // Projection before rates names the missing input.
    ok(&["audit", "bin", "--run", r]);
    let out = phenoaudit(&["audit", "project", "--run", r]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("audit/rates.json"));

    ok(&["audit", "sample", "--run", r]);
    ok(&["audit", "packets", "--run", r]);
    ok(&["audit", "oracle", "--run", r]);
    ok(&["audit", "rates", "--run", r]);
    ok(&["audit", "project", "--run", r]);
    let estimate: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("audit/estimate.json")).unwrap()).unwrap();
    let rate = estimate["total_rate"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&rate));

    fs::write(dir.path().join("search.toml"), QUICK_SEARCH).unwrap();
    ok(&["search", "--run", r, "--config", s(&dir.path().join("search.toml"))]);
    let runs = fs::read_to_string(run.join("models/runs.tsv")).unwrap();
    assert_eq!(runs.lines().count(), 3);
    let best = run.join("models/best_config.toml");
    // The written best config is itself a valid train config.
    ok(&["train", "--run", r, "--config", s(&best)]);

    let out = ok(&["report", "--run", r]);
    let listed = String::from_utf8_lossy(&out.stdout);
    assert!(listed.contains("comparison.csv") && listed.contains("calibration.csv"));
    let comparison = fs::read_to_string(run.join("report/comparison.csv")).unwrap();
    let algorithms: Vec<&str> = comparison.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(algorithms, ["dnn", "logistic", "linear_svm"]);
    assert_eq!(comparison.lines().next().unwrap(), "algorithm,precision,recall,f1,auroc,ap");
    let roc = fs::read_to_string(run.join("report/roc_curves.csv")).unwrap();
    assert!(roc.starts_with("model,threshold,fpr,tpr\n"));
    assert_eq!(fs::read_to_string(run.join("report/calibration.csv")).unwrap().lines().count(), 4);

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 5);
    assert!(manifest["files"]["audit/judgments.jsonl"].is_string());
    assert!(manifest["files"]["report/comparison.csv"].is_string());
}

#[test]
fn report_refuses_a_tampered_run() {
    let dir = tempfile::tempdir().unwrap();
    let run = small_run(dir.path());
    let summary = run.join("metrics/logistic/summary.csv");
    let text = fs::read_to_string(&summary).unwrap().replace("metric,value", "metric,value\n");
    fs::write(&summary, text).unwrap();
    let out = phenoaudit(&["report", "--run", s(&run)]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("metrics/logistic/summary.csv"), "{err}");
    assert!(!run.join("report/comparison.csv").exists());
}

#[test]
fn rerunning_a_stage_reproduces_its_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let run = small_run(dir.path());
    let files = ["models/dnn.json", "metrics/dnn/predictions.csv", "metrics/dnn/roc.csv", "manifest.json"];
    let before: Vec<Vec<u8>> = files.iter().map(|f| fs::read(run.join(f)).unwrap()).collect();
    ok(&["train", "--run", s(&run), "--config", s(&dir.path().join("model.toml"))]);
    ok(&["evaluate", "--run", s(&run)]);
    for (f, b) in files.iter().zip(before) {
        assert_eq!(fs::read(run.join(f)).unwrap(), b, "{f}");
    }
}

#[test]
fn multi_facility_writes_a_row_per_facility() {
    let dir = tempfile::tempdir().unwrap();
    let run = small_run(dir.path());
    ok(&["train", "--run", s(&run), "--multi-facility", "--config", s(&dir.path().join("model.toml"))]);
    let table = fs::read_to_string(run.join("metrics/facilities.csv")).unwrap();
    let rows: Vec<Vec<&str>> = table.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 5);
    assert_eq!(rows.iter().filter(|r| r[1] == "true").count(), 1);
    assert_eq!(rows[0][0], "fac-01");
    assert_eq!(rows[0][1], "true");
    // Balanced pool: every facility contributes the same number of rows.
    assert!(rows.iter().all(|r| r[3] == rows[0][3]));

    let out = phenoaudit(&["train", "--run", s(&run), "--multi-facility", "--anchor", "fac-99"]);
    assert_eq!(out.status.code(), Some(1));
}
