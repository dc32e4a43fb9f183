//! `report`: the comparison table and plot data, from a verified run.

use std::fs;
use std::path::Path;

use phenoaudit::audit::AgreementReport;
use phenoaudit::metrics::read_summary;
use phenoaudit::trainer::{write_comparison_csv, BaselineKind, ComparisonRow};
use phenoaudit::{Error, Result};

use crate::audit::RATES;
use crate::model::{metrics_dir, DNN, FACILITIES_CSV};
use crate::run_dir::RunDir;

pub const COMPARISON: &str = "report/comparison.csv";
pub const ROC_CURVES: &str = "report/roc_curves.csv";
pub const PR_CURVES: &str = "report/pr_curves.csv";
pub const CALIBRATION: &str = "report/calibration.csv";
pub const FACILITIES: &str = "report/facilities.csv";

fn compared_models() -> Vec<&'static str> {
    let mut names = vec![DNN];
    names.extend(BaselineKind::ALL.iter().map(|k| k.as_str()));
    names
}

fn comparison_row(run: &mut RunDir, model: &str) -> Result<ComparisonRow> {
    let path = run.input(&format!("{}/summary.csv", metrics_dir(model)))?;
    let summary = read_summary(&path)?;
    let get = |key: &str| -> Result<f64> {
        let (_, v) = summary
            .iter()
            .find(|(k, _)| k == key)
            .ok_or_else(|| Error::Format(format!("{}: no {key} row", path.display())))?;
        v.parse()
            .map_err(|_| Error::Format(format!("{}: bad {key} value {v:?}", path.display())))
    };
    Ok(ComparisonRow {
        algorithm: model.to_string(),
        precision: get("precision")?,
        recall: get("recall")?,
        f1: get("f1")?,
        auroc: get("auroc")?,
        ap: get("average_precision")?,
    })
}

/// Stack each model's curve file under a `model` column.
fn stacked_curves(run: &mut RunDir, file: &str, header: &str) -> Result<String> {
    let mut out = format!("model,{header}\n");
    for model in compared_models() {
        let path = run.input(&format!("{}/{file}", metrics_dir(model)))?;
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        for line in text.lines().skip(1) {
            out.push_str(model);
            out.push(',');
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn calibration_table(report: &AgreementReport) -> String {
    let mut out = String::from(
        "bin,reviewed,inconclusive,coder_wrong_rate,coder_wrong_low,coder_wrong_high,\
         diabetic_rate,diabetic_low,diabetic_high,mean_p,low_confidence_fraction\n",
    );
    for b in &report.bins {
        let (wl, wh) = b.coder_wrong.interval.unzip();
        let (dl, dh) = b.diabetic.interval.unzip();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            b.bin.as_str(),
            b.reviewed,
            b.inconclusive,
            opt(b.coder_wrong.rate),
            opt(wl),
            opt(wh),
            opt(b.diabetic.rate),
            opt(dl),
            opt(dh),
            opt(b.mean_p),
            opt(b.low_confidence_fraction)
        ));
    }
    out
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn report(run: &mut RunDir) -> Result<Vec<&'static str>> {
    run.verify_all()?;
    let rows = compared_models()
        .into_iter()
        .map(|m| comparison_row(run, m))
        .collect::<Result<Vec<_>>>()?;
    let mut written = vec![COMPARISON, ROC_CURVES, PR_CURVES];
    run.produce(COMPARISON, |p| write_comparison_csv(&rows, p))?;
    let roc = stacked_curves(run, "roc.csv", "threshold,fpr,tpr")?;
    run.produce(ROC_CURVES, |p| write_text(p, &roc))?;
    let pr = stacked_curves(run, "pr.csv", "threshold,recall,precision")?;
    run.produce(PR_CURVES, |p| write_text(p, &pr))?;

    if run.exists(RATES) {
        let path = run.input(RATES)?;
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let rates: AgreementReport =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        run.produce(CALIBRATION, |p| write_text(p, &calibration_table(&rates)))?;
        written.push(CALIBRATION);
    } else {
        tracing::warn!("no {RATES}; skipping {CALIBRATION}");
    }
    if run.exists(FACILITIES_CSV) {
        let path = run.input(FACILITIES_CSV)?;
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        run.produce(FACILITIES, |p| write_text(p, &text))?;
        written.push(FACILITIES);
    } else {
        tracing::warn!("no {FACILITIES_CSV}; skipping {FACILITIES} (run `train --multi-facility`)");
    }
    Ok(written)
}
