//! Binary-classification metrics: thresholded confusion counts, ROC and
//! precision-recall curves.
//!
//! Two threshold conventions are used on purpose. The operating point
//! ([`confusion_at_threshold`]) predicts positive iff `p > threshold`, so a
//! probability of exactly 0.5 is a negative. Curve points are indexed by the
//! distinct scores `s` and predict positive iff `p >= s`, so that every
//! score contributes a step.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub encounter_id: String,
    pub p: f64,
    pub coded: bool,
}

impl PredictionRecord {
    pub fn new(encounter_id: impl Into<String>, p: f64, coded: bool) -> Self {
        PredictionRecord {
            encounter_id: encounter_id.into(),
            p,
            coded,
        }
    }
}

/// `x`/`y` are FPR/TPR on a ROC curve and recall/precision on a PR curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub x: f64,
    pub y: f64,
    /// `f64::INFINITY` for the starting point where nothing is predicted
    /// positive.
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub threshold: f64,
    pub counts: ConfusionCounts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Nothing was predicted positive; `precision` was reported as 0.
    pub precision_undefined: bool,
}

fn check_records(records: &[PredictionRecord]) -> Result<(usize, usize)> {
    for r in records {
        if !(r.p.is_finite() && (0.0..=1.0).contains(&r.p)) {
            return Err(Error::Domain(format!("{}: probability {} outside [0, 1]", r.encounter_id, r.p)));
        }
    }
    let positives = records.iter().filter(|r| r.coded).count();
    Ok((positives, records.len() - positives))
}

fn require_both_classes(records: &[PredictionRecord]) -> Result<(usize, usize)> {
    let (pos, neg) = check_records(records)?;
    match (pos, neg) {
        (0, 0) => Err(Error::Precondition("no prediction records".into())),
        (0, _) => Err(Error::Precondition("label set has no positive (coded) records".into())),
        (_, 0) => Err(Error::Precondition("label set has no negative (uncoded) records".into())),
        _ => Ok((pos, neg)),
    }
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn confusion_at_threshold(records: &[PredictionRecord], threshold: f64) -> Result<Confusion> {
    require_both_classes(records)?;
    let mut c = ConfusionCounts::default();
    for r in records {
        match (r.p > threshold, r.coded) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    let predicted = c.tp + c.fp;
    let precision_undefined = predicted == 0;
    let precision = if precision_undefined {
        0.0
    } else {
        c.tp as f64 / predicted as f64
    };
    let recall = c.tp as f64 / (c.tp + c.fn_) as f64;
    Ok(Confusion {
        threshold,
        counts: c,
        precision,
        recall,
        f1: f1_score(precision, recall),
        precision_undefined,
    })
}

/// Cumulative (tp, fp) after each group of equal scores, highest first.
fn sweep(records: &[PredictionRecord]) -> Vec<(f64, usize, usize)> {
    let mut order: Vec<&PredictionRecord> = records.iter().collect();
    order.sort_by(|a, b| b.p.total_cmp(&a.p));
    let mut steps = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < order.len() {
        let score = order[i].p;
        while i < order.len() && order[i].p == score {
            if order[i].coded {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        steps.push((score, tp, fp));
    }
    steps
}

/// ROC points from (0, 0) through one point per distinct score to (1, 1),
/// and the trapezoidal area under them.
pub fn roc_curve(records: &[PredictionRecord]) -> Result<(Vec<CurvePoint>, f64)> {
    let (pos, neg) = require_both_classes(records)?;
    let mut points = vec![CurvePoint {
        x: 0.0,
        y: 0.0,
        threshold: f64::INFINITY,
    }];
    let mut area = 0.0;
    let (mut prev_tp, mut prev_fp) = (0usize, 0usize);
    for (score, tp, fp) in sweep(records) {
        // Trapezoid in count space, normalized once at the end.
        area += (fp - prev_fp) as f64 * (tp + prev_tp) as f64 / 2.0;
        points.push(CurvePoint {
            x: fp as f64 / neg as f64,
            y: tp as f64 / pos as f64,
            threshold: score,
        });
        prev_tp = tp;
        prev_fp = fp;
    }
    Ok((points, area / (pos as f64 * neg as f64)))
}

/// PR points (recall, precision) starting from (0, 1), and the step-wise
/// average precision Σ (R_k − R_{k−1}) · P_k.
pub fn pr_curve(records: &[PredictionRecord]) -> Result<(Vec<CurvePoint>, f64)> {
    let (pos, _) = check_records(records)?;
    if pos == 0 {
        return Err(Error::Precondition("label set has no positive (coded) records".into()));
    }
    let mut points = vec![CurvePoint {
        x: 0.0,
        y: 1.0,
        threshold: f64::INFINITY,
    }];
    let mut ap = 0.0;
    let mut prev_tp = 0usize;
    for (score, tp, fp) in sweep(records) {
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (tp - prev_tp) as f64 / pos as f64 * precision;
        points.push(CurvePoint {
            x: tp as f64 / pos as f64,
            y: precision,
            threshold: score,
        });
        prev_tp = tp;
    }
    Ok((points, ap))
}

/// Everything a comparison row needs, computed from one prediction list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub n: usize,
    pub positives: usize,
    pub confusion: Confusion,
    pub auroc: f64,
    pub average_precision: f64,
    pub roc: Vec<CurvePoint>,
    pub pr: Vec<CurvePoint>,
}

pub fn evaluate(records: &[PredictionRecord], threshold: f64) -> Result<Evaluation> {
    let confusion = confusion_at_threshold(records, threshold)?;
    let (roc, auroc) = roc_curve(records)?;
    let (pr, average_precision) = pr_curve(records)?;
    Ok(Evaluation {
        n: records.len(),
        positives: records.iter().filter(|r| r.coded).count(),
        confusion,
        auroc,
        average_precision,
        roc,
        pr,
    })
}

fn write_curve(path: &Path, points: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let io = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    w.write_record(["threshold", "x", "y"]).map_err(io)?;
    for p in points {
        w.write_record([p.threshold.to_string(), p.x.to_string(), p.y.to_string()])
            .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `roc.csv` and `pr.csv` (columns threshold,x,y) and `summary.csv`
/// (metric,value). Values use the shortest representation that round-trips,
/// so parsing a summary value gives back the computed `f64` exactly.
pub fn export_curves(eval: &Evaluation, directory: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(directory).map_err(|e| Error::io(directory, e))?;
    let roc = directory.join("roc.csv");
    let pr = directory.join("pr.csv");
    let summary = directory.join("summary.csv");
    write_curve(&roc, &eval.roc)?;
    write_curve(&pr, &eval.pr)?;

    let c = &eval.confusion;
    let rows: [(&str, String); 13] = [
        ("n", eval.n.to_string()),
        ("positives", eval.positives.to_string()),
        ("threshold", c.threshold.to_string()),
        ("tp", c.counts.tp.to_string()),
        ("fp", c.counts.fp.to_string()),
        ("tn", c.counts.tn.to_string()),
        ("fn", c.counts.fn_.to_string()),
        ("precision", c.precision.to_string()),
        ("precision_undefined", c.precision_undefined.to_string()),
        ("recall", c.recall.to_string()),
        ("f1", c.f1.to_string()),
        ("auroc", eval.auroc.to_string()),
        ("average_precision", eval.average_precision.to_string()),
    ];
    let mut text = String::from("metric,value\n");
    for (k, v) in rows {
        text.push_str(k);
        text.push(',');
        text.push_str(&v);
        text.push('\n');
    }
    fs::write(&summary, text).map_err(|e| Error::io(&summary, e))?;
    Ok(vec![roc, pr, summary])
}

/// Reads a `summary.csv` back into (metric, value) pairs.
pub fn read_summary(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let (k, v) = line.split_once(',').ok_or_else(|| Error::Parse {
            file: path.display().to_string(),
            line: i as u64 + 1,
            reason: "expected metric,value".into(),
        })?;
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}
