use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ConfidenceBin, DiscordantCase, Direction, ReviewPacket};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Diabetic,
    NotDiabetic,
}

impl Verdict {
    pub fn from_bool(diabetic: bool) -> Self {
        if diabetic {
            Verdict::Diabetic
        } else {
            Verdict::NotDiabetic
        }
    }

    pub fn is_diabetic(self) -> bool {
        self == Verdict::Diabetic
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Confidence {
    High,
    Low,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewJudgment {
    pub token: String,
    pub reviewer: String,
    pub verdict: Verdict,
    pub confidence: Confidence,
    /// RFC 3339.
    pub timestamp: String,
}

pub fn append_judgment(path: &Path, j: &ReviewJudgment) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut line = serde_json::to_string(j).expect("judgment serializes");
    line.push('\n');
    f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn write_judgments(path: &Path, judgments: &[ReviewJudgment]) -> Result<()> {
    let mut text = String::new();
    for j in judgments {
        text.push_str(&serde_json::to_string(j).expect("judgment serializes"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn parse_judgments(text: &str, file: &str) -> Result<Vec<ReviewJudgment>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                file: file.to_string(),
                line: i as u64 + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

pub fn read_judgments(path: &Path) -> Result<Vec<ReviewJudgment>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_judgments(&text, &path.display().to_string())
}

/// Anything that can look at a packet and decide.
pub trait Reviewer {
    fn judge(&mut self, packet: &ReviewPacket) -> (Verdict, Confidence);
}

/// Test reviewer that unblinds the token and answers from the planted
/// truth, always with high confidence.
pub struct LedgerReviewer<'a> {
    pub truth: &'a BTreeMap<String, bool>,
    pub token_map: &'a BTreeMap<String, String>,
}

impl Reviewer for LedgerReviewer<'_> {
    fn judge(&mut self, packet: &ReviewPacket) -> (Verdict, Confidence) {
        let diabetic = self
            .token_map
            .get(&packet.token)
            .and_then(|id| self.truth.get(id))
            .copied()
            .unwrap_or(false);
        (Verdict::from_bool(diabetic), Confidence::High)
    }
}

pub fn run_reviewer(
    reviewer: &mut dyn Reviewer,
    reviewer_id: &str,
    packets: &[ReviewPacket],
    timestamp: &str,
) -> Vec<ReviewJudgment> {
    packets
        .iter()
        .map(|p| {
            let (verdict, confidence) = reviewer.judge(p);
            ReviewJudgment {
                token: p.token.clone(),
                reviewer: reviewer_id.to_string(),
                verdict,
                confidence,
                timestamp: timestamp.to_string(),
            }
        })
        .collect()
}

/// Two-sided 95% standard normal quantile.
pub const Z_95: f64 = 1.959_963_984_540_054;

/// Wilson score interval for `successes` out of `n`; `None` when `n == 0`.
pub fn wilson_interval(successes: usize, n: usize, z: f64) -> Option<(f64, f64)> {
    if n == 0 {
        return None;
    }
    let n_f = n as f64;
    let phat = successes as f64 / n_f;
    let z2 = z * z;
    let denom = 1.0 + z2 / n_f;
    let center = (phat + z2 / (2.0 * n_f)) / denom;
    let half = z * (phat * (1.0 - phat) / n_f + z2 / (4.0 * n_f * n_f)).sqrt() / denom;
    Some(((center - half).max(0.0), (center + half).min(1.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proportion {
    pub count: usize,
    pub n: usize,
    pub rate: Option<f64>,
    pub interval: Option<(f64, f64)>,
}

impl Proportion {
    pub fn new(count: usize, n: usize) -> Self {
        Proportion {
            count,
            n,
            rate: (n > 0).then(|| count as f64 / n as f64),
            interval: wilson_interval(count, n, Z_95),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinAgreement {
    pub bin: ConfidenceBin,
    /// Cases with a majority verdict.
    pub reviewed: usize,
    /// Cases whose reviewers split evenly; left out of every rate.
    pub inconclusive: usize,
    /// Coder contradicted by the majority verdict.
    pub coder_wrong: Proportion,
    pub by_direction: BTreeMap<Direction, Proportion>,
    /// Majority verdict "diabetic".
    pub diabetic: Proportion,
    /// Mean model probability over the reviewed cases.
    pub mean_p: Option<f64>,
    /// Share of individual judgments marked low confidence.
    pub low_confidence_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub bins: Vec<BinAgreement>,
    pub judgments: usize,
    pub reviewers: usize,
}

impl AgreementReport {
    pub fn bin(&self, bin: ConfidenceBin) -> &BinAgreement {
        self.bins.iter().find(|b| b.bin == bin).expect("every bin is reported")
    }
}

/// Per-bin rates at which reviewers contradict the coder. Each judgment
/// must resolve through `token_map` to one of `cases`.
pub fn agreement_rates(
    judgments: &[ReviewJudgment],
    cases: &[DiscordantCase],
    token_map: &BTreeMap<String, String>,
) -> Result<AgreementReport> {
    let by_id: HashMap<&str, &DiscordantCase> = cases.iter().map(|c| (c.encounter_id.as_str(), c)).collect();
    // encounter_id -> (diabetic votes, not-diabetic votes, low-confidence votes)
    let mut votes: BTreeMap<&str, (usize, usize, usize)> = BTreeMap::new();
    let mut reviewers = std::collections::BTreeSet::new();
    for j in judgments {
        let id = token_map
            .get(&j.token)
            .ok_or_else(|| Error::Integrity {
                table: "judgments".into(),
                row: 0,
                reason: format!("token {} is not in the token map", j.token),
            })?;
        if !by_id.contains_key(id.as_str()) {
            return Err(Error::Integrity {
                table: "judgments".into(),
                row: 0,
                reason: format!("token {} does not belong to a sampled case", j.token),
            });
        }
        let v = votes.entry(id.as_str()).or_default();
        match j.verdict {
            Verdict::Diabetic => v.0 += 1,
            Verdict::NotDiabetic => v.1 += 1,
        }
        if j.confidence == Confidence::Low {
            v.2 += 1;
        }
        reviewers.insert(j.reviewer.as_str());
    }

    let bins = ConfidenceBin::ALL
        .into_iter()
        .map(|bin| {
            let mut reviewed = 0;
            let mut inconclusive = 0;
            let mut wrong = 0;
            let mut diabetic = 0;
            let mut p_sum = 0.0;
            let mut dir: BTreeMap<Direction, (usize, usize)> = Direction::ALL.iter().map(|&d| (d, (0, 0))).collect();
            let (mut n_judgments, mut n_low) = (0, 0);
            for (id, &(yes, no, low)) in &votes {
                let case = by_id[id];
                if case.bin != bin {
                    continue;
                }
                n_judgments += yes + no;
                n_low += low;
                if yes == no {
                    inconclusive += 1;
                    continue;
                }
                let verdict = yes > no;
                reviewed += 1;
                p_sum += case.p;
                diabetic += verdict as usize;
                let is_wrong = verdict != case.coded;
                wrong += is_wrong as usize;
                let d = dir.get_mut(&case.direction).expect("all directions present");
                d.0 += is_wrong as usize;
                d.1 += 1;
            }
            BinAgreement {
                bin,
                reviewed,
                inconclusive,
                coder_wrong: Proportion::new(wrong, reviewed),
                by_direction: dir.into_iter().map(|(d, (w, n))| (d, Proportion::new(w, n))).collect(),
                diabetic: Proportion::new(diabetic, reviewed),
                mean_p: (reviewed > 0).then(|| p_sum / reviewed as f64),
                low_confidence_fraction: (n_judgments > 0).then(|| n_low as f64 / n_judgments as f64),
            }
        })
        .collect();
    Ok(AgreementReport {
        bins,
        judgments: judgments.len(),
        reviewers: reviewers.len(),
    })
}
