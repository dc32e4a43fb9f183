//! Discordance analysis: where the model and the coders disagree, sample
//! those cases for blinded expert review, and project the reviewers'
//! verdicts back onto the whole population.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::PredictionRecord;
use crate::rng;
use crate::trainer::DECISION_THRESHOLD;

mod packets;
mod projection;
mod review;

pub use packets::*;
pub use projection::*;
pub use review::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceBin {
    High,
    Medium,
    Low,
}

impl ConfidenceBin {
    pub const ALL: [ConfidenceBin; 3] = [ConfidenceBin::High, ConfidenceBin::Medium, ConfidenceBin::Low];

    pub fn as_str(self) -> &'static str {
        match self {
            ConfidenceBin::High => "high",
            ConfidenceBin::Medium => "medium",
            ConfidenceBin::Low => "low",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|b| b.as_str() == s)
    }
}

impl fmt::Display for ConfidenceBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// High: p < 0.15 or p > 0.85. Medium: 0.15 ≤ p < 0.3 or 0.7 < p ≤ 0.85.
/// Low: 0.3 ≤ p ≤ 0.7.
pub fn assign_bin(p: f64) -> Result<ConfidenceBin> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("probability {p} outside [0, 1]")));
    }
    Ok(if p < 0.15 || p > 0.85 {
        ConfidenceBin::High
    } else if p < 0.3 || p > 0.7 {
        ConfidenceBin::Medium
    } else {
        ConfidenceBin::Low
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Coded diabetic, model says no: if the coder is wrong it is a false code.
    CodedButModelNegative,
    /// Not coded, model says yes: if the coder is wrong it is a missing code.
    UncodedButModelPositive,
}

impl Direction {
    pub const ALL: [Direction; 2] = [Direction::CodedButModelNegative, Direction::UncodedButModelPositive];

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::CodedButModelNegative => "coded_but_model_negative",
            Direction::UncodedButModelPositive => "uncoded_but_model_positive",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.as_str() == s)
    }

    pub fn coded(self) -> bool {
        self == Direction::CodedButModelNegative
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscordantCase {
    pub encounter_id: String,
    pub p: f64,
    pub coded: bool,
    pub direction: Direction,
    pub bin: ConfidenceBin,
}

/// Records where `coded != (p > 0.5)`, in input order. A probability of
/// exactly 0.5 counts as a negative prediction.
pub fn find_discordant(records: &[PredictionRecord]) -> Result<Vec<DiscordantCase>> {
    let mut out = Vec::new();
    for r in records {
        let bin = assign_bin(r.p).map_err(|e| Error::Domain(format!("{}: {e}", r.encounter_id)))?;
        let predicted = r.p > DECISION_THRESHOLD;
        if predicted == r.coded {
            continue;
        }
        out.push(DiscordantCase {
            encounter_id: r.encounter_id.clone(),
            p: r.p,
            coded: r.coded,
            direction: if r.coded {
                Direction::CodedButModelNegative
            } else {
                Direction::UncodedButModelPositive
            },
            bin,
        });
    }
    Ok(out)
}

/// Discordant counts per (bin, direction); every key is present.
pub fn stratum_counts(cases: &[DiscordantCase]) -> BTreeMap<(ConfidenceBin, Direction), usize> {
    let mut counts: BTreeMap<_, usize> = ConfidenceBin::ALL
        .iter()
        .flat_map(|&b| Direction::ALL.iter().map(move |&d| ((b, d), 0)))
        .collect();
    for c in cases {
        *counts.entry((c.bin, c.direction)).or_default() += 1;
    }
    counts
}

const DISCORDANT_HEADER: [&str; 5] = ["encounter_id", "p", "coded", "direction", "bin"];

pub fn write_discordant_csv(cases: &[DiscordantCase], path: &Path) -> Result<()> {
    let fmt_err = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(fmt_err)?;
    w.write_record(DISCORDANT_HEADER).map_err(fmt_err)?;
    for c in cases {
        w.write_record([
            c.encounter_id.as_str(),
            &c.p.to_string(),
            if c.coded { "true" } else { "false" },
            c.direction.as_str(),
            c.bin.as_str(),
        ])
        .map_err(fmt_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_discordant_csv(path: &Path) -> Result<Vec<DiscordantCase>> {
    let file = path.display().to_string();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{file}: {e}")))?;
    let headers = r.headers().map_err(|e| Error::Format(format!("{file}: {e}")))?.clone();
    if headers.iter().ne(DISCORDANT_HEADER) {
        return Err(Error::Parse {
            file,
            line: 1,
            reason: format!("expected header {}", DISCORDANT_HEADER.join(",")),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i as u64 + 2;
        let bad = |reason: String| Error::Parse {
            file: file.clone(),
            line,
            reason,
        };
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let p: f64 = rec[1].parse().map_err(|_| bad(format!("bad probability {:?}", &rec[1])))?;
        let coded: bool = rec[2].parse().map_err(|_| bad(format!("bad flag {:?}", &rec[2])))?;
        let direction = Direction::parse(&rec[3]).ok_or_else(|| bad(format!("bad direction {:?}", &rec[3])))?;
        let bin = ConfidenceBin::parse(&rec[4]).ok_or_else(|| bad(format!("bad bin {:?}", &rec[4])))?;
        out.push(DiscordantCase {
            encounter_id: rec[0].to_string(),
            p,
            coded,
            direction,
            bin,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub per_bin: usize,
    pub per_direction: usize,
}

impl Default for SamplingPlan {
    fn default() -> Self {
        SamplingPlan {
            per_bin: 40,
            per_direction: 20,
        }
    }
}

impl SamplingPlan {
    pub fn validate(&self) -> Result<()> {
        if self.per_direction == 0 || self.per_bin != 2 * self.per_direction {
            return Err(Error::validation(
                "per_bin",
                format!(
                    "{} per bin must be twice the {} per direction",
                    self.per_bin, self.per_direction
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StratumDraw {
    pub bin: ConfidenceBin,
    pub direction: Direction,
    pub available: usize,
    pub drawn: usize,
    /// Fewer cases than the plan asked for; all of them were taken.
    pub shortfall: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditSample {
    /// Grouped by bin then direction; within a stratum in draw order.
    pub cases: Vec<DiscordantCase>,
    pub strata: Vec<StratumDraw>,
}

/// Up to `per_direction` cases from every (bin, direction) stratum,
/// uniformly without replacement.
pub fn stratified_sample(cases: &[DiscordantCase], plan: SamplingPlan, seed: u64) -> Result<AuditSample> {
    plan.validate()?;
    let mut sampled = Vec::new();
    let mut strata = Vec::new();
    for bin in ConfidenceBin::ALL {
        for direction in Direction::ALL {
            let mut pool: Vec<&DiscordantCase> =
                cases.iter().filter(|c| c.bin == bin && c.direction == direction).collect();
            let available = pool.len();
            pool.shuffle(&mut rng::stream(seed, &format!("sample/{bin}/{direction}")));
            pool.truncate(plan.per_direction);
            strata.push(StratumDraw {
                bin,
                direction,
                available,
                drawn: pool.len(),
                shortfall: available < plan.per_direction,
            });
            sampled.extend(pool.into_iter().cloned());
        }
    }
    Ok(AuditSample { cases: sampled, strata })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn printed_boundaries() {
        use ConfidenceBin::*;
        for (p, bin) in [
            (0.10, High),
            (0.86, High),
            (0.15, Medium),
            (0.85, Medium),
            (0.70, Low),
            (0.30, Low),
            (0.0, High),
            (1.0, High),
            (0.5, Low),
        ] {
            assert_eq!(assign_bin(p).unwrap(), bin, "p = {p}");
        }
        assert!(assign_bin(-0.01).is_err());
        assert!(assign_bin(f64::NAN).is_err());
    }

    fn case(id: usize, bin: ConfidenceBin, direction: Direction) -> DiscordantCase {
        DiscordantCase {
            encounter_id: format!("V{id}"),
            p: 0.5,
            coded: direction.coded(),
            direction,
            bin,
        }
    }

    #[test]
    fn discordance_definition() {
        let recs = vec![
            PredictionRecord::new("a", 0.4, true),
            PredictionRecord::new("b", 0.6, true),
            PredictionRecord::new("c", 0.5, false),
            PredictionRecord::new("d", 0.5, true),
            PredictionRecord::new("e", 0.95, false),
        ];
        let d = find_discordant(&recs).unwrap();
        let ids: Vec<&str> = d.iter().map(|c| c.encounter_id.as_str()).collect();
        assert_eq!(ids, ["a", "d", "e"]);
        assert_eq!(d[0].direction, Direction::CodedButModelNegative);
        assert_eq!(d[0].bin, ConfidenceBin::Low);
        assert_eq!(d[2].direction, Direction::UncodedButModelPositive);
        assert_eq!(d[2].bin, ConfidenceBin::High);
    }

    #[test]
    fn sampling_caps_and_shortfalls() {
        let mut cases = Vec::new();
        let mut id = 0;
        for (bin, n_neg, n_pos) in [(ConfidenceBin::High, 25, 30), (ConfidenceBin::Medium, 5, 60)] {
            for _ in 0..n_neg {
                cases.push(case(id, bin, Direction::CodedButModelNegative));
                id += 1;
            }
            for _ in 0..n_pos {
                cases.push(case(id, bin, Direction::UncodedButModelPositive));
                id += 1;
            }
        }
        let s = stratified_sample(&cases, SamplingPlan::default(), 1).unwrap();
        let drawn: Vec<(usize, bool)> = s.strata.iter().map(|d| (d.drawn, d.shortfall)).collect();
        assert_eq!(drawn, [(20, false), (20, false), (5, true), (20, false), (0, true), (0, true)]);
        assert_eq!(s.cases.len(), 65);
        assert_eq!(s, stratified_sample(&cases, SamplingPlan::default(), 1).unwrap());
        assert_ne!(s, stratified_sample(&cases, SamplingPlan::default(), 2).unwrap());
        let bad = SamplingPlan {
            per_bin: 30,
            per_direction: 20,
        };
        assert!(stratified_sample(&cases, bad, 1).is_err());
    }

    #[test]
    fn discordant_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("discordant.csv");
        let cases = vec![
            case(1, ConfidenceBin::Low, Direction::CodedButModelNegative),
            DiscordantCase {
                p: 0.123456789012345,
                ..case(2, ConfidenceBin::High, Direction::UncodedButModelPositive)
            },
        ];
        write_discordant_csv(&cases, &path).unwrap();
        assert_eq!(read_discordant_csv(&path).unwrap(), cases);
        std::fs::write(&path, "encounter_id,p,coded,direction,bin\nV1,0.2,true,sideways,low\n").unwrap();
        match read_discordant_csv(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
