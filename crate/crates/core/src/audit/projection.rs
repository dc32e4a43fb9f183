use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AgreementReport, ConfidenceBin, Direction, Proportion};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinProjection {
    pub bin: ConfidenceBin,
    /// All discordant cases in the bin.
    pub count: usize,
    pub count_by_direction: BTreeMap<Direction, usize>,
    pub coder_wrong: Option<Proportion>,
    /// `count × rate`.
    pub projected_incorrect: f64,
    pub projected_missing: f64,
    pub projected_false: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrevalenceEstimate {
    pub n_total: usize,
    pub n_discordant: usize,
    pub bins: Vec<BinProjection>,
    pub projected_incorrect: f64,
    /// Projected incorrect codes as a share of all discordant cases.
    pub discordant_fraction: f64,
    /// Projected incorrect codes as a share of the whole population.
    pub total_rate: f64,
    pub missing_rate: f64,
    pub false_code_rate: f64,
}

impl PrevalenceEstimate {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("estimate serializes")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

/// Project per-bin rates onto every discordant case:
/// incorrect = Σ_bin count_bin × rate_bin, as a share of `n_total`.
///
/// Each bin's projection is split into missing codes (uncoded but model
/// positive) and false codes (coded but model negative) in proportion to
/// `count_direction × rate_direction`, substituting the bin rate for a
/// direction nobody reviewed.
pub fn project_prevalence(
    counts: &BTreeMap<(ConfidenceBin, Direction), usize>,
    rates: &AgreementReport,
    n_total: usize,
) -> Result<PrevalenceEstimate> {
    if n_total == 0 {
        return Err(Error::Precondition("population size is zero".into()));
    }
    let mut missing_rates = Vec::new();
    let mut bins = Vec::new();
    for bin in ConfidenceBin::ALL {
        let by_dir: BTreeMap<Direction, usize> = Direction::ALL
            .iter()
            .map(|&d| (d, counts.get(&(bin, d)).copied().unwrap_or(0)))
            .collect();
        let count: usize = by_dir.values().sum();
        let agreement = rates.bins.iter().find(|b| b.bin == bin);
        let bin_rate = agreement.and_then(|a| a.coder_wrong.rate);
        if count > 0 && bin_rate.is_none() {
            missing_rates.push(bin.as_str());
            continue;
        }
        let rate = bin_rate.unwrap_or(0.0);
        let projected = count as f64 * rate;
        let weight = |d: Direction| {
            let r = agreement
                .and_then(|a| a.by_direction.get(&d))
                .and_then(|p| p.rate)
                .unwrap_or(rate);
            by_dir[&d] as f64 * r
        };
        let (w_missing, w_false) = (weight(Direction::UncodedButModelPositive), weight(Direction::CodedButModelNegative));
        let missing_share = if w_missing + w_false > 0.0 {
            w_missing / (w_missing + w_false)
        } else if count > 0 {
            by_dir[&Direction::UncodedButModelPositive] as f64 / count as f64
        } else {
            0.0
        };
        bins.push(BinProjection {
            bin,
            count,
            count_by_direction: by_dir,
            coder_wrong: agreement.map(|a| a.coder_wrong),
            projected_incorrect: projected,
            projected_missing: projected * missing_share,
            projected_false: projected * (1.0 - missing_share),
        });
    }
    if !missing_rates.is_empty() {
        return Err(Error::Precondition(format!(
            "no reviewed cases for non-empty bin(s): {}",
            missing_rates.join(", ")
        )));
    }
    let n_discordant: usize = bins.iter().map(|b| b.count).sum();
    let projected: f64 = bins.iter().map(|b| b.projected_incorrect).sum();
    let missing: f64 = bins.iter().map(|b| b.projected_missing).sum();
    let false_codes: f64 = bins.iter().map(|b| b.projected_false).sum();
    let n = n_total as f64;
    Ok(PrevalenceEstimate {
        n_total,
        n_discordant,
        bins,
        projected_incorrect: projected,
        discordant_fraction: if n_discordant > 0 { projected / n_discordant as f64 } else { 0.0 },
        total_rate: projected / n,
        missing_rate: missing / n,
        false_code_rate: false_codes / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audit::BinAgreement;

    fn report(rates: [Option<(usize, usize)>; 3]) -> AgreementReport {
        AgreementReport {
            bins: ConfidenceBin::ALL
                .iter()
                .zip(rates)
                .map(|(&bin, r)| {
                    let (w, n) = r.unwrap_or((0, 0));
                    BinAgreement {
                        bin,
                        reviewed: n,
                        inconclusive: 0,
                        coder_wrong: Proportion::new(w, n),
                        by_direction: BTreeMap::new(),
                        diabetic: Proportion::new(0, n),
                        mean_p: None,
                        low_confidence_fraction: None,
                    }
                })
                .collect(),
            judgments: 0,
            reviewers: 1,
        }
    }

    fn counts(per_bin: [usize; 3]) -> BTreeMap<(ConfidenceBin, Direction), usize> {
        let mut m = BTreeMap::new();
        for (bin, c) in ConfidenceBin::ALL.iter().zip(per_bin) {
            m.insert((*bin, Direction::UncodedButModelPositive), c / 2);
            m.insert((*bin, Direction::CodedButModelNegative), c - c / 2);
        }
        m
    }

    #[test]
    fn hand_arithmetic() {
        // 0.875, 0.75, 0.60
        let rep = report([Some((35, 40)), Some((30, 40)), Some((24, 40))]);
        let est = project_prevalence(&counts([748, 787, 547]), &rep, 16_797).unwrap();
        assert!((est.projected_incorrect - 1572.95).abs() < 1e-9);
        assert!((est.total_rate - 0.09364469845805799).abs() < 1e-12);
        assert_eq!(est.n_discordant, 2082);
        assert!((est.missing_rate + est.false_code_rate - est.total_rate).abs() < 1e-15);
    }

    #[test]
    fn reference_scale_projection() {
        // 1,523 of 2,082 discordant → 9.07% of 16,797.
        let frac: f64 = 1523.0 / 2082.0;
        assert!((frac - 0.7315).abs() < 1e-4);
        assert!((1523.0f64 / 16_797.0 - 0.0907).abs() < 1e-4);
    }

    #[test]
    fn zero_rates_and_linearity() {
        let zero = report([Some((0, 40)), Some((0, 40)), Some((0, 40))]);
        assert_eq!(project_prevalence(&counts([10, 20, 30]), &zero, 100).unwrap().projected_incorrect, 0.0);
        let rep = report([Some((13, 40)), Some((7, 40)), Some((29, 40))]);
        let one = project_prevalence(&counts([101, 57, 33]), &rep, 1000).unwrap();
        let two = project_prevalence(&counts([202, 114, 66]), &rep, 1000).unwrap();
        assert_eq!(two.projected_incorrect, 2.0 * one.projected_incorrect);
    }

    #[test]
    fn missing_bin_rate_is_named() {
        let rep = report([Some((3, 4)), None, Some((1, 4))]);
        let err = project_prevalence(&counts([4, 4, 4]), &rep, 100).unwrap_err().to_string();
        assert!(err.contains("medium"), "{err}");
        // An empty bin needs no rate.
        assert!(project_prevalence(&counts([4, 0, 4]), &rep, 100).is_ok());
    }
}
