use std::collections::{BTreeMap, BTreeSet};
use std::fs;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use phenoaudit::audit::{
    agreement_rates, assign_bin, blinding_violations, build_packets, find_discordant, project_prevalence,
    read_packets_jsonl, run_reviewer, stratified_sample, stratum_counts, write_packets_jsonl, ConfidenceBin,
    Direction, LedgerReviewer, SamplingPlan,
};
use phenoaudit::ehr::DiabetesCodeSet;
use phenoaudit::metrics::PredictionRecord;
use phenoaudit::synth::{generate_cohort, CohortConfig};

#[test]
fn every_grid_point_lands_in_exactly_one_bin() {
    use ConfidenceBin::*;
    let mut counts = BTreeMap::new();
    for k in 0..=10_000u32 {
        let p = k as f64 / 10_000.0;
        let bin = assign_bin(p).unwrap();
        let expected = if p < 0.15 || p > 0.85 {
            High
        } else if (0.3..=0.7).contains(&p) {
            Low
        } else {
            Medium
        };
        assert_eq!(bin, expected, "p = {p}");
        *counts.entry(bin).or_insert(0usize) += 1;
    }
    assert_eq!(counts.values().sum::<usize>(), 10_001);
    // 0..1499 and 8501..10000 high; 1500..2999 and 7001..8500 medium.
    assert_eq!(counts[&High], 3_000);
    assert_eq!(counts[&Medium], 3_000);
    assert_eq!(counts[&Low], 4_001);
    for (p, bin) in [(0.15, Medium), (0.30, Low), (0.70, Low), (0.85, Medium)] {
        assert_eq!(assign_bin(p).unwrap(), bin, "p = {p}");
    }
}

fn records() -> impl Strategy<Value = Vec<PredictionRecord>> {
    prop::collection::vec((0u32..=1000, any::<bool>()), 1..300).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (k, coded))| PredictionRecord::new(format!("E{i}"), k as f64 / 1000.0, coded))
            .collect()
    })
}

proptest! {
    #[test]
    fn discordant_and_concordant_partition_the_records(recs in records()) {
        let disc = find_discordant(&recs).unwrap();
        let ids: BTreeSet<&str> = disc.iter().map(|c| c.encounter_id.as_str()).collect();
        prop_assert_eq!(ids.len(), disc.len());
        for r in &recs {
            let concordant = (r.p > 0.5) == r.coded;
            prop_assert_eq!(concordant, !ids.contains(r.encounter_id.as_str()));
        }
        let counts = stratum_counts(&disc);
        prop_assert_eq!(counts.values().sum::<usize>(), disc.len());
    }

    #[test]
    fn sample_respects_strata(recs in records(), seed in any::<u64>()) {
        let disc = find_discordant(&recs).unwrap();
        let plan = SamplingPlan { per_bin: 8, per_direction: 4 };
        let sample = stratified_sample(&disc, plan, seed).unwrap();
        prop_assert_eq!(&sample, &stratified_sample(&disc, plan, seed).unwrap());
        let ids: BTreeSet<&str> = sample.cases.iter().map(|c| c.encounter_id.as_str()).collect();
        prop_assert_eq!(ids.len(), sample.cases.len());
        let counts = stratum_counts(&disc);
        for s in &sample.strata {
            prop_assert_eq!(s.available, counts[&(s.bin, s.direction)]);
            prop_assert_eq!(s.drawn, s.available.min(4));
            let n = sample.cases.iter().filter(|c| c.bin == s.bin && c.direction == s.direction).count();
            prop_assert_eq!(n, s.drawn);
        }
    }

    #[test]
    fn doubling_counts_doubles_the_projection(
        cells in prop::collection::vec(0usize..5_000, 6),
        wrong in prop::collection::vec(0usize..=40, 3),
    ) {
        let mut counts = BTreeMap::new();
        let mut i = 0;
        for bin in ConfidenceBin::ALL {
            for dir in Direction::ALL {
                counts.insert((bin, dir), cells[i]);
                i += 1;
            }
        }
        let report = synthetic_report(&wrong);
        let one = project_prevalence(&counts, &report, 100_000).unwrap();
        let doubled: BTreeMap<_, _> = counts.iter().map(|(k, v)| (*k, 2 * v)).collect();
        let two = project_prevalence(&doubled, &report, 100_000).unwrap();
        prop_assert_eq!(two.projected_incorrect, 2.0 * one.projected_incorrect);
    }
}

/// An agreement report with `wrong[b]` of 40 reviewed cases wrong in bin b.
fn synthetic_report(wrong: &[usize]) -> phenoaudit::audit::AgreementReport {
    use phenoaudit::audit::{BinAgreement, Proportion};
    phenoaudit::audit::AgreementReport {
        bins: ConfidenceBin::ALL
            .iter()
            .zip(wrong)
            .map(|(&bin, &w)| BinAgreement {
                bin,
                reviewed: 40,
                inconclusive: 0,
                coder_wrong: Proportion::new(w, 40),
                by_direction: BTreeMap::new(),
                diabetic: Proportion::new(0, 40),
                mean_p: None,
                low_confidence_fraction: None,
            })
            .collect(),
        judgments: 120,
        reviewers: 1,
    }
}

#[test]
fn oracle_review_of_random_scores_round_trips_and_stays_blind() {
    let cohort = generate_cohort(&CohortConfig {
        n_patients: 2_000,
        seed: 12,
        ..CohortConfig::default()
    })
    .unwrap();
    let codes = DiabetesCodeSet::default();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let recs: Vec<PredictionRecord> = cohort
        .encounters
        .iter()
        .map(|e| PredictionRecord::new(e.encounter_id.clone(), rng.random::<f64>(), e.coded_diabetic))
        .collect();
    let disc = find_discordant(&recs).unwrap();
    let sample = stratified_sample(&disc, SamplingPlan::default(), 3).unwrap();
    assert_eq!(sample.cases.len(), 120);
    let packets = build_packets(&sample.cases, &cohort.encounters, &codes, 3).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("packets.jsonl");
    write_packets_jsonl(&packets.packets, &path).unwrap();
    assert_eq!(read_packets_jsonl(&path).unwrap(), packets.packets);
    let text = fs::read_to_string(&path).unwrap();
    let probabilities: Vec<f64> = sample.cases.iter().map(|c| c.p).collect();
    assert_eq!(blinding_violations(&text, &probabilities, &codes), Vec::<String>::new());

    let truth = cohort.ledger.truth_map();
    let mut reviewer = LedgerReviewer {
        truth: &truth,
        token_map: &packets.token_map,
    };
    let judgments = run_reviewer(&mut reviewer, "oracle", &packets.packets, "2020-01-01T00:00:00Z");
    let report = agreement_rates(&judgments, &sample.cases, &packets.token_map).unwrap();
    for bin in ConfidenceBin::ALL {
        let b = report.bin(bin);
        let expected = sample
            .cases
            .iter()
            .filter(|c| c.bin == bin && truth[&c.encounter_id] != c.coded)
            .count();
        assert_eq!(b.coder_wrong.count, expected);
        assert_eq!(b.reviewed, 40);
    }
}
