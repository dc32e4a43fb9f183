use std::collections::BTreeSet;

use proptest::prelude::*;

use phenoaudit::ehr::DiabetesCodeSet;
use phenoaudit::featurize::{
    aggregate_lab, build_vocabulary, encode_encounter, patient_histories, split_dataset, FeatureOptions, RefRange,
};
use phenoaudit::pipeline::vocabulary_for;
use phenoaudit::synth::{generate_cohort, CohortConfig};

const LOW: f64 = 70.0;
const HIGH: f64 = 110.0;

/// Counts by direct comparison; median by insertion sort and the order
/// statistics definition.
fn oracle(values: &[f64]) -> (usize, f64, f64, f64, usize, usize, usize, f64) {
    let mut sorted: Vec<f64> = Vec::new();
    for &v in values {
        let at = sorted.iter().position(|&s| s > v).unwrap_or(sorted.len());
        sorted.insert(at, v);
    }
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[(n - 1) / 2]
    } else {
        0.5 * sorted[n / 2 - 1] + 0.5 * sorted[n / 2]
    };
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &v in values {
        min = min.min(v);
        max = max.max(v);
    }
    let high = values.iter().filter(|&&v| v > HIGH).count();
    let low = values.iter().filter(|&&v| v < LOW).count();
    (n, min, max, median, high, n - high - low, low, values[n - 1] - values[0])
}

fn lab_value() -> impl Strategy<Value = f64> {
    prop_oneof![
        Just(LOW),
        Just(HIGH),
        Just(LOW - 0.01),
        Just(HIGH + 0.01),
        (0u32..40_000).prop_map(|v| v as f64 / 100.0),
        -1e3f64..1e3,
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn aggregates_match_brute_force(values in prop::collection::vec(lab_value(), 1..40)) {
        let input: Vec<(f64, RefRange)> = values.iter().map(|&v| (v, RefRange::new(LOW, HIGH))).collect();
        let agg = aggregate_lab(&input).unwrap();
        let (n, min, max, median, high, normal, low, delta) = oracle(&values);
        prop_assert_eq!(agg.count, n);
        prop_assert_eq!(agg.min, min);
        prop_assert_eq!(agg.max, max);
        prop_assert!((agg.median - median).abs() <= 1e-12 * median.abs().max(1.0));
        prop_assert_eq!(agg.n_high, high);
        prop_assert_eq!(agg.n_normal, normal);
        prop_assert_eq!(agg.n_low, low);
        prop_assert_eq!(agg.delta, delta);
        prop_assert_eq!(agg.count, agg.n_high + agg.n_normal + agg.n_low);
        prop_assert!(agg.min <= agg.median && agg.median <= agg.max);
    }
}

#[test]
fn range_limits_are_normal() {
    let input = [(LOW, RefRange::new(LOW, HIGH)), (HIGH, RefRange::new(LOW, HIGH))];
    let agg = aggregate_lab(&input).unwrap();
    assert_eq!((agg.n_high, agg.n_normal, agg.n_low), (0, 2, 0));
}

fn cohort() -> (Vec<phenoaudit::ehr::EncounterRecord>, DiabetesCodeSet) {
    let cfg = CohortConfig {
        n_patients: 1_500,
        seed: 21,
        ..CohortConfig::default()
    };
    (generate_cohort(&cfg).unwrap().encounters, DiabetesCodeSet::default())
}

#[test]
fn vocabulary_ignores_the_test_split() {
    let (encounters, codes) = cohort();
    let labels: Vec<bool> = encounters.iter().map(|e| e.coded_diabetic).collect();
    let split = split_dataset(&labels, 0.2, 0.2, 4).unwrap();
    let full = vocabulary_for(&encounters, &codes, &split.train, FeatureOptions::default()).unwrap();

    let test: BTreeSet<usize> = split.test.iter().copied().collect();
    let kept: Vec<_> = encounters
        .iter()
        .enumerate()
        .filter(|(i, _)| !test.contains(i))
        .map(|(_, e)| e.clone())
        .collect();
    let kept_ids: Vec<&str> = kept.iter().map(|e| e.encounter_id.as_str()).collect();
    let train: Vec<usize> = split
        .train
        .iter()
        .map(|&i| kept_ids.iter().position(|id| *id == encounters[i].encounter_id).unwrap())
        .collect();
    let reduced = vocabulary_for(&kept, &codes, &train, FeatureOptions::default()).unwrap();
    assert_eq!(full, reduced);
}

#[test]
fn filter_shrinks_the_vocabulary_and_zero_threshold_keeps_everything() {
    let (encounters, codes) = cohort();
    let histories = patient_histories(&encounters, &codes);
    let enc: Vec<_> = encounters.iter().collect();
    let hist: Vec<_> = histories.iter().collect();
    let filtered = build_vocabulary(&enc, &hist, FeatureOptions::default()).unwrap();
    let all = build_vocabulary(
        &enc,
        &hist,
        FeatureOptions {
            prevalence_threshold: 0.0,
            ..FeatureOptions::default()
        },
    )
    .unwrap();
    assert_eq!(all.candidate_count, filtered.candidate_count);
    assert!(filtered.len() < all.len() / 2, "{} vs {}", filtered.len(), all.len());
}

#[test]
fn encoding_is_pure_and_ignores_unseen_concepts() {
    let (encounters, codes) = cohort();
    let histories = patient_histories(&encounters, &codes);
    let enc: Vec<_> = encounters.iter().collect();
    let hist: Vec<_> = histories.iter().collect();
    let vocab = build_vocabulary(&enc, &hist, FeatureOptions::default()).unwrap();
    let history_codes = vocab.history_codes();
    for (e, h) in encounters.iter().zip(&histories).take(200) {
        let hv = h.vector(&history_codes);
        let a = encode_encounter(e, &hv, &vocab);
        let b = encode_encounter(e, &hv, &vocab);
        assert_eq!(a, b);
        assert_eq!(a.values.len(), vocab.len());
        assert!(a.values.iter().all(|v| v.is_finite()));

        let mut extra = e.clone();
        extra.meds.push("NEVER_SEEN_DRUG".into());
        assert_eq!(encode_encounter(&extra, &hv, &vocab).values, a.values);
    }
}

#[test]
fn splits_are_disjoint_exhaustive_and_stratified() {
    let labels: Vec<bool> = (0..10_000).map(|i| i % 10 < 3).collect();
    let split = split_dataset(&labels, 0.2, 0.2, 77).unwrap();
    assert!((split.test.len() as i64 - 2_000).abs() <= 1, "{}", split.test.len());
    let mut all: Vec<usize> = split.train.iter().chain(&split.validation).chain(&split.test).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..10_000).collect::<Vec<_>>());
    for part in [&split.train, &split.validation, &split.test] {
        let rate = part.iter().filter(|&&i| labels[i]).count() as f64 / part.len() as f64;
        assert!((rate - 0.3).abs() < 0.005, "{rate}");
    }
    assert_eq!(split, split_dataset(&labels, 0.2, 0.2, 77).unwrap());
}
