use std::collections::BTreeMap;
use std::fs;

use phenoaudit::ehr::DiabetesCodeSet;
use phenoaudit::featurize::{FeatureMatrix, FeatureOptions};
use phenoaudit::pipeline::{prepare, SplitOptions};
use phenoaudit::synth::{generate_cohort, summarize_cohort, CohortConfig, ErrorKind, LEDGER_FILE};
use phenoaudit::trainer::{evaluate_model, train_baseline, BaselineKind, TrainSchedule};

#[test]
fn default_cohort_matches_its_configuration() {
    let cohort = generate_cohort(&CohortConfig::default()).unwrap();
    let n = cohort.encounters.len();
    assert!((19_000..=21_000).contains(&n), "{n}");
    assert!(cohort.ledger.is_consistent());
    for (enc, entry) in cohort.encounters.iter().zip(&cohort.ledger.entries) {
        assert_eq!(enc.encounter_id, entry.encounter_id);
        assert_eq!(enc.coded_diabetic, entry.coded_diabetic);
        assert_eq!(enc.coded_diabetic, entry.true_diabetic ^ (entry.error_kind != ErrorKind::None));
        assert!(enc.age_years >= 50);
    }
    let summary = summarize_cohort(&cohort.encounters, Some(&cohort.ledger));
    let truth = summary.true_prevalence.unwrap();
    assert!((0.29..=0.31).contains(&truth), "{truth}");
    assert!((summary.total_error_rate.unwrap() - 0.0907).abs() < 0.01);
    assert!(summary.missing_rate.unwrap() > summary.false_code_rate.unwrap());
    assert_eq!(summary.per_facility.len(), 5);
}

#[test]
fn same_seed_writes_identical_files() {
    let cfg = CohortConfig {
        n_patients: 400,
        seed: 5,
        ..CohortConfig::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let manifest = generate_cohort(&cfg).unwrap().write(a.path()).unwrap();
    generate_cohort(&cfg).unwrap().write(b.path()).unwrap();
    assert!(manifest.rows.contains_key(LEDGER_FILE));
    for name in manifest.rows.keys() {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name}");
    }
}

fn with_truth(m: &FeatureMatrix, truth: &BTreeMap<String, bool>) -> FeatureMatrix {
    FeatureMatrix {
        labels: m.encounter_ids.iter().map(|id| truth[id]).collect(),
        ..m.clone()
    }
}

/// AUROC against true labels of a logistic probe trained on true labels.
fn probe_auroc(signal: f64) -> f64 {
    let cfg = CohortConfig {
        n_patients: 3_000,
        signal_strength: signal,
        seed: 31,
        ..CohortConfig::default()
    };
    let cohort = generate_cohort(&cfg).unwrap();
    let truth = cohort.ledger.truth_map();
    let data = prepare(
        &cohort.encounters,
        &DiabetesCodeSet::default(),
        FeatureOptions::default(),
        SplitOptions {
            seed: 31,
            ..SplitOptions::default()
        },
    )
    .unwrap();
    let (train, val, test) = (
        with_truth(&data.train, &truth),
        with_truth(&data.validation, &truth),
        with_truth(&data.test, &truth),
    );
    let (model, _) = train_baseline(BaselineKind::Logistic, 31, &TrainSchedule::default(), &train, &val).unwrap();
    evaluate_model(&model, &test).unwrap().auroc
}

#[test]
fn separability_grows_with_signal_strength() {
    let aurocs: Vec<f64> = [0.1, 0.4, 0.8].into_iter().map(probe_auroc).collect();
    assert!(aurocs.windows(2).all(|w| w[0] <= w[1]), "{aurocs:?}");
    assert!(aurocs[2] > 0.95, "{aurocs:?}");
}
