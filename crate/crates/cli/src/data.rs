//! `generate` and `featurize`, plus loaders for their outputs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use phenoaudit::ehr::{read_tables, DiabetesCodeSet, EncounterRecord, TABLE_FILES};
use phenoaudit::featurize::{
    encode_all, patient_histories, read_features_csv, split_dataset, write_features_csv, FeatureMatrix, FeatureOptions,
    FeatureVocabulary, Split, SplitIndices,
};
use phenoaudit::pipeline::{vocabulary_for, PreparedData};
use phenoaudit::rng::derive_seed;
use phenoaudit::synth::{generate_cohort, summarize_cohort, CohortConfig, ErrorLedger, LEDGER_FILE};
use phenoaudit::{Error, Result};

use crate::run_dir::RunDir;

pub const COHORT_CONFIG: &str = "data/cohort.toml";
pub const COHORT_SUMMARY: &str = "data/summary.json";
pub const VOCABULARY: &str = "features/vocabulary.json";
pub const FEATURES: &str = "features/features.csv";
pub const ROWS: &str = "features/rows.csv";

pub fn data_file(name: &str) -> String {
    format!("data/{name}")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn generate(run_root: &Path, config: Option<&Path>, seed: Option<u64>) -> Result<RunDir> {
    let mut cohort_config = match config {
        Some(p) => CohortConfig::load(p)?,
        None => CohortConfig::default(),
    };
    if let Some(s) = seed {
        cohort_config.seed = s;
    }
    let mut run = RunDir::create(run_root, cohort_config.seed)?;
    let cohort = generate_cohort(&cohort_config)?;
    let data_dir = run.path("data");
    cohort.write(&data_dir)?;
    for name in TABLE_FILES.iter().chain([&LEDGER_FILE]) {
        run.record(&data_file(name))?;
    }
    run.produce(COHORT_CONFIG, |p| write_text(p, &cohort_config.to_toml()))?;
    let summary = summarize_cohort(&cohort.encounters, Some(&cohort.ledger));
    run.produce(COHORT_SUMMARY, |p| {
        write_text(p, &(serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n"))
    })?;
    tracing::info!(encounters = cohort.encounters.len(), "cohort written");
    Ok(run)
}

pub fn load_encounters(run: &mut RunDir) -> Result<Vec<EncounterRecord>> {
    for name in TABLE_FILES {
        run.input(&data_file(name))?;
    }
    read_tables(&run.path("data"), &DiabetesCodeSet::default())
}

pub fn load_ledger(run: &mut RunDir) -> Result<ErrorLedger> {
    ErrorLedger::read_csv(&run.input(&data_file(LEDGER_FILE))?)
}

/// Optional `featurize --config` file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeaturizeConfig {
    #[serde(default)]
    pub features: FeatureOptions,
    #[serde(default)]
    pub split: SplitFractions,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub test_fraction: f64,
    /// Share of the non-test rows held out for validation.
    pub val_fraction: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            test_fraction: 0.20,
            val_fraction: 0.20,
        }
    }
}

impl FeaturizeConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::validation("featurize config", e.to_string()))
    }
}

pub fn featurize(run: &mut RunDir, config: Option<&Path>) -> Result<()> {
    let config = match config {
        Some(p) => FeaturizeConfig::load(p)?,
        None => FeaturizeConfig::default(),
    };
    let codes = DiabetesCodeSet::default();
    let encounters = load_encounters(run)?;
    let labels: Vec<bool> = encounters.iter().map(|e| e.coded_diabetic).collect();
    let split = split_dataset(
        &labels,
        config.split.test_fraction,
        config.split.val_fraction,
        derive_seed(run.seed(), "split"),
    )?;
    let vocabulary = vocabulary_for(&encounters, &codes, &split.train, config.features)?;
    let raw = encode_all(&encounters, &patient_histories(&encounters, &codes), &vocabulary);

    run.produce(VOCABULARY, |p| write_text(p, &vocabulary.to_json()))?;
    run.produce(FEATURES, |p| write_features_csv(p, &raw, &vocabulary))?;
    let assignment = split.assignment(encounters.len());
    run.produce(ROWS, |p| write_rows(p, &raw, &assignment))?;
    tracing::info!(
        features = vocabulary.len(),
        train = split.train.len(),
        validation = split.validation.len(),
        test = split.test.len(),
        "features written"
    );
    Ok(())
}

fn write_rows(path: &Path, m: &FeatureMatrix, assignment: &[Split]) -> Result<()> {
    let wrap = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(wrap)?;
    w.write_record(["encounter_id", "facility_id", "coded", "split"]).map_err(wrap)?;
    for (i, id) in m.encounter_ids.iter().enumerate() {
        w.write_record([
            id.as_str(),
            m.facility_ids[i].as_str(),
            if m.labels[i] { "true" } else { "false" },
            assignment[i].as_str(),
        ])
        .map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

struct RowInfo {
    facility_id: String,
    coded: bool,
    split: Split,
}

fn read_rows(path: &Path) -> Result<Vec<(String, RowInfo)>> {
    let file = path.display().to_string();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{file}: {e}")))?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let bad = |reason: String| Error::Parse {
            file: file.clone(),
            line: i as u64 + 2,
            reason,
        };
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", rec.len())));
        }
        let coded = rec[2].parse().map_err(|_| bad(format!("bad flag {:?}", &rec[2])))?;
        let split = Split::parse(&rec[3]).ok_or_else(|| bad(format!("bad split {:?}", &rec[3])))?;
        out.push((
            rec[0].to_string(),
            RowInfo {
                facility_id: rec[1].to_string(),
                coded,
                split,
            },
        ));
    }
    Ok(out)
}

/// Features, split and labels as written by `featurize`, with scaling
/// refitted on the training rows.
pub fn load_prepared(run: &mut RunDir) -> Result<PreparedData> {
    let vocab_path = run.input(VOCABULARY)?;
    let vocabulary =
        FeatureVocabulary::from_json(&fs::read_to_string(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?)?;
    let (ids, rows) = read_features_csv(&run.input(FEATURES)?, &vocabulary)?;
    let info = read_rows(&run.input(ROWS)?)?;
    if info.len() != ids.len() || info.iter().zip(&ids).any(|((a, _), b)| a != b) {
        return Err(Error::Integrity {
            table: ROWS.into(),
            row: 0,
            reason: format!("rows do not line up with {FEATURES}"),
        });
    }
    let mut split = SplitIndices {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for (i, (_, r)) in info.iter().enumerate() {
        match r.split {
            Split::Train => split.train.push(i),
            Split::Validation => split.validation.push(i),
            Split::Test => split.test.push(i),
        }
    }
    let raw = FeatureMatrix {
        encounter_ids: ids,
        facility_ids: info.iter().map(|(_, r)| r.facility_id.clone()).collect(),
        rows,
        labels: info.iter().map(|(_, r)| r.coded).collect(),
    };
    Ok(PreparedData::from_parts(vocabulary, split, raw))
}
