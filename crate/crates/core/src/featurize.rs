//! Encounter records to model inputs.
//!
//! Each ordered lab contributes eight aggregate slots (count, min, max,
//! median, high/normal/low tallies and last-minus-first delta). Medications,
//! observations and demographics are 1-hot categorical slots. Diagnosis codes
//! from a patient's earlier encounters form a binary history block, plus one
//! bit for "any earlier encounter was coded diabetic".
//!
//! The vocabulary is built from the training split only and keeps a
//! candidate when it is present in at least `prevalence_threshold` of the
//! positive training cases. A lab that was never ordered fills all eight
//! slots with zero; the zero count marks it absent.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ehr::{DiabetesCodeSet, EncounterRecord, LabResult, Timestamp};
use crate::error::{Error, Result};
use crate::rng;

/// Reference range of one result; a missing bound never flags.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RefRange {
    pub low: Option<f64>,
    pub high: Option<f64>,
}

impl RefRange {
    pub fn new(low: f64, high: f64) -> Self {
        RefRange {
            low: Some(low),
            high: Some(high),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabAggregate {
    pub count: usize,
    pub min: f64,
    pub max: f64,
    pub median: f64,
    pub n_high: usize,
    pub n_normal: usize,
    pub n_low: usize,
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabField {
    Count,
    Min,
    Max,
    Median,
    High,
    Normal,
    Low,
    Delta,
}

impl LabField {
    pub const ALL: [LabField; 8] = [
        LabField::Count,
        LabField::Min,
        LabField::Max,
        LabField::Median,
        LabField::High,
        LabField::Normal,
        LabField::Low,
        LabField::Delta,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LabField::Count => "count",
            LabField::Min => "min",
            LabField::Max => "max",
            LabField::Median => "median",
            LabField::High => "n_high",
            LabField::Normal => "n_normal",
            LabField::Low => "n_low",
            LabField::Delta => "delta",
        }
    }
}

impl LabAggregate {
    pub fn field(&self, f: LabField) -> f64 {
        match f {
            LabField::Count => self.count as f64,
            LabField::Min => self.min,
            LabField::Max => self.max,
            LabField::Median => self.median,
            LabField::High => self.n_high as f64,
            LabField::Normal => self.n_normal as f64,
            LabField::Low => self.n_low as f64,
            LabField::Delta => self.delta,
        }
    }
}

/// Aggregate one test's time-ordered results.
///
/// Values equal to a bound are normal; only strictly greater / smaller
/// values are high / low. The median of an even-length list is the mean of
/// the two central values.
pub fn aggregate_lab(values: &[(f64, RefRange)]) -> Result<LabAggregate> {
    let (first, last) = match (values.first(), values.last()) {
        (Some(f), Some(l)) => (f.0, l.0),
        _ => return Err(Error::Precondition("aggregate_lab needs at least one value".into())),
    };
    let mut sorted: Vec<f64> = values.iter().map(|v| v.0).collect();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    let mut agg = LabAggregate {
        count: n,
        min: sorted[0],
        max: sorted[n - 1],
        median,
        n_high: 0,
        n_normal: 0,
        n_low: 0,
        delta: last - first,
    };
    for &(v, range) in values {
        if range.high.is_some_and(|h| v > h) {
            agg.n_high += 1;
        } else if range.low.is_some_and(|l| v < l) {
            agg.n_low += 1;
        } else {
            agg.n_normal += 1;
        }
    }
    Ok(agg)
}

/// Aggregate lab results grouped by test concept.
pub fn aggregate_results(labs: &[LabResult]) -> BTreeMap<&str, LabAggregate> {
    let mut by_test: BTreeMap<&str, Vec<(f64, RefRange)>> = BTreeMap::new();
    for lab in labs {
        by_test.entry(lab.test_concept_id.as_str()).or_default().push((
            lab.value,
            RefRange {
                low: lab.range_low,
                high: lab.range_high,
            },
        ));
    }
    by_test
        .into_iter()
        .map(|(k, v)| (k, aggregate_lab(&v).expect("grouped values are non-empty")))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    LabAggregate,
    Categorical,
    HistoryCode,
    HistoryDiabetes,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FeatureDescriptor {
    pub kind: FeatureKind,
    /// Lab concept, `med:`/`obs:`/`sex:`/`race:`/`age_band:` concept, or
    /// diagnosis code.
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<LabField>,
}

impl fmt::Display for FeatureDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            FeatureKind::LabAggregate => {
                write!(f, "lab:{}:{}", self.source, self.field.map(LabField::as_str).unwrap_or("?"))
            }
            FeatureKind::Categorical => write!(f, "cat:{}", self.source),
            FeatureKind::HistoryCode => write!(f, "hist:{}", self.source),
            FeatureKind::HistoryDiabetes => write!(f, "hist_diabetes"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureOptions {
    pub prevalence_threshold: f64,
    /// Whether the "earlier encounter coded diabetic" bit is a candidate.
    pub include_diabetes_history: bool,
}

impl Default for FeatureOptions {
    fn default() -> Self {
        FeatureOptions {
            prevalence_threshold: 0.05,
            include_diabetes_history: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureVocabulary {
    pub prevalence_threshold: f64,
    pub include_diabetes_history: bool,
    /// Number of distinct candidates seen before filtering.
    pub candidate_count: usize,
    pub descriptors: Vec<FeatureDescriptor>,
    #[serde(skip)]
    index: HashMap<FeatureDescriptor, usize>,
}

impl PartialEq for FeatureVocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.prevalence_threshold == other.prevalence_threshold
            && self.include_diabetes_history == other.include_diabetes_history
            && self.candidate_count == other.candidate_count
            && self.descriptors == other.descriptors
    }
}

/// A candidate feature group: one lab (eight slots) or one binary concept.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
enum Candidate {
    Lab(String),
    Categorical(String),
    HistoryCode(String),
    HistoryDiabetes,
}

fn age_band(age: u32) -> String {
    if age >= 90 {
        "age_band:90+".to_string()
    } else {
        let lo = age / 10 * 10;
        format!("age_band:{lo}-{}", lo + 9)
    }
}

fn categorical_concepts(enc: &EncounterRecord) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    out.insert(format!("sex:{}", enc.sex));
    out.insert(format!("race:{}", enc.race));
    out.insert(age_band(enc.age_years));
    out.extend(enc.meds.iter().map(|m| format!("med:{m}")));
    out.extend(enc.observations.iter().map(|o| format!("obs:{o}")));
    out
}

fn candidates(enc: &EncounterRecord, history: &PriorCodes, include_diabetes: bool) -> BTreeSet<Candidate> {
    let mut out = BTreeSet::new();
    out.extend(enc.labs.iter().map(|l| Candidate::Lab(l.test_concept_id.clone())));
    out.extend(categorical_concepts(enc).into_iter().map(Candidate::Categorical));
    out.extend(history.codes.iter().cloned().map(Candidate::HistoryCode));
    if include_diabetes && history.diabetic {
        out.insert(Candidate::HistoryDiabetes);
    }
    out
}

impl FeatureVocabulary {
    fn from_parts(
        prevalence_threshold: f64,
        include_diabetes_history: bool,
        candidate_count: usize,
        descriptors: Vec<FeatureDescriptor>,
    ) -> Result<Self> {
        let mut index = HashMap::with_capacity(descriptors.len());
        for (i, d) in descriptors.iter().enumerate() {
            if index.insert(d.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate feature descriptor {d}")));
            }
        }
        Ok(FeatureVocabulary {
            prevalence_threshold,
            include_diabetes_history,
            candidate_count,
            descriptors,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    pub fn position(&self, d: &FeatureDescriptor) -> Option<usize> {
        self.index.get(d).copied()
    }

    pub fn names(&self) -> Vec<String> {
        self.descriptors.iter().map(ToString::to_string).collect()
    }

    /// Diagnosis codes of the history block, in vocabulary order.
    pub fn history_codes(&self) -> Vec<String> {
        self.descriptors
            .iter()
            .filter(|d| d.kind == FeatureKind::HistoryCode)
            .map(|d| d.source.clone())
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("vocabulary serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: FeatureVocabulary =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("vocabulary.json: {e}")))?;
        Self::from_parts(
            raw.prevalence_threshold,
            raw.include_diabetes_history,
            raw.candidate_count,
            raw.descriptors,
        )
    }

    /// SHA-256 of the serialized descriptor list.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.descriptors).expect("descriptors serialize"));
        hex::encode(h.finalize())
    }
}

/// Build the vocabulary from training encounters and their histories.
/// Labels are the encounters' `coded_diabetic` flags.
pub fn build_vocabulary(
    train: &[&EncounterRecord],
    histories: &[&PriorCodes],
    options: FeatureOptions,
) -> Result<FeatureVocabulary> {
    if train.len() != histories.len() {
        return Err(Error::Shape(format!(
            "{} encounters but {} histories",
            train.len(),
            histories.len()
        )));
    }
    if !(0.0..=1.0).contains(&options.prevalence_threshold) {
        return Err(Error::validation(
            "prevalence_threshold",
            format!("{} is outside [0, 1]", options.prevalence_threshold),
        ));
    }
    let mut presence: BTreeMap<Candidate, usize> = BTreeMap::new();
    let mut positives = 0usize;
    for (enc, hist) in train.iter().zip(histories) {
        let cands = candidates(enc, hist, options.include_diabetes_history);
        if enc.coded_diabetic {
            positives += 1;
            for c in cands {
                *presence.entry(c).or_insert(0) += 1;
            }
        } else {
            for c in cands {
                presence.entry(c).or_insert(0);
            }
        }
    }
    if positives == 0 {
        return Err(Error::Precondition(
            "no positive training cases; the prevalence threshold is undefined".into(),
        ));
    }
    let candidate_count = presence.len();
    let mut descriptors = Vec::new();
    for (cand, hits) in presence {
        if (hits as f64) < options.prevalence_threshold * positives as f64 {
            continue;
        }
        match cand {
            Candidate::Lab(test) => descriptors.extend(LabField::ALL.iter().map(|&f| FeatureDescriptor {
                kind: FeatureKind::LabAggregate,
                source: test.clone(),
                field: Some(f),
            })),
            Candidate::Categorical(c) => descriptors.push(FeatureDescriptor {
                kind: FeatureKind::Categorical,
                source: c,
                field: None,
            }),
            Candidate::HistoryCode(c) => descriptors.push(FeatureDescriptor {
                kind: FeatureKind::HistoryCode,
                source: c,
                field: None,
            }),
            Candidate::HistoryDiabetes => descriptors.push(FeatureDescriptor {
                kind: FeatureKind::HistoryDiabetes,
                source: "diabetes".into(),
                field: None,
            }),
        }
    }
    FeatureVocabulary::from_parts(
        options.prevalence_threshold,
        options.include_diabetes_history,
        candidate_count,
        descriptors,
    )
}

/// Codes from all of a patient's earlier encounters.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PriorCodes {
    pub codes: BTreeSet<String>,
    /// Any earlier encounter was coded diabetic.
    pub diabetic: bool,
}

impl PriorCodes {
    pub fn vector(&self, code_vocabulary: &[String]) -> HistoryVector {
        HistoryVector {
            bits: code_vocabulary.iter().map(|c| self.codes.contains(c)).collect(),
            diabetes: self.diabetic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HistoryVector {
    pub bits: Vec<bool>,
    pub diabetes: bool,
}

/// History bits for an encounter admitted at `index_time`. Encounters that
/// do not strictly precede it are ignored.
pub fn build_history_vector(
    prior: &[&EncounterRecord],
    index_time: Timestamp,
    code_vocabulary: &[String],
    codes: &DiabetesCodeSet,
) -> HistoryVector {
    collect_prior(prior.iter().copied().filter(|e| e.admit_time < index_time), codes).vector(code_vocabulary)
}

fn collect_prior<'a>(prior: impl Iterator<Item = &'a EncounterRecord>, codes: &DiabetesCodeSet) -> PriorCodes {
    let mut out = PriorCodes::default();
    for enc in prior {
        out.codes.extend(enc.diagnosis_codes.iter().cloned());
        out.diabetic |= enc.coded_diabetic || codes.any_match(&enc.diagnosis_codes);
    }
    out
}

/// Prior codes for every encounter, aligned with `encounters`.
pub fn patient_histories(encounters: &[EncounterRecord], codes: &DiabetesCodeSet) -> Vec<PriorCodes> {
    let mut by_patient: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, e) in encounters.iter().enumerate() {
        by_patient.entry(e.patient_id.as_str()).or_default().push(i);
    }
    encounters
        .par_iter()
        .map(|enc| {
            let siblings = &by_patient[enc.patient_id.as_str()];
            collect_prior(
                siblings
                    .iter()
                    .map(|&j| &encounters[j])
                    .filter(|e| e.admit_time < enc.admit_time),
                codes,
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub encounter_id: String,
    pub values: Vec<f64>,
    pub label: bool,
}

/// Encode one encounter against a fixed vocabulary. `history` must be built
/// over [`FeatureVocabulary::history_codes`].
pub fn encode_encounter(enc: &EncounterRecord, history: &HistoryVector, vocab: &FeatureVocabulary) -> FeatureVector {
    let mut values = vec![0.0; vocab.len()];
    let aggregates = aggregate_results(&enc.labs);
    let concepts = categorical_concepts(enc);
    let history_codes = vocab.descriptors.iter().filter(|d| d.kind == FeatureKind::HistoryCode);
    let hist_bits: HashMap<&str, bool> = history_codes
        .map(|d| d.source.as_str())
        .zip(history.bits.iter().copied())
        .collect();
    for (slot, d) in vocab.descriptors.iter().enumerate() {
        values[slot] = match d.kind {
            FeatureKind::LabAggregate => aggregates
                .get(d.source.as_str())
                .map(|a| a.field(d.field.unwrap_or(LabField::Count)))
                .unwrap_or(0.0),
            FeatureKind::Categorical => f64::from(u8::from(concepts.contains(&d.source))),
            FeatureKind::HistoryCode => f64::from(u8::from(hist_bits.get(d.source.as_str()).copied().unwrap_or(false))),
            FeatureKind::HistoryDiabetes => f64::from(u8::from(history.diabetes)),
        };
    }
    FeatureVector {
        encounter_id: enc.encounter_id.clone(),
        values,
        label: enc.coded_diabetic,
    }
}

/// Dense design matrix with labels and bookkeeping columns.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub encounter_ids: Vec<String>,
    /// Kept for per-facility evaluation only; never a model input.
    pub facility_ids: Vec<String>,
    pub rows: Array2<f64>,
    pub labels: Vec<bool>,
}

impl FeatureMatrix {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.rows.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.rows.row(i)
    }

    pub fn select(&self, indices: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            encounter_ids: indices.iter().map(|&i| self.encounter_ids[i].clone()).collect(),
            facility_ids: indices.iter().map(|&i| self.facility_ids[i].clone()).collect(),
            rows: self.rows.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    /// Concatenate matrices of equal width.
    pub fn concat(parts: &[&FeatureMatrix]) -> Result<FeatureMatrix> {
        let width = parts.first().map(|p| p.width()).unwrap_or(0);
        if parts.iter().any(|p| p.width() != width) {
            return Err(Error::Shape("cannot concatenate matrices of different widths".into()));
        }
        let views: Vec<_> = parts.iter().map(|p| p.rows.view()).collect();
        let rows = if views.is_empty() {
            Array2::zeros((0, 0))
        } else {
            ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?
        };
        Ok(FeatureMatrix {
            encounter_ids: parts.iter().flat_map(|p| p.encounter_ids.iter().cloned()).collect(),
            facility_ids: parts.iter().flat_map(|p| p.facility_ids.iter().cloned()).collect(),
            rows,
            labels: parts.iter().flat_map(|p| p.labels.iter().copied()).collect(),
        })
    }
}

/// Encode every encounter; rows align with `encounters`.
pub fn encode_all(encounters: &[EncounterRecord], histories: &[PriorCodes], vocab: &FeatureVocabulary) -> FeatureMatrix {
    let history_codes = vocab.history_codes();
    let vectors: Vec<FeatureVector> = encounters
        .par_iter()
        .zip(histories.par_iter())
        .map(|(e, h)| encode_encounter(e, &h.vector(&history_codes), vocab))
        .collect();
    let mut rows = Array2::zeros((vectors.len(), vocab.len()));
    for (mut row, v) in rows.outer_iter_mut().zip(&vectors) {
        row.assign(&ArrayView1::from(&v.values));
    }
    FeatureMatrix {
        encounter_ids: vectors.iter().map(|v| v.encounter_id.clone()).collect(),
        facility_ids: encounters.iter().map(|e| e.facility_id.clone()).collect(),
        rows,
        labels: vectors.iter().map(|v| v.label).collect(),
    }
}

/// Column-wise z-scoring fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &Array2<f64>) -> Self {
        let n = rows.nrows().max(1) as f64;
        let mut mean = Vec::with_capacity(rows.ncols());
        let mut scale = Vec::with_capacity(rows.ncols());
        for col in rows.columns() {
            let m = col.sum() / n;
            let var = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
            mean.push(m);
            scale.push(if var > 1e-24 { var.sqrt() } else { 1.0 });
        }
        Standardizer { mean, scale }
    }

    pub fn identity(width: usize) -> Self {
        Standardizer {
            mean: vec![0.0; width],
            scale: vec![1.0; width],
        }
    }

    pub fn apply(&self, rows: &Array2<f64>) -> Array2<f64> {
        let mut out = rows.clone();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            let (m, s) = (self.mean[j], self.scale[j]);
            col.mapv_inplace(|x| (x - m) / s);
        }
        out
    }

    pub fn transform(&self, m: &FeatureMatrix) -> FeatureMatrix {
        FeatureMatrix {
            rows: self.apply(&m.rows),
            ..m.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "validation" => Some(Split::Validation),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl SplitIndices {
    pub fn assignment(&self, n: usize) -> Vec<Split> {
        let mut out = vec![Split::Train; n];
        for &i in &self.validation {
            out[i] = Split::Validation;
        }
        for &i in &self.test {
            out[i] = Split::Test;
        }
        out
    }
}

/// Label-stratified split: the test share is drawn first, validation is
/// then `val_fraction` of what remains.
pub fn split_dataset(labels: &[bool], test_fraction: f64, val_fraction: f64, seed: u64) -> Result<SplitIndices> {
    for (name, f) in [("test_fraction", test_fraction), ("val_fraction", val_fraction)] {
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::validation(name, format!("{f} is outside (0, 1)")));
        }
    }
    let mut rng = rng::stream(seed, "split");
    let mut out = SplitIndices {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for class in [true, false] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let n_test = (idx.len() as f64 * test_fraction).round() as usize;
        let n_val = ((idx.len() - n_test) as f64 * val_fraction).round() as usize;
        if class && (n_test == 0 || n_val == 0 || idx.len() - n_test - n_val == 0) {
            return Err(Error::Precondition(format!(
                "{} positive cases are too few to stratify into train/validation/test",
                idx.len()
            )));
        }
        out.test.extend_from_slice(&idx[..n_test]);
        out.validation.extend_from_slice(&idx[n_test..n_test + n_val]);
        out.train.extend_from_slice(&idx[n_test + n_val..]);
    }
    out.train.sort_unstable();
    out.validation.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

/// Write `features.csv`: encounter id followed by one column per descriptor.
pub fn write_features_csv(path: &Path, m: &FeatureMatrix, vocab: &FeatureVocabulary) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(file);
    let mut header = vec!["encounter_id".to_string()];
    header.extend(vocab.names());
    let wrap = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    w.write_record(&header).map_err(wrap)?;
    let mut record = Vec::with_capacity(header.len());
    for (i, id) in m.encounter_ids.iter().enumerate() {
        record.clear();
        record.push(id.clone());
        record.extend(m.rows.row(i).iter().map(|v| v.to_string()));
        w.write_record(&record).map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read `features.csv` back into `(encounter ids, rows)`.
pub fn read_features_csv(path: &Path, vocab: &FeatureVocabulary) -> Result<(Vec<String>, Array2<f64>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let name = path.display().to_string();
    let header = r.headers().map_err(|e| Error::Format(format!("{name}: {e}")))?.clone();
    let expected = vocab.names();
    if header.len() != expected.len() + 1 || header.iter().skip(1).ne(expected.iter().map(String::as_str)) {
        return Err(Error::Format(format!("{name}: columns do not match vocabulary.json")));
    }
    let mut ids = Vec::new();
    let mut flat = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| Error::Parse {
            file: name.clone(),
            line,
            reason: e.to_string(),
        })?;
        ids.push(rec.get(0).unwrap_or("").to_string());
        for v in rec.iter().skip(1) {
            flat.push(v.parse::<f64>().map_err(|_| Error::Parse {
                file: name.clone(),
                line,
                reason: format!("malformed value {v:?}"),
            })?);
        }
    }
    let rows = Array2::from_shape_vec((ids.len(), expected.len()), flat).map_err(|e| Error::Shape(e.to_string()))?;
    Ok((ids, rows))
}
