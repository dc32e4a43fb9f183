//! Deterministic synthetic cohorts with planted ground truth.
//!
//! Each patient has a true diabetes status that shifts glucose and HbA1c
//! upward, raises the odds of diabetes medications and of diabetes-related
//! comorbidity codes, and (through the coded labels of earlier visits) shows
//! up in the patient's history. Coder errors are then planted per encounter,
//! and every flip is recorded in an [`ErrorLedger`].
//!
//! `signal_strength` interpolates linearly between no diabetes signal at 0
//! and the maxima in [`LAB_CATALOG`] and the medication tables at 1.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use chrono::NaiveDate;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ehr::{self, DiabetesCodeSet, EncounterRecord, LabResult, TableManifest, Timestamp};
use crate::error::{Error, Result};
use crate::rng;

pub const LEDGER_FILE: &str = "error_ledger.csv";

/// One laboratory test the generator knows how to simulate.
#[derive(Debug, Clone, Copy)]
pub struct LabSpec {
    pub id: &'static str,
    pub unit: &'static str,
    pub range_low: f64,
    pub range_high: f64,
    pub mean: f64,
    pub sd: f64,
    /// Default probability the test is ordered in an encounter.
    pub propensity: f64,
    /// Mean shift for diabetics at full signal strength.
    pub diabetic_shift: f64,
    /// Extra ordering probability for diabetics at full signal strength.
    pub diabetic_order_boost: f64,
    /// Mean number of results once the test is ordered.
    pub mean_results: f64,
}

const fn lab(
    id: &'static str,
    unit: &'static str,
    range: (f64, f64),
    mean: f64,
    sd: f64,
    propensity: f64,
    diabetic_shift: f64,
    diabetic_order_boost: f64,
    mean_results: f64,
) -> LabSpec {
    LabSpec {
        id,
        unit,
        range_low: range.0,
        range_high: range.1,
        mean,
        sd,
        propensity,
        diabetic_shift,
        diabetic_order_boost,
        mean_results,
    }
}

pub const LAB_CATALOG: [LabSpec; 12] = [
    lab("GLUCOSE", "mg/dL", (70.0, 110.0), 102.0, 18.0, 0.95, 95.0, 0.0, 3.0),
    lab("HBA1C", "%", (4.0, 5.6), 5.5, 0.45, 0.25, 2.8, 0.6, 1.0),
    lab("CREATININE", "mg/dL", (0.6, 1.2), 1.0, 0.25, 0.9, 0.3, 0.0, 1.5),
    lab("BUN", "mg/dL", (7.0, 20.0), 16.0, 5.0, 0.9, 4.0, 0.0, 1.5),
    lab("POTASSIUM", "mmol/L", (3.5, 5.0), 4.2, 0.4, 0.92, 0.1, 0.0, 1.6),
    lab("SODIUM", "mmol/L", (135.0, 145.0), 139.0, 3.0, 0.92, -1.5, 0.0, 1.6),
    lab("HEMOGLOBIN", "g/dL", (12.0, 17.0), 13.0, 1.7, 0.9, -0.3, 0.0, 1.4),
    lab("WBC", "10^3/uL", (4.0, 11.0), 8.0, 2.5, 0.88, 0.0, 0.0, 1.4),
    lab("TRIGLYCERIDE", "mg/dL", (0.0, 150.0), 130.0, 50.0, 0.2, 70.0, 0.2, 1.0),
    lab("LDL", "mg/dL", (0.0, 130.0), 105.0, 30.0, 0.2, -10.0, 0.2, 1.0),
    lab("ALBUMIN", "g/dL", (3.5, 5.0), 3.8, 0.5, 0.5, -0.1, 0.0, 1.1),
    lab("TSH", "mIU/L", (0.4, 4.0), 2.0, 1.0, 0.15, 0.0, 0.0, 1.0),
];

/// Rarely ordered tests with no diabetes signal; the prevalence filter
/// should drop nearly all of them.
pub const RARE_LABS: usize = 60;
pub const RARE_DRUGS: usize = 80;
pub const RARE_CODES: usize = 80;

/// (concept, probability for diabetics at full signal, probability otherwise)
const DIABETES_DRUGS: [(&str, f64, f64); 5] = [
    ("METFORMIN", 0.6, 0.01),
    ("INSULIN_GLARGINE", 0.35, 0.005),
    ("INSULIN_LISPRO", 0.45, 0.04),
    ("GLIPIZIDE", 0.25, 0.003),
    ("SITAGLIPTIN", 0.1, 0.002),
];

/// (concept, probability for diabetics, probability otherwise); the gap is
/// scaled by signal strength.
const GENERAL_DRUGS: [(&str, f64, f64); 9] = [
    ("LISINOPRIL", 0.5, 0.3),
    ("ATORVASTATIN", 0.55, 0.3),
    ("ASPIRIN", 0.5, 0.4),
    ("HEPARIN", 0.6, 0.6),
    ("ONDANSETRON", 0.4, 0.4),
    ("ACETAMINOPHEN", 0.7, 0.7),
    ("FUROSEMIDE", 0.3, 0.22),
    ("METOPROLOL", 0.4, 0.33),
    ("PANTOPRAZOLE", 0.45, 0.45),
];

const OBSERVATIONS: [(&str, f64, f64); 4] = [
    ("BMI_OVER_30", 0.55, 0.3),
    ("SMOKER", 0.18, 0.2),
    ("FALL_RISK", 0.32, 0.3),
    ("NEUROPATHY_EXAM_ABNORMAL", 0.25, 0.05),
];

const COMORBIDITY_CODES: [(&str, f64, f64); 10] = [
    ("401.9", 0.7, 0.45),
    ("272.4", 0.5, 0.25),
    ("585.9", 0.2, 0.08),
    ("428.0", 0.15, 0.1),
    ("414.01", 0.25, 0.15),
    ("278.00", 0.2, 0.08),
    ("486", 0.1, 0.1),
    ("599.0", 0.1, 0.1),
    ("496", 0.1, 0.1),
    ("427.31", 0.15, 0.12),
];

/// Codes used when an encounter is coded diabetic, with relative weights.
const DIABETES_CODE_CHOICES: [(&str, f64); 4] = [("250.00", 0.7), ("250.02", 0.1), ("250.40", 0.1), ("250.60", 0.1)];

const RACES: [(&str, f64); 5] = [
    ("white", 0.70),
    ("black", 0.15),
    ("hispanic", 0.08),
    ("asian", 0.04),
    ("other", 0.03),
];

pub fn rare_lab_id(i: usize) -> String {
    format!("RARE_LAB_{i:03}")
}

pub fn rare_drug_id(i: usize) -> String {
    format!("RARE_DRUG_{i:03}")
}

pub fn rare_code(i: usize) -> String {
    format!("V{:02}.{}", 10 + i / 10, i % 10)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncounterCountSpec {
    pub min: u32,
    pub max: u32,
    /// Mean of the untruncated shifted geometric distribution.
    pub mean: f64,
}

impl Default for EncounterCountSpec {
    fn default() -> Self {
        EncounterCountSpec {
            min: 1,
            max: 6,
            mean: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FacilityProfile {
    pub facility_id: String,
    /// Additive offset applied to both values and reference ranges.
    #[serde(default)]
    pub reference_range_shift: BTreeMap<String, f64>,
    /// Overrides of [`LabSpec::propensity`].
    #[serde(default)]
    pub order_propensity: BTreeMap<String, f64>,
    #[serde(default = "one")]
    pub coder_error_multiplier: f64,
}

fn one() -> f64 {
    1.0
}

impl FacilityProfile {
    pub fn plain(id: impl Into<String>) -> Self {
        FacilityProfile {
            facility_id: id.into(),
            reference_range_shift: BTreeMap::new(),
            order_propensity: BTreeMap::new(),
            coder_error_multiplier: 1.0,
        }
    }

    fn shift(&self, lab: &str) -> f64 {
        self.reference_range_shift.get(lab).copied().unwrap_or(0.0)
    }

    fn propensity(&self, spec: &LabSpec) -> f64 {
        self.order_propensity.get(spec.id).copied().unwrap_or(spec.propensity)
    }

    /// The five-facility grid used by default.
    pub fn default_grid() -> Vec<FacilityProfile> {
        let rows: [(&str, f64, f64, f64, f64); 5] = [
            // id, glucose shift, creatinine shift, HbA1c propensity, error multiplier
            ("fac-01", 0.0, 0.0, 0.25, 1.0),
            ("fac-02", 6.0, 0.1, 0.32, 0.8),
            ("fac-03", -5.0, -0.05, 0.2, 1.2),
            ("fac-04", 3.0, 0.05, 0.28, 0.9),
            ("fac-05", -2.0, 0.0, 0.18, 1.1),
        ];
        rows.iter()
            .map(|&(id, glucose, creatinine, hba1c, mult)| FacilityProfile {
                facility_id: id.to_string(),
                reference_range_shift: [("GLUCOSE".to_string(), glucose), ("CREATININE".to_string(), creatinine)]
                    .into_iter()
                    .collect(),
                order_propensity: [("HBA1C".to_string(), hba1c)].into_iter().collect(),
                coder_error_multiplier: mult,
            })
            .collect()
    }
}

/// Rates are fractions of the whole encounter population: the defaults put
/// 5.68% of encounters in the missing-code state and 3.39% in the
/// false-code state, 9.07% in total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoderErrorConfig {
    pub miss_rate: f64,
    pub false_code_rate: f64,
}

impl Default for CoderErrorConfig {
    fn default() -> Self {
        CoderErrorConfig {
            miss_rate: 0.0568,
            false_code_rate: 0.0339,
        }
    }
}

impl CoderErrorConfig {
    pub const NONE: CoderErrorConfig = CoderErrorConfig {
        miss_rate: 0.0,
        false_code_rate: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("coder_error.miss_rate", self.miss_rate),
            ("coder_error.false_code_rate", self.false_code_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(name, format!("{v} is outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortConfig {
    pub n_patients: usize,
    #[serde(default)]
    pub encounters_per_patient: EncounterCountSpec,
    pub true_prevalence: f64,
    #[serde(rename = "facility", default = "FacilityProfile::default_grid")]
    pub facility_profiles: Vec<FacilityProfile>,
    #[serde(default)]
    pub coder_error: CoderErrorConfig,
    pub signal_strength: f64,
    pub seed: u64,
    #[serde(default = "default_min_age")]
    pub min_age_years: u32,
}

fn default_min_age() -> u32 {
    50
}

impl Default for CohortConfig {
    /// About 20,000 encounters at 30% prevalence over five facilities.
    fn default() -> Self {
        CohortConfig {
            n_patients: 13_350,
            encounters_per_patient: EncounterCountSpec::default(),
            true_prevalence: 0.30,
            facility_profiles: FacilityProfile::default_grid(),
            coder_error: CoderErrorConfig::default(),
            signal_strength: 0.8,
            seed: 143,
            min_age_years: 50,
        }
    }
}

impl CohortConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: CohortConfig = toml::from_str(text).map_err(|e| Error::validation("cohort config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("cohort config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 {
            return Err(Error::validation("n_patients", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.true_prevalence) {
            return Err(Error::validation(
                "true_prevalence",
                format!("{} is outside [0, 1]", self.true_prevalence),
            ));
        }
        if !(0.0..=1.0).contains(&self.signal_strength) {
            return Err(Error::validation(
                "signal_strength",
                format!("{} is outside [0, 1]", self.signal_strength),
            ));
        }
        let e = &self.encounters_per_patient;
        if e.min == 0 || e.max < e.min {
            return Err(Error::validation(
                "encounters_per_patient",
                format!("need 1 <= min <= max, got min {} max {}", e.min, e.max),
            ));
        }
        if !(e.mean >= e.min as f64 && e.mean <= e.max as f64) {
            return Err(Error::validation(
                "encounters_per_patient.mean",
                format!("{} is outside [min, max]", e.mean),
            ));
        }
        if self.facility_profiles.is_empty() {
            return Err(Error::validation("facility", "at least one facility profile is required"));
        }
        for f in &self.facility_profiles {
            if !(f.coder_error_multiplier > 0.0 && f.coder_error_multiplier.is_finite()) {
                return Err(Error::validation(
                    format!("facility {}.coder_error_multiplier", f.facility_id),
                    "must be positive",
                ));
            }
            for (lab, p) in &f.order_propensity {
                if !(0.0..=1.0).contains(p) {
                    return Err(Error::validation(
                        format!("facility {}.order_propensity.{lab}", f.facility_id),
                        format!("{p} is outside [0, 1]"),
                    ));
                }
            }
            for (lab, s) in &f.reference_range_shift {
                if !s.is_finite() {
                    return Err(Error::validation(
                        format!("facility {}.reference_range_shift.{lab}", f.facility_id),
                        "must be finite",
                    ));
                }
            }
        }
        self.coder_error.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    None,
    Missing,
    FalseCode,
}

impl ErrorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorKind::None => "none",
            ErrorKind::Missing => "missing",
            ErrorKind::FalseCode => "false_code",
        }
    }

    pub fn classify(true_diabetic: bool, coded_diabetic: bool) -> Self {
        match (true_diabetic, coded_diabetic) {
            (true, false) => ErrorKind::Missing,
            (false, true) => ErrorKind::FalseCode,
            _ => ErrorKind::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub encounter_id: String,
    pub true_diabetic: bool,
    pub coded_diabetic: bool,
    pub error_kind: ErrorKind,
}

/// Per-encounter ground truth of the planted coder errors.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ErrorLedger {
    pub entries: Vec<LedgerEntry>,
}

impl ErrorLedger {
    pub fn get(&self, encounter_id: &str) -> Option<&LedgerEntry> {
        self.entries.iter().find(|e| e.encounter_id == encounter_id)
    }

    pub fn truth_map(&self) -> BTreeMap<String, bool> {
        self.entries.iter().map(|e| (e.encounter_id.clone(), e.true_diabetic)).collect()
    }

    pub fn count(&self, kind: ErrorKind) -> usize {
        self.entries.iter().filter(|e| e.error_kind == kind).count()
    }

    pub fn is_consistent(&self) -> bool {
        self.entries
            .iter()
            .all(|e| e.coded_diabetic == (e.true_diabetic ^ (e.error_kind != ErrorKind::None))
                && e.error_kind == ErrorKind::classify(e.true_diabetic, e.coded_diabetic))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("encounter_id,true_diabetic,coded_diabetic,error_kind\r\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{}\r\n",
                e.encounter_id,
                e.true_diabetic,
                e.coded_diabetic,
                e.error_kind.as_str()
            ));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::Reader::from_reader(file);
        let name = path.display().to_string();
        let mut entries = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let line = i as u64 + 2;
            let rec = rec.map_err(|e| Error::Parse {
                file: name.clone(),
                line,
                reason: e.to_string(),
            })?;
            let flag = |j: usize| -> Result<bool> {
                rec.get(j).unwrap_or("").trim().parse::<bool>().map_err(|_| Error::Parse {
                    file: name.clone(),
                    line,
                    reason: format!("column {j} is not true/false"),
                })
            };
            let kind = match rec.get(3).unwrap_or("").trim() {
                "none" => ErrorKind::None,
                "missing" => ErrorKind::Missing,
                "false_code" => ErrorKind::FalseCode,
                other => {
                    return Err(Error::Parse {
                        file: name.clone(),
                        line,
                        reason: format!("unknown error_kind {other:?}"),
                    })
                }
            };
            entries.push(LedgerEntry {
                encounter_id: rec.get(0).unwrap_or("").trim().to_string(),
                true_diabetic: flag(1)?,
                coded_diabetic: flag(2)?,
                error_kind: kind,
            });
        }
        Ok(ErrorLedger { entries })
    }
}

/// Input row for [`plant_coder_errors`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrueLabel {
    pub encounter_id: String,
    pub facility_id: String,
    pub true_diabetic: bool,
}

/// Flip true labels into coder labels.
///
/// The configured rates are population fractions, so the per-encounter flip
/// probabilities are `miss_rate / prevalence` for diabetics and
/// `false_code_rate / (1 - prevalence)` for everyone else, each scaled by the
/// facility multiplier and capped at 1. Prevalence is taken from `labels`.
pub fn plant_coder_errors(
    labels: &[TrueLabel],
    errors: &CoderErrorConfig,
    facilities: &[FacilityProfile],
    seed: u64,
) -> Result<(Vec<bool>, ErrorLedger)> {
    errors.validate()?;
    let multipliers: BTreeMap<&str, f64> = facilities
        .iter()
        .map(|f| (f.facility_id.as_str(), f.coder_error_multiplier))
        .collect();
    let n = labels.len().max(1) as f64;
    let prevalence = labels.iter().filter(|l| l.true_diabetic).count() as f64 / n;
    let p_miss = if prevalence > 0.0 { errors.miss_rate / prevalence } else { 0.0 };
    let p_false = if prevalence < 1.0 {
        errors.false_code_rate / (1.0 - prevalence)
    } else {
        0.0
    };

    let mut rng = rng::stream(seed, "coder-errors");
    let mut coded = Vec::with_capacity(labels.len());
    let mut entries = Vec::with_capacity(labels.len());
    for label in labels {
        let mult = multipliers.get(label.facility_id.as_str()).copied().unwrap_or(1.0);
        let flip_p = if label.true_diabetic { p_miss } else { p_false };
        let flip_p = (flip_p * mult).min(1.0);
        // Always draw so the stream position is independent of the outcome.
        let u: f64 = rng.random();
        let is_coded = label.true_diabetic ^ (u < flip_p);
        coded.push(is_coded);
        entries.push(LedgerEntry {
            encounter_id: label.encounter_id.clone(),
            true_diabetic: label.true_diabetic,
            coded_diabetic: is_coded,
            error_kind: ErrorKind::classify(label.true_diabetic, is_coded),
        });
    }
    Ok((coded, ErrorLedger { entries }))
}

/// Generated tables plus their ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub encounters: Vec<EncounterRecord>,
    pub ledger: ErrorLedger,
}

impl Cohort {
    /// Write the five tables and `error_ledger.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<TableManifest> {
        let mut manifest = ehr::write_tables(&self.encounters, dir)?;
        self.ledger.write_csv(&dir.join(LEDGER_FILE))?;
        manifest.rows.insert(LEDGER_FILE.to_string(), self.ledger.entries.len());
        Ok(manifest)
    }

    pub fn true_labels(&self) -> Vec<bool> {
        self.ledger.entries.iter().map(|e| e.true_diabetic).collect()
    }
}

fn study_window() -> (Timestamp, Timestamp) {
    let start = NaiveDate::from_ymd_opt(2006, 8, 24).unwrap().and_hms_opt(0, 0, 0).unwrap();
    let end = NaiveDate::from_ymd_opt(2013, 12, 31).unwrap().and_hms_opt(0, 0, 0).unwrap();
    (start.and_utc().timestamp(), end.and_utc().timestamp())
}

const DAY: i64 = 86_400;

fn weighted<'a, R: Rng>(rng: &mut R, items: &[(&'a str, f64)]) -> &'a str {
    let total: f64 = items.iter().map(|i| i.1).sum();
    let mut u = rng.random::<f64>() * total;
    for (item, w) in items {
        if u < *w {
            return item;
        }
        u -= w;
    }
    items[items.len() - 1].0
}

/// Shifted geometric draw with the given mean above `min`, capped at `max`.
fn encounter_count<R: Rng>(rng: &mut R, spec: &EncounterCountSpec) -> u32 {
    let extra_mean = spec.mean - spec.min as f64;
    let mut n = spec.min;
    if extra_mean > 0.0 {
        let p = 1.0 / (extra_mean + 1.0);
        while n < spec.max && rng.random::<f64>() >= p {
            n += 1;
        }
    }
    n
}

fn results_count<R: Rng>(rng: &mut R, mean: f64) -> usize {
    let p = 1.0 / mean.max(1.0);
    let mut n = 1;
    while n < 8 && rng.random::<f64>() >= p {
        n += 1;
    }
    n
}

fn mix(diabetic: bool, strength: f64, yes: f64, no: f64) -> f64 {
    if diabetic {
        no + strength * (yes - no)
    } else {
        no
    }
}

struct PatientDraft {
    diabetic: bool,
    facility: usize,
    encounters: Vec<EncounterRecord>,
}

fn draft_patient(cfg: &CohortConfig, index: usize) -> PatientDraft {
    let mut rng = rng::indexed_stream(cfg.seed, "patient", index as u64);
    let s = cfg.signal_strength;
    let diabetic = rng.random::<f64>() < cfg.true_prevalence;
    let facility = rng.random_range(0..cfg.facility_profiles.len());
    let profile = &cfg.facility_profiles[facility];
    let sex = if rng.random::<bool>() { "F" } else { "M" };
    let race = weighted(&mut rng, &RACES);

    let age_noise = Normal::<f64>::new(if diabetic { 69.0 } else { 67.0 }, 10.0).unwrap();
    let first_age = (age_noise.sample(&mut rng).round() as i64).clamp(cfg.min_age_years as i64, 100.max(cfg.min_age_years as i64)) as u32;

    let (start, end) = study_window();
    let n_enc = encounter_count(&mut rng, &cfg.encounters_per_patient);
    let mut admit = start + rng.random_range(0..(end - start - 400 * DAY).max(DAY));
    let birth_year = ehr::year_of(admit) - first_age as i32;

    let mut encounters = Vec::with_capacity(n_enc as usize);
    for _ in 0..n_enc {
        let mut labs = Vec::new();
        for spec in LAB_CATALOG.iter() {
            let order_p = (profile.propensity(spec) + mix(diabetic, s, spec.diabetic_order_boost, 0.0)).min(1.0);
            if rng.random::<f64>() >= order_p {
                continue;
            }
            let shift = profile.shift(spec.id);
            let spread = if diabetic { spec.sd * (1.0 + 0.5 * s) } else { spec.sd };
            let center = spec.mean + mix(diabetic, s, spec.diabetic_shift, 0.0);
            let level = Normal::new(center, spread).unwrap().sample(&mut rng);
            let jitter = Normal::new(0.0, spec.sd * 0.35).unwrap();
            let mut t = admit + rng.random_range(0..6 * 3600);
            for _ in 0..results_count(&mut rng, spec.mean_results) {
                let raw = (level + jitter.sample(&mut rng)).max(spec.sd * 0.1);
                labs.push(LabResult {
                    test_concept_id: spec.id.to_string(),
                    value: round_to(raw + shift, 2),
                    unit: spec.unit.to_string(),
                    range_low: Some(round_to(spec.range_low + shift, 2)),
                    range_high: Some(round_to(spec.range_high + shift, 2)),
                    result_time: t,
                });
                t += rng.random_range(2 * 3600..24 * 3600);
            }
        }
        for i in 0..RARE_LABS {
            if rng.random::<f64>() < 0.005 + 0.0005 * (i % 40) as f64 {
                let v = round_to(Normal::new(50.0, 10.0).unwrap().sample(&mut rng), 2);
                labs.push(LabResult {
                    test_concept_id: rare_lab_id(i),
                    value: v,
                    unit: "U/L".to_string(),
                    range_low: Some(30.0),
                    range_high: Some(70.0),
                    result_time: admit + rng.random_range(0..48 * 3600),
                });
            }
        }

        let mut meds = Vec::new();
        for (name, yes, no) in DIABETES_DRUGS {
            if rng.random::<f64>() < mix(diabetic, s, yes, no) {
                meds.push(name.to_string());
            }
        }
        for (name, yes, no) in GENERAL_DRUGS {
            if rng.random::<f64>() < mix(diabetic, s, yes, no) {
                meds.push(name.to_string());
            }
        }
        for i in 0..RARE_DRUGS {
            if rng.random::<f64>() < 0.004 + 0.0004 * (i % 50) as f64 {
                meds.push(rare_drug_id(i));
            }
        }
        let mut observations = Vec::new();
        for (name, yes, no) in OBSERVATIONS {
            if rng.random::<f64>() < mix(diabetic, s, yes, no) {
                observations.push(name.to_string());
            }
        }
        let mut codes = std::collections::BTreeSet::new();
        for (code, yes, no) in COMORBIDITY_CODES {
            if rng.random::<f64>() < mix(diabetic, s, yes, no) {
                codes.insert(code.to_string());
            }
        }
        for i in 0..RARE_CODES {
            if rng.random::<f64>() < 0.004 + 0.0004 * (i % 50) as f64 {
                codes.insert(rare_code(i));
            }
        }

        let age = (ehr::year_of(admit) - birth_year) as u32;
        let mut enc = EncounterRecord {
            encounter_id: String::new(),
            patient_id: format!("P{index:06}"),
            facility_id: profile.facility_id.clone(),
            admit_time: admit,
            age_years: age,
            sex: sex.to_string(),
            race: race.to_string(),
            labs,
            meds,
            observations,
            diagnosis_codes: codes,
            coded_diabetic: false,
        };
        enc.sort_labs();
        encounters.push(enc);
        admit = (admit + rng.random_range(14..400) * DAY).min(end);
    }
    PatientDraft {
        diabetic,
        facility,
        encounters,
    }
}

fn round_to(x: f64, decimals: i32) -> f64 {
    let f = 10f64.powi(decimals);
    (x * f).round() / f
}

/// Generate a cohort. Output depends only on `config` (including its seed).
pub fn generate_cohort(config: &CohortConfig) -> Result<Cohort> {
    config.validate()?;
    let drafts: Vec<PatientDraft> = (0..config.n_patients)
        .into_par_iter()
        .map(|i| draft_patient(config, i))
        .collect();

    let mut encounters = Vec::new();
    let mut labels = Vec::new();
    for draft in drafts {
        for mut enc in draft.encounters {
            enc.encounter_id = format!("V{:07}", encounters.len());
            labels.push(TrueLabel {
                encounter_id: enc.encounter_id.clone(),
                facility_id: config.facility_profiles[draft.facility].facility_id.clone(),
                true_diabetic: draft.diabetic,
            });
            encounters.push(enc);
        }
    }

    let (coded, ledger) = plant_coder_errors(
        &labels,
        &config.coder_error,
        &config.facility_profiles,
        rng::derive_seed(config.seed, "coding"),
    )?;

    let code_set = DiabetesCodeSet::default();
    for (i, (enc, is_coded)) in encounters.iter_mut().zip(coded).enumerate() {
        if is_coded {
            let mut r = rng::indexed_stream(config.seed, "diabetes-code", i as u64);
            enc.diagnosis_codes.insert(weighted(&mut r, &DIABETES_CODE_CHOICES).to_string());
        }
        enc.refresh_coded(&code_set);
    }
    Ok(Cohort { encounters, ledger })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub encounters: usize,
    pub patients: usize,
    pub coded_prevalence: f64,
    /// False when no ledger was available; truth columns are then absent.
    pub truth_available: bool,
    pub true_prevalence: Option<f64>,
    pub missing_rate: Option<f64>,
    pub false_code_rate: Option<f64>,
    pub total_error_rate: Option<f64>,
    pub per_facility: BTreeMap<String, usize>,
}

pub fn summarize_cohort(encounters: &[EncounterRecord], ledger: Option<&ErrorLedger>) -> CohortSummary {
    let n = encounters.len();
    let denom = n.max(1) as f64;
    let mut per_facility = BTreeMap::new();
    for e in encounters {
        *per_facility.entry(e.facility_id.clone()).or_insert(0) += 1;
    }
    let patients = encounters
        .iter()
        .map(|e| e.patient_id.as_str())
        .collect::<std::collections::HashSet<_>>()
        .len();
    let coded = encounters.iter().filter(|e| e.coded_diabetic).count() as f64 / denom;
    let truth = ledger.map(|l| {
        let lden = l.entries.len().max(1) as f64;
        let truth = l.entries.iter().filter(|e| e.true_diabetic).count() as f64 / lden;
        let missing = l.count(ErrorKind::Missing) as f64 / lden;
        let false_code = l.count(ErrorKind::FalseCode) as f64 / lden;
        (truth, missing, false_code)
    });
    CohortSummary {
        encounters: n,
        patients,
        coded_prevalence: coded,
        truth_available: truth.is_some(),
        true_prevalence: truth.map(|t| t.0),
        missing_rate: truth.map(|t| t.1),
        false_code_rate: truth.map(|t| t.2),
        total_error_rate: truth.map(|t| t.1 + t.2),
        per_facility,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(n: usize, prevalence: f64, seed: u64) -> Vec<TrueLabel> {
        let mut rng = rng::stream(seed, "labels");
        (0..n)
            .map(|i| TrueLabel {
                encounter_id: format!("V{i}"),
                facility_id: "fac-01".into(),
                true_diabetic: rng.random::<f64>() < prevalence,
            })
            .collect()
    }

    fn small_config() -> CohortConfig {
        CohortConfig {
            n_patients: 300,
            ..CohortConfig::default()
        }
    }

    #[test]
    fn empty_cohort_is_rejected() {
        let cfg = CohortConfig {
            n_patients: 0,
            ..CohortConfig::default()
        };
        match generate_cohort(&cfg) {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "n_patients"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn out_of_range_fields_are_named() {
        let mut cfg = small_config();
        cfg.true_prevalence = 1.2;
        assert!(matches!(cfg.validate(), Err(Error::Validation { field, .. }) if field == "true_prevalence"));
        let mut cfg = small_config();
        cfg.facility_profiles[1].coder_error_multiplier = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = small_config();
        cfg.facility_profiles.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = small_config();
        cfg.coder_error.miss_rate = -0.1;
        assert!(matches!(cfg.validate(), Err(Error::Validation { field, .. }) if field == "coder_error.miss_rate"));
    }

    #[test]
    fn zero_noise_keeps_labels() {
        let l = labels(2_000, 0.3, 1);
        let (coded, ledger) = plant_coder_errors(&l, &CoderErrorConfig::NONE, &[], 9).unwrap();
        assert!(coded.iter().zip(&l).all(|(c, t)| *c == t.true_diabetic));
        assert!(ledger.entries.iter().all(|e| e.error_kind == ErrorKind::None));
    }

    #[test]
    fn default_rates_plant_about_nine_percent() {
        let l = labels(100_000, 0.3, 2);
        let (_, ledger) = plant_coder_errors(&l, &CoderErrorConfig::default(), &[], 5).unwrap();
        let total = (ledger.count(ErrorKind::Missing) + ledger.count(ErrorKind::FalseCode)) as f64 / 1e5;
        assert!((total - 0.0907).abs() <= 0.005, "total error {total}");
        assert!(ledger.is_consistent());
    }

    #[test]
    fn saturated_miss_rate_removes_every_code() {
        let l = labels(5_000, 0.3, 3);
        let errors = CoderErrorConfig {
            miss_rate: 1.0,
            false_code_rate: 0.0,
        };
        let (coded, _) = plant_coder_errors(&l, &errors, &[], 5).unwrap();
        assert!(l.iter().zip(&coded).all(|(t, c)| !(t.true_diabetic && *c)));
    }

    #[test]
    fn bad_rates_are_rejected() {
        let errors = CoderErrorConfig {
            miss_rate: 0.1,
            false_code_rate: 1.5,
        };
        assert!(plant_coder_errors(&labels(10, 0.3, 1), &errors, &[], 1).is_err());
    }

    #[test]
    fn facility_multiplier_scales_errors() {
        let mut l = labels(40_000, 0.3, 4);
        for (i, x) in l.iter_mut().enumerate() {
            x.facility_id = if i % 2 == 0 { "lo" } else { "hi" }.into();
        }
        let mut lo = FacilityProfile::plain("lo");
        lo.coder_error_multiplier = 0.5;
        let mut hi = FacilityProfile::plain("hi");
        hi.coder_error_multiplier = 1.5;
        let (_, ledger) = plant_coder_errors(&l, &CoderErrorConfig::default(), &[lo, hi], 1).unwrap();
        let rate = |parity: usize| {
            let sel: Vec<_> = ledger.entries.iter().enumerate().filter(|(i, _)| i % 2 == parity).collect();
            sel.iter().filter(|(_, e)| e.error_kind != ErrorKind::None).count() as f64 / sel.len() as f64
        };
        assert!(rate(1) > 2.0 * rate(0));
    }

    #[test]
    fn generation_is_deterministic_and_respects_age_floor() {
        let cfg = small_config();
        let a = generate_cohort(&cfg).unwrap();
        let b = generate_cohort(&cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.encounters.iter().all(|e| e.age_years >= cfg.min_age_years));
        assert!(a.ledger.is_consistent());
        let codes = DiabetesCodeSet::default();
        assert!(ehr::validate(&a.encounters, &codes).is_valid());
        for (enc, entry) in a.encounters.iter().zip(&a.ledger.entries) {
            assert_eq!(enc.encounter_id, entry.encounter_id);
            assert_eq!(enc.coded_diabetic, entry.coded_diabetic);
        }
    }

    #[test]
    fn different_seeds_differ() {
        let a = generate_cohort(&small_config()).unwrap();
        let b = generate_cohort(&CohortConfig {
            seed: 144,
            ..small_config()
        })
        .unwrap();
        assert_ne!(a.encounters, b.encounters);
    }

    #[test]
    fn summary_without_ledger_flags_missing_truth() {
        let cohort = generate_cohort(&small_config()).unwrap();
        let s = summarize_cohort(&cohort.encounters, None);
        assert!(!s.truth_available);
        assert!(s.true_prevalence.is_none() && s.total_error_rate.is_none());
        assert_eq!(s.encounters, cohort.encounters.len());
        assert_eq!(s.per_facility.values().sum::<usize>(), s.encounters);
    }

    #[test]
    fn zero_noise_summary_matches_truth() {
        let cfg = CohortConfig {
            coder_error: CoderErrorConfig::NONE,
            ..small_config()
        };
        let cohort = generate_cohort(&cfg).unwrap();
        let s = summarize_cohort(&cohort.encounters, Some(&cohort.ledger));
        assert_eq!(Some(s.coded_prevalence), s.true_prevalence);
        assert_eq!(s.total_error_rate, Some(0.0));
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = CohortConfig::default();
        let back = CohortConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, back);
        let minimal = CohortConfig::from_toml("n_patients = 10\ntrue_prevalence = 0.3\nsignal_strength = 0.5\nseed = 1\n").unwrap();
        assert_eq!(minimal.facility_profiles.len(), 5);
        assert_eq!(minimal.min_age_years, 50);
    }
}
