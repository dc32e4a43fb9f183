//! CDM-shaped encounter tables.
//!
//! Five CSV files make up a bundle:
//!
//! | file                | columns                                                          |
//! |---------------------|------------------------------------------------------------------|
//! | `person.csv`        | `person_id,sex,race,birth_year`                                  |
//! | `visit.csv`         | `visit_id,person_id,facility_id,admit_time`                      |
//! | `measurement.csv`   | `visit_id,test_concept_id,value,unit,range_low,range_high,result_time` |
//! | `drug_exposure.csv` | `visit_id,drug_concept_id`                                       |
//! | `condition.csv`     | `visit_id,condition_code`                                        |
//!
//! Timestamps are ISO-8601 UTC strings on disk and epoch seconds in memory.
//! Observations have no table of their own: they are stored as drug exposure
//! rows whose concept id carries the [`OBSERVATION_PREFIX`].

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Datelike, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Seconds since the Unix epoch, UTC.
pub type Timestamp = i64;

pub const PERSON_FILE: &str = "person.csv";
pub const VISIT_FILE: &str = "visit.csv";
pub const MEASUREMENT_FILE: &str = "measurement.csv";
pub const DRUG_FILE: &str = "drug_exposure.csv";
pub const CONDITION_FILE: &str = "condition.csv";

pub const TABLE_FILES: [&str; 5] = [PERSON_FILE, VISIT_FILE, MEASUREMENT_FILE, DRUG_FILE, CONDITION_FILE];

const PERSON_HEADER: [&str; 4] = ["person_id", "sex", "race", "birth_year"];
const VISIT_HEADER: [&str; 4] = ["visit_id", "person_id", "facility_id", "admit_time"];
const MEASUREMENT_HEADER: [&str; 7] = [
    "visit_id",
    "test_concept_id",
    "value",
    "unit",
    "range_low",
    "range_high",
    "result_time",
];
const DRUG_HEADER: [&str; 2] = ["visit_id", "drug_concept_id"];
const CONDITION_HEADER: [&str; 2] = ["visit_id", "condition_code"];

/// Drug-exposure concept ids starting with this prefix are observations.
pub const OBSERVATION_PREFIX: &str = "OBS:";

static DEFAULT_DIABETES_CODES: &str = include_str!("../data/diabetes_codes.txt");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabResult {
    pub test_concept_id: String,
    pub value: f64,
    pub unit: String,
    pub range_low: Option<f64>,
    pub range_high: Option<f64>,
    pub result_time: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncounterRecord {
    pub encounter_id: String,
    pub patient_id: String,
    pub facility_id: String,
    pub admit_time: Timestamp,
    pub age_years: u32,
    pub sex: String,
    pub race: String,
    /// Ordered by `result_time`.
    pub labs: Vec<LabResult>,
    pub meds: Vec<String>,
    pub observations: Vec<String>,
    pub diagnosis_codes: BTreeSet<String>,
    pub coded_diabetic: bool,
}

impl EncounterRecord {
    pub fn admit_year(&self) -> i32 {
        year_of(self.admit_time)
    }

    pub fn birth_year(&self) -> i32 {
        self.admit_year() - self.age_years as i32
    }

    /// Recompute `coded_diabetic` from the diagnosis codes.
    pub fn refresh_coded(&mut self, codes: &DiabetesCodeSet) {
        self.coded_diabetic = codes.any_match(&self.diagnosis_codes);
    }

    pub fn sort_labs(&mut self) {
        self.labs.sort_by_key(|l| l.result_time);
    }
}

/// The diagnosis codes that make up the target phenotype.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiabetesCodeSet {
    codes: BTreeSet<String>,
}

pub fn normalize_code(code: &str) -> String {
    code.trim().to_uppercase()
}

impl DiabetesCodeSet {
    /// Parse one code per line; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let codes: BTreeSet<String> = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or(""))
            .map(normalize_code)
            .filter(|c| !c.is_empty())
            .collect();
        if codes.is_empty() {
            return Err(Error::validation("diabetes code set", "no codes listed"));
        }
        Ok(DiabetesCodeSet { codes })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn from_codes<I, S>(codes: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let joined: Vec<String> = codes.into_iter().map(|c| c.as_ref().to_string()).collect();
        Self::parse(&joined.join("\n"))
    }

    pub fn contains(&self, code: &str) -> bool {
        self.codes.contains(&normalize_code(code))
    }

    pub fn any_match<'a, I: IntoIterator<Item = &'a String>>(&self, codes: I) -> bool {
        codes.into_iter().any(|c| self.contains(c))
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.codes.iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
}

impl Default for DiabetesCodeSet {
    /// ICD-9-CM codes of CCS categories 49 and 50.
    fn default() -> Self {
        Self::parse(DEFAULT_DIABETES_CODES).expect("bundled code list parses")
    }
}

pub fn format_timestamp(ts: Timestamp) -> String {
    DateTime::<Utc>::from_timestamp(ts, 0)
        .unwrap_or_default()
        .format("%Y-%m-%dT%H:%M:%SZ")
        .to_string()
}

pub fn parse_timestamp(s: &str) -> Option<Timestamp> {
    DateTime::parse_from_rfc3339(s.trim()).ok().map(|d| d.timestamp())
}

pub fn year_of(ts: Timestamp) -> i32 {
    DateTime::<Utc>::from_timestamp(ts, 0).unwrap_or_default().year()
}

/// Row counts of a written bundle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableManifest {
    pub directory: PathBuf,
    pub rows: BTreeMap<String, usize>,
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(file))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

fn opt_num(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Write `encounters` as a five-table bundle under `dir`.
pub fn write_tables(encounters: &[EncounterRecord], dir: &Path) -> Result<TableManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rows = BTreeMap::new();

    let path = dir.join(PERSON_FILE);
    let mut w = csv_writer(&path)?;
    w.write_record(PERSON_HEADER).map_err(|e| csv_err(&path, e))?;
    let mut seen = HashSet::new();
    let mut n = 0;
    for enc in encounters {
        if seen.insert(enc.patient_id.as_str()) {
            let by = enc.birth_year().to_string();
            w.write_record([enc.patient_id.as_str(), &enc.sex, &enc.race, &by])
                .map_err(|e| csv_err(&path, e))?;
            n += 1;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    rows.insert(PERSON_FILE.to_string(), n);

    let path = dir.join(VISIT_FILE);
    let mut w = csv_writer(&path)?;
    w.write_record(VISIT_HEADER).map_err(|e| csv_err(&path, e))?;
    for enc in encounters {
        w.write_record([
            enc.encounter_id.as_str(),
            &enc.patient_id,
            &enc.facility_id,
            &format_timestamp(enc.admit_time),
        ])
        .map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    rows.insert(VISIT_FILE.to_string(), encounters.len());

    let path = dir.join(MEASUREMENT_FILE);
    let mut w = csv_writer(&path)?;
    w.write_record(MEASUREMENT_HEADER).map_err(|e| csv_err(&path, e))?;
    let mut n = 0;
    for enc in encounters {
        for lab in &enc.labs {
            w.write_record([
                enc.encounter_id.as_str(),
                &lab.test_concept_id,
                &lab.value.to_string(),
                &lab.unit,
                &opt_num(lab.range_low),
                &opt_num(lab.range_high),
                &format_timestamp(lab.result_time),
            ])
            .map_err(|e| csv_err(&path, e))?;
            n += 1;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    rows.insert(MEASUREMENT_FILE.to_string(), n);

    let path = dir.join(DRUG_FILE);
    let mut w = csv_writer(&path)?;
    w.write_record(DRUG_HEADER).map_err(|e| csv_err(&path, e))?;
    let mut n = 0;
    for enc in encounters {
        for med in &enc.meds {
            w.write_record([enc.encounter_id.as_str(), med]).map_err(|e| csv_err(&path, e))?;
            n += 1;
        }
        for obs in &enc.observations {
            let id = format!("{OBSERVATION_PREFIX}{obs}");
            w.write_record([enc.encounter_id.as_str(), &id]).map_err(|e| csv_err(&path, e))?;
            n += 1;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    rows.insert(DRUG_FILE.to_string(), n);

    let path = dir.join(CONDITION_FILE);
    let mut w = csv_writer(&path)?;
    w.write_record(CONDITION_HEADER).map_err(|e| csv_err(&path, e))?;
    let mut n = 0;
    for enc in encounters {
        for code in &enc.diagnosis_codes {
            w.write_record([enc.encounter_id.as_str(), code]).map_err(|e| csv_err(&path, e))?;
            n += 1;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    rows.insert(CONDITION_FILE.to_string(), n);

    Ok(TableManifest {
        directory: dir.to_path_buf(),
        rows,
    })
}

/// A parsed CSV row together with its 1-based line number in the file.
struct Row {
    line: u64,
    fields: csv::StringRecord,
}

fn read_csv(dir: &Path, name: &str, header: &[&str]) -> Result<Vec<Row>> {
    let path = dir.join(name);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    // csv's own line counter lags by one after a CRLF terminator; count
    // newlines up to the record's start offset instead.
    let newlines: Vec<usize> = bytes.iter().enumerate().filter(|(_, &b)| b == b'\n').map(|(i, _)| i).collect();
    let line_at = |pos: Option<&csv::Position>| {
        pos.map(|p| 1 + newlines.partition_point(|&n| n <= p.byte() as usize) as u64)
            .unwrap_or(0)
    };
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(&bytes[..]);
    let found = reader.headers().map_err(|e| csv_err(&path, e))?.clone();
    if found.iter().map(str::trim).ne(header.iter().copied()) {
        return Err(Error::Parse {
            file: name.to_string(),
            line: 1,
            reason: format!("expected header {}", header.join(",")),
        });
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = line_at(e.position());
            Error::Parse {
                file: name.to_string(),
                line,
                reason: e.to_string(),
            }
        })?;
        let line = line_at(rec.position());
        rows.push(Row { line, fields: rec });
    }
    Ok(rows)
}

fn parse_err(file: &str, line: u64, reason: impl Into<String>) -> Error {
    Error::Parse {
        file: file.to_string(),
        line,
        reason: reason.into(),
    }
}

fn field<'a>(row: &'a Row, i: usize) -> &'a str {
    row.fields.get(i).unwrap_or("").trim()
}

fn parse_f64(file: &str, row: &Row, i: usize, name: &str) -> Result<f64> {
    field(row, i)
        .parse::<f64>()
        .map_err(|_| parse_err(file, row.line, format!("malformed {name} {:?}", field(row, i))))
}

fn parse_opt_f64(file: &str, row: &Row, i: usize, name: &str) -> Result<Option<f64>> {
    if field(row, i).is_empty() {
        Ok(None)
    } else {
        parse_f64(file, row, i, name).map(Some)
    }
}

fn parse_ts(file: &str, row: &Row, i: usize, name: &str) -> Result<Timestamp> {
    parse_timestamp(field(row, i))
        .ok_or_else(|| parse_err(file, row.line, format!("malformed {name} {:?}", field(row, i))))
}

struct Person {
    sex: String,
    race: String,
    birth_year: i32,
}

/// Parse and join a bundle. Encounters keep `visit.csv` order.
pub fn read_tables(dir: &Path, codes: &DiabetesCodeSet) -> Result<Vec<EncounterRecord>> {
    let mut persons: HashMap<String, Person> = HashMap::new();
    for row in read_csv(dir, PERSON_FILE, &PERSON_HEADER)? {
        let birth_year = field(&row, 3)
            .parse::<i32>()
            .map_err(|_| parse_err(PERSON_FILE, row.line, format!("malformed birth_year {:?}", field(&row, 3))))?;
        persons.insert(
            field(&row, 0).to_string(),
            Person {
                sex: field(&row, 1).to_string(),
                race: field(&row, 2).to_string(),
                birth_year,
            },
        );
    }

    let mut encounters = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for row in read_csv(dir, VISIT_FILE, &VISIT_HEADER)? {
        let person_id = field(&row, 1);
        let person = persons.get(person_id).ok_or_else(|| Error::Integrity {
            table: "visit".into(),
            row: row.line,
            reason: format!("unknown person_id {person_id:?}"),
        })?;
        let admit_time = parse_ts(VISIT_FILE, &row, 3, "admit_time")?;
        let age = year_of(admit_time) - person.birth_year;
        if age < 0 {
            return Err(parse_err(VISIT_FILE, row.line, "admit_time precedes birth_year"));
        }
        let id = field(&row, 0).to_string();
        if index.insert(id.clone(), encounters.len()).is_some() {
            return Err(Error::Integrity {
                table: "visit".into(),
                row: row.line,
                reason: format!("duplicate visit_id {id:?}"),
            });
        }
        encounters.push(EncounterRecord {
            encounter_id: id,
            patient_id: person_id.to_string(),
            facility_id: field(&row, 2).to_string(),
            admit_time,
            age_years: age as u32,
            sex: person.sex.clone(),
            race: person.race.clone(),
            labs: Vec::new(),
            meds: Vec::new(),
            observations: Vec::new(),
            diagnosis_codes: BTreeSet::new(),
            coded_diabetic: false,
        });
    }

    let lookup = |table: &str, row: &Row| -> Result<usize> {
        let id = field(row, 0);
        index.get(id).copied().ok_or_else(|| Error::Integrity {
            table: table.to_string(),
            row: row.line,
            reason: format!("unknown visit_id {id:?}"),
        })
    };

    for row in read_csv(dir, MEASUREMENT_FILE, &MEASUREMENT_HEADER)? {
        let at = lookup("measurement", &row)?;
        let lab = LabResult {
            test_concept_id: field(&row, 1).to_string(),
            value: parse_f64(MEASUREMENT_FILE, &row, 2, "value")?,
            unit: field(&row, 3).to_string(),
            range_low: parse_opt_f64(MEASUREMENT_FILE, &row, 4, "range_low")?,
            range_high: parse_opt_f64(MEASUREMENT_FILE, &row, 5, "range_high")?,
            result_time: parse_ts(MEASUREMENT_FILE, &row, 6, "result_time")?,
        };
        encounters[at].labs.push(lab);
    }

    for row in read_csv(dir, DRUG_FILE, &DRUG_HEADER)? {
        let at = lookup("drug_exposure", &row)?;
        let concept = field(&row, 1);
        match concept.strip_prefix(OBSERVATION_PREFIX) {
            Some(obs) => encounters[at].observations.push(obs.to_string()),
            None => encounters[at].meds.push(concept.to_string()),
        }
    }

    for row in read_csv(dir, CONDITION_FILE, &CONDITION_HEADER)? {
        let at = lookup("condition", &row)?;
        encounters[at].diagnosis_codes.insert(field(&row, 1).to_string());
    }

    for enc in &mut encounters {
        enc.sort_labs();
        enc.refresh_coded(codes);
    }
    Ok(encounters)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub encounter_id: String,
    pub problem: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Check every type invariant; never fails, only reports.
pub fn validate(encounters: &[EncounterRecord], codes: &DiabetesCodeSet) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut push = |id: &str, problem: String| {
        report.violations.push(Violation {
            encounter_id: id.to_string(),
            problem,
        })
    };

    let mut ids = HashSet::new();
    let mut people: HashMap<&str, (&str, &str, i32)> = HashMap::new();
    for enc in encounters {
        let id = enc.encounter_id.as_str();
        if !ids.insert(id) {
            push(id, "duplicate encounter_id".into());
        }
        let person = (enc.sex.as_str(), enc.race.as_str(), enc.birth_year());
        if let Some(prev) = people.insert(enc.patient_id.as_str(), person) {
            if prev != person {
                push(id, format!("demographics disagree with other encounters of {}", enc.patient_id));
            }
        }
        for lab in &enc.labs {
            if !lab.value.is_finite() {
                push(id, format!("non-finite value for {}", lab.test_concept_id));
            }
            if let (Some(lo), Some(hi)) = (lab.range_low, lab.range_high) {
                if lo > hi {
                    push(id, format!("range_low {lo} > range_high {hi} for {}", lab.test_concept_id));
                }
            }
        }
        if enc.labs.windows(2).any(|w| w[0].result_time > w[1].result_time) {
            push(id, "labs not ordered by result_time".into());
        }
        if enc.coded_diabetic != codes.any_match(&enc.diagnosis_codes) {
            push(id, "coded_diabetic disagrees with diagnosis codes".into());
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample_encounter(id: &str, codes: &[&str]) -> EncounterRecord {
        let t0 = parse_timestamp("2010-05-01T08:00:00Z").unwrap();
        EncounterRecord {
            encounter_id: id.to_string(),
            patient_id: format!("p-{id}"),
            facility_id: "fac-01".into(),
            admit_time: t0,
            age_years: 64,
            sex: "F".into(),
            race: "white".into(),
            labs: vec![
                LabResult {
                    test_concept_id: "GLUCOSE".into(),
                    value: 142.5,
                    unit: "mg/dL".into(),
                    range_low: Some(70.0),
                    range_high: Some(110.0),
                    result_time: t0 + 3600,
                },
                LabResult {
                    test_concept_id: "HBA1C".into(),
                    value: 7.1,
                    unit: "%".into(),
                    range_low: Some(4.0),
                    range_high: Some(5.6),
                    result_time: t0 + 7200,
                },
                LabResult {
                    test_concept_id: "TROPONIN".into(),
                    value: 0.01,
                    unit: "ng/mL".into(),
                    range_low: None,
                    range_high: Some(0.04),
                    result_time: t0 + 9000,
                },
            ],
            meds: vec!["METFORMIN".into()],
            observations: vec!["BMI_OVER_30".into()],
            diagnosis_codes: codes.iter().map(|c| c.to_string()).collect(),
            coded_diabetic: DiabetesCodeSet::default().any_match(&codes.iter().map(|c| c.to_string()).collect::<Vec<_>>()),
        }
    }

    #[test]
    fn code_set_normalizes_and_ignores_comments() {
        let set = DiabetesCodeSet::parse("# header\n 250.00 \ne11.9 # icd-10\n\n").unwrap();
        assert_eq!(set.len(), 2);
        assert!(set.contains("250.00"));
        assert!(set.contains("  E11.9"));
        assert!(!set.contains("250.0"));
        assert!(DiabetesCodeSet::parse("# nothing\n").is_err());
    }

    #[test]
    fn normalization_is_idempotent() {
        for code in DiabetesCodeSet::default().iter() {
            assert_eq!(normalize_code(code), code);
            assert_eq!(normalize_code(&normalize_code(code)), normalize_code(code));
        }
    }

    #[test]
    fn default_set_covers_ccs_49_and_50() {
        let set = DiabetesCodeSet::default();
        assert_eq!(set.len(), 40);
        assert!(set.contains("250.00") && set.contains("250.93"));
        assert!(!set.contains("401.9"));
    }

    #[test]
    fn timestamps_round_trip() {
        let ts = parse_timestamp("2013-12-31T23:59:59Z").unwrap();
        assert_eq!(format_timestamp(ts), "2013-12-31T23:59:59Z");
        assert_eq!(year_of(ts), 2013);
    }

    #[test]
    fn valid_encounter_has_empty_report() {
        let enc = sample_encounter("v1", &["250.00", "401.9"]);
        assert!(enc.coded_diabetic);
        assert!(validate(&[enc], &DiabetesCodeSet::default()).is_valid());
    }

    #[test]
    fn inverted_range_is_one_violation() {
        let mut enc = sample_encounter("v1", &["401.9"]);
        enc.labs[0].range_low = Some(120.0);
        let report = validate(&[enc], &DiabetesCodeSet::default());
        assert_eq!(report.violations.len(), 1);
        assert!(report.violations[0].problem.contains("range_low"));
    }

    #[test]
    fn nan_value_is_one_violation() {
        let mut enc = sample_encounter("v1", &[]);
        enc.labs[1].value = f64::NAN;
        assert_eq!(validate(&[enc], &DiabetesCodeSet::default()).violations.len(), 1);
    }

    #[test]
    fn stale_coded_flag_is_reported() {
        let mut enc = sample_encounter("v1", &["401.9"]);
        enc.coded_diabetic = true;
        assert_eq!(validate(&[enc], &DiabetesCodeSet::default()).violations.len(), 1);
    }
}
