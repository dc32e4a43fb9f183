use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::DiscordantCase;
use crate::ehr::{DiabetesCodeSet, EncounterRecord};
use crate::error::{Error, Result};
use crate::featurize::aggregate_results;
use crate::rng;

/// Rounding applied to every number shown to a reviewer. One decimal is
/// enough to read a lab and can never reproduce a three-decimal model
/// probability.
fn shown(v: f64) -> f64 {
    (v * 10.0).round() / 10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demographics {
    pub age_years: u32,
    pub sex: String,
    pub race: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacketLab {
    pub test: String,
    pub unit: String,
    pub range_low: Option<f64>,
    pub range_high: Option<f64>,
    pub count: usize,
    pub min: f64,
    pub max: f64,
    pub median: f64,
    pub first: f64,
    pub last: f64,
    pub n_high: usize,
    pub n_normal: usize,
    pub n_low: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistorySummary {
    pub prior_encounters: usize,
    /// Diagnosis codes seen on earlier encounters, diabetes codes removed.
    pub codes: Vec<String>,
}

/// What a reviewer sees for one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewPacket {
    pub token: String,
    pub demographics: Demographics,
    pub labs: Vec<PacketLab>,
    pub medications: Vec<String>,
    pub observations: Vec<String>,
    pub history: HistorySummary,
}

/// Build the blinded packet for one encounter. `prior` holds the patient's
/// encounters that were admitted strictly before this one.
pub fn make_review_packet(
    token: &str,
    encounter: &EncounterRecord,
    prior: &[&EncounterRecord],
    codes: &DiabetesCodeSet,
) -> ReviewPacket {
    let labs = aggregate_results(&encounter.labs)
        .into_iter()
        .map(|(test, agg)| {
            let results: Vec<_> = encounter.labs.iter().filter(|l| l.test_concept_id == test).collect();
            let first = results.first().expect("aggregated tests have results");
            let last = results.last().expect("aggregated tests have results");
            PacketLab {
                test: test.to_string(),
                unit: first.unit.clone(),
                range_low: first.range_low.map(shown),
                range_high: first.range_high.map(shown),
                count: agg.count,
                min: shown(agg.min),
                max: shown(agg.max),
                median: shown(agg.median),
                first: shown(first.value),
                last: shown(last.value),
                n_high: agg.n_high,
                n_normal: agg.n_normal,
                n_low: agg.n_low,
            }
        })
        .collect();
    let history_codes: BTreeSet<String> = prior
        .iter()
        .flat_map(|e| e.diagnosis_codes.iter())
        .filter(|c| !codes.contains(c))
        .cloned()
        .collect();
    let mut medications = encounter.meds.clone();
    medications.sort();
    medications.dedup();
    let mut observations = encounter.observations.clone();
    observations.sort();
    observations.dedup();
    ReviewPacket {
        token: token.to_string(),
        demographics: Demographics {
            age_years: encounter.age_years,
            sex: encounter.sex.clone(),
            race: encounter.race.clone(),
        },
        labs,
        medications,
        observations,
        history: HistorySummary {
            prior_encounters: prior.len(),
            codes: history_codes.into_iter().collect(),
        },
    }
}

/// Packets in presentation order and the owner-only token map.
#[derive(Debug, Clone, PartialEq)]
pub struct PacketSet {
    pub packets: Vec<ReviewPacket>,
    /// token → encounter_id
    pub token_map: BTreeMap<String, String>,
}

impl PacketSet {
    pub fn unblind(&self, token: &str) -> Option<&str> {
        self.token_map.get(token).map(String::as_str)
    }
}

fn new_token(rng: &mut rng::StreamRng) -> String {
    let mut bytes = [0u8; 16];
    rng.fill_bytes(&mut bytes);
    hex::encode(bytes)
}

/// One packet per sampled case, with fresh random tokens and a shuffled
/// order, both drawn from `seed`.
pub fn build_packets(
    cases: &[DiscordantCase],
    encounters: &[EncounterRecord],
    codes: &DiabetesCodeSet,
    seed: u64,
) -> Result<PacketSet> {
    let by_id: HashMap<&str, &EncounterRecord> = encounters.iter().map(|e| (e.encounter_id.as_str(), e)).collect();
    let mut by_patient: HashMap<&str, Vec<&EncounterRecord>> = HashMap::new();
    for e in encounters {
        by_patient.entry(e.patient_id.as_str()).or_default().push(e);
    }
    let mut token_rng = rng::stream(seed, "tokens");
    let mut packets = Vec::with_capacity(cases.len());
    let mut token_map = BTreeMap::new();
    for case in cases {
        let enc = by_id
            .get(case.encounter_id.as_str())
            .ok_or_else(|| Error::MissingInput(format!("encounter {} not found for review packet", case.encounter_id)))?;
        let prior: Vec<&EncounterRecord> = by_patient[enc.patient_id.as_str()]
            .iter()
            .copied()
            .filter(|e| e.admit_time < enc.admit_time)
            .collect();
        let token = loop {
            let t = new_token(&mut token_rng);
            if !token_map.contains_key(&t) {
                break t;
            }
        };
        token_map.insert(token.clone(), case.encounter_id.clone());
        packets.push(make_review_packet(&token, enc, &prior, codes));
    }
    packets.shuffle(&mut rng::stream(seed, "packet-order"));
    Ok(PacketSet { packets, token_map })
}

pub fn write_packets_jsonl(packets: &[ReviewPacket], path: &Path) -> Result<()> {
    let mut text = String::new();
    for p in packets {
        text.push_str(&serde_json::to_string(p).expect("packet serializes"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_packets_jsonl(path: &Path) -> Result<Vec<ReviewPacket>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                file: path.display().to_string(),
                line: i as u64 + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Written readable by the owner only where the platform supports it.
pub fn write_token_map(map: &BTreeMap<String, String>, path: &Path) -> Result<()> {
    let mut opts = fs::OpenOptions::new();
    opts.write(true).create(true).truncate(true);
    #[cfg(unix)]
    {
        use std::os::unix::fs::OpenOptionsExt;
        opts.mode(0o600);
    }
    let mut f = opts.open(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from("token,encounter_id\n");
    for (t, id) in map {
        text.push_str(&format!("{t},{id}\n"));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        fs::set_permissions(path, fs::Permissions::from_mode(0o600)).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_token_map(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let (t, id) = line.split_once(',').ok_or_else(|| Error::Parse {
            file: path.display().to_string(),
            line: i as u64 + 1,
            reason: "expected token,encounter_id".into(),
        })?;
        map.insert(t.to_string(), id.to_string());
    }
    Ok(map)
}

/// Keys that would reveal the model's view or the coder's label.
pub const FORBIDDEN_KEYS: [&str; 9] = [
    "p",
    "probability",
    "score",
    "bin",
    "confidence_bin",
    "direction",
    "coded",
    "coded_diabetic",
    "encounter_id",
];

fn collect_keys(v: &serde_json::Value, out: &mut Vec<String>) {
    match v {
        serde_json::Value::Object(map) => {
            for (k, v) in map {
                out.push(k.clone());
                collect_keys(v, out);
            }
        }
        serde_json::Value::Array(items) => items.iter().for_each(|v| collect_keys(v, out)),
        _ => {}
    }
}

/// Everything in `text` that breaks blinding: forbidden JSON keys (when
/// `text` parses as JSON or JSON lines), any model probability printed to
/// three decimals, and any diabetes code.
pub fn blinding_violations(text: &str, probabilities: &[f64], codes: &DiabetesCodeSet) -> Vec<String> {
    let mut found = Vec::new();
    let mut keys = Vec::new();
    let docs: Vec<serde_json::Value> = match serde_json::from_str(text) {
        Ok(v) => vec![v],
        Err(_) => text.lines().filter_map(|l| serde_json::from_str(l).ok()).collect(),
    };
    for d in &docs {
        collect_keys(d, &mut keys);
    }
    for k in keys {
        if FORBIDDEN_KEYS.contains(&k.as_str()) {
            found.push(format!("forbidden field {k:?}"));
        }
    }
    let mut seen = BTreeSet::new();
    for p in probabilities {
        let s = format!("{p:.3}");
        if seen.insert(s.clone()) && text.contains(&s) {
            found.push(format!("probability {s}"));
        }
    }
    for code in codes.iter() {
        if text.contains(code) {
            found.push(format!("diabetes code {code}"));
        }
    }
    found
}
