//! `audit` subcommands: discordance, sampling, packets, review, rates and
//! the population projection.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use phenoaudit::audit::{
    agreement_rates, build_packets, find_discordant, project_prevalence, read_discordant_csv, read_judgments,
    read_packets_jsonl, read_token_map, run_reviewer, stratified_sample, stratum_counts, write_discordant_csv,
    write_judgments, write_packets_jsonl, write_token_map, AgreementReport, ConfidenceBin, Direction, LedgerReviewer,
    SamplingPlan,
};
use phenoaudit::ehr::DiabetesCodeSet;
use phenoaudit::rng::derive_seed;
use phenoaudit::{Error, Result};

use crate::data::{load_encounters, load_ledger};
use crate::model::{predictions_file, read_predictions};
use crate::run_dir::RunDir;

pub const DISCORDANT: &str = "audit/discordant.csv";
pub const STRATA: &str = "audit/strata.json";
pub const SAMPLE: &str = "audit/sample.csv";
pub const SAMPLE_STRATA: &str = "audit/sample_strata.json";
pub const PACKETS: &str = "audit/packets.jsonl";
pub const TOKEN_MAP: &str = "audit/token_map.csv";
pub const JUDGMENTS: &str = "audit/judgments.jsonl";
pub const RATES: &str = "audit/rates.json";
pub const ESTIMATE: &str = "audit/estimate.json";

pub const ORACLE_REVIEWER: &str = "oracle";
/// Fixed so that oracle judgment logs are reproducible byte for byte.
pub const ORACLE_TIMESTAMP: &str = "1970-01-01T00:00:00Z";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes") + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumCount {
    pub bin: ConfidenceBin,
    pub direction: Direction,
    pub count: usize,
}

/// Discordant counts over the whole audited population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Strata {
    pub model: String,
    pub n_total: usize,
    pub strata: Vec<StratumCount>,
}

pub fn bin(run: &mut RunDir, model: &str) -> Result<()> {
    let records = read_predictions(&run.input(&predictions_file(model))?)?;
    let cases = find_discordant(&records)?;
    let strata = Strata {
        model: model.to_string(),
        n_total: records.len(),
        strata: stratum_counts(&cases)
            .into_iter()
            .map(|((bin, direction), count)| StratumCount { bin, direction, count })
            .collect(),
    };
    tracing::info!(population = records.len(), discordant = cases.len(), "discordant cases binned");
    run.produce(DISCORDANT, |p| write_discordant_csv(&cases, p))?;
    run.produce(STRATA, |p| write_json(p, &strata))?;
    Ok(())
}

pub fn sample(run: &mut RunDir, plan: SamplingPlan) -> Result<()> {
    let cases = read_discordant_csv(&run.input(DISCORDANT)?)?;
    let drawn = stratified_sample(&cases, plan, derive_seed(run.seed(), "audit-sample"))?;
    for s in drawn.strata.iter().filter(|s| s.shortfall) {
        tracing::warn!(
            bin = %s.bin.as_str(),
            direction = %s.direction.as_str(),
            available = s.available,
            "stratum smaller than requested; all cases taken"
        );
    }
    run.produce(SAMPLE, |p| write_discordant_csv(&drawn.cases, p))?;
    run.produce(SAMPLE_STRATA, |p| write_json(p, &drawn.strata))?;
    Ok(())
}

pub fn packets(run: &mut RunDir) -> Result<()> {
    let cases = read_discordant_csv(&run.input(SAMPLE)?)?;
    let encounters = load_encounters(run)?;
    let set = build_packets(
        &cases,
        &encounters,
        &DiabetesCodeSet::default(),
        derive_seed(run.seed(), "packets"),
    )?;
    run.produce(PACKETS, |p| write_packets_jsonl(&set.packets, p))?;
    run.produce(TOKEN_MAP, |p| write_token_map(&set.token_map, p))?;
    tracing::info!(packets = set.packets.len(), "review packets written");
    Ok(())
}

/// Judge every packet from the planted ground truth.
pub fn oracle(run: &mut RunDir) -> Result<()> {
    let packets = read_packets_jsonl(&run.input(PACKETS)?)?;
    let token_map = read_token_map(&run.input(TOKEN_MAP)?)?;
    let truth = load_ledger(run)?.truth_map();
    let mut reviewer = LedgerReviewer {
        truth: &truth,
        token_map: &token_map,
    };
    let judgments = run_reviewer(&mut reviewer, ORACLE_REVIEWER, &packets, ORACLE_TIMESTAMP);
    run.produce(JUDGMENTS, |p| write_judgments(p, &judgments))?;
    Ok(())
}

pub fn rates(run: &mut RunDir) -> Result<AgreementReport> {
    let judgments = read_judgments(&run.input(JUDGMENTS)?)?;
    let cases = read_discordant_csv(&run.input(SAMPLE)?)?;
    let token_map = read_token_map(&run.input(TOKEN_MAP)?)?;
    let report = agreement_rates(&judgments, &cases, &token_map)?;
    run.produce(RATES, |p| write_json(p, &report))?;
    Ok(report)
}

pub fn project(run: &mut RunDir) -> Result<()> {
    let strata: Strata = read_json(&run.input(STRATA)?)?;
    let report: AgreementReport = read_json(&run.input(RATES)?)?;
    let counts: BTreeMap<(ConfidenceBin, Direction), usize> =
        strata.strata.iter().map(|s| ((s.bin, s.direction), s.count)).collect();
    let estimate = project_prevalence(&counts, &report, strata.n_total)?;
    tracing::info!(
        total = estimate.total_rate,
        missing = estimate.missing_rate,
        false_codes = estimate.false_code_rate,
        "miscoding rate projected"
    );
    run.produce(ESTIMATE, |p| estimate.write(p))?;
    Ok(())
}

/// Pull the judgment log from a running review service.
pub fn export(run: &mut RunDir, url: &str, owner: &str) -> Result<()> {
    let endpoint = format!("{}/export", url.trim_end_matches('/'));
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Error::io("tokio runtime", e))?;
    let body = runtime.block_on(async {
        let resp = reqwest::Client::new()
            .get(&endpoint)
            .bearer_auth(owner)
            .send()
            .await
            .map_err(|e| Error::Precondition(format!("{endpoint}: {e}")))?;
        let status = resp.status();
        let text = resp
            .text()
            .await
            .map_err(|e| Error::Precondition(format!("{endpoint}: {e}")))?;
        if !status.is_success() {
            return Err(Error::Precondition(format!("{endpoint} answered {status}: {text}")));
        }
        Ok(text)
    })?;
    // Parse before writing so a truncated body never replaces a good log.
    phenoaudit::audit::parse_judgments(&body, &endpoint)?;
    run.produce(JUDGMENTS, |p| fs::write(p, &body).map_err(|e| Error::io(p, e)))?;
    Ok(())
}
