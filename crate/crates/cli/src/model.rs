//! `train`, `search`, `baselines` and `evaluate`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use phenoaudit::featurize::FeatureMatrix;
use phenoaudit::metrics::{evaluate as evaluate_records, export_curves, PredictionRecord};
use phenoaudit::nn::{
    tapered_widths, Activation, Checkpoint, LossKind, MlpConfig, MlpModel, OptimizerConfig, DEFAULT_WIDTH_FLOOR,
};
use phenoaudit::pipeline::PreparedData;
use phenoaudit::rng::derive_seed;
use phenoaudit::trainer::{
    check_facility_free, facility_bundles, facility_result, hyperparameter_search, multi_facility_train,
    prediction_records, train, train_baseline, write_runs_tsv, BaselineKind, RunRecord, SearchGrid, TrainSchedule,
    DECISION_THRESHOLD,
};
use phenoaudit::{Error, Result};

use crate::data::load_prepared;
use crate::run_dir::RunDir;

pub const DNN: &str = "dnn";
pub const SEARCH_BEST: &str = "search_best";
pub const MULTI_FACILITY: &str = "multi_facility";
pub const RUNS_TSV: &str = "models/runs.tsv";
pub const BEST_CONFIG: &str = "models/best_config.toml";
pub const FACILITIES_CSV: &str = "metrics/facilities.csv";

/// Models `evaluate` looks for, in report order.
pub const EVALUATED: [&str; 4] = [DNN, "logistic", "linear_svm", SEARCH_BEST];

pub fn checkpoint_file(name: &str) -> String {
    format!("models/{name}.json")
}

pub fn run_record_file(name: &str) -> String {
    format!("models/{name}.run.json")
}

pub fn metrics_dir(name: &str) -> String {
    format!("metrics/{name}")
}

pub fn predictions_file(name: &str) -> String {
    format!("metrics/{name}/predictions.csv")
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::validation(what, e.to_string()))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patience: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
}

impl ScheduleSpec {
    /// The shuffle order always comes from the run seed.
    pub fn resolve(&self, master_seed: u64) -> Result<TrainSchedule> {
        let d = TrainSchedule::default();
        let s = TrainSchedule {
            max_epochs: self.max_epochs.unwrap_or(d.max_epochs),
            patience: self.patience.unwrap_or(d.patience),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            shuffle_seed: derive_seed(master_seed, "shuffle"),
        };
        s.validate()?;
        Ok(s)
    }
}

/// `train --config` file. Every field is optional; the defaults are the
/// ten-layer tanh network trained with Adam on squared error.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation: Option<Activation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l1_lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropout_rate: Option<f64>,
    /// Weight-initialisation and dropout seed; derived from the run seed
    /// when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerConfig>,
    #[serde(default)]
    pub schedule: ScheduleSpec,
}

impl ModelSpec {
    pub fn load(path: &Path) -> Result<Self> {
        read_toml(path, "model config")
    }

    pub fn from_config(c: &MlpConfig, schedule: &TrainSchedule) -> Self {
        ModelSpec {
            depth: Some(c.hidden_layers.len()),
            activation: Some(c.activation),
            loss: Some(c.loss),
            l1_lambda: Some(c.l1_lambda),
            dropout_rate: Some(c.dropout_rate),
            seed: Some(c.seed),
            optimizer: Some(c.optimizer),
            schedule: ScheduleSpec {
                max_epochs: Some(schedule.max_epochs),
                patience: Some(schedule.patience),
                batch_size: Some(schedule.batch_size),
            },
        }
    }

    pub fn resolve(&self, input_dim: usize, master_seed: u64) -> Result<(MlpConfig, TrainSchedule)> {
        let seed = self.seed.unwrap_or_else(|| derive_seed(master_seed, "model"));
        let mut c = MlpConfig::default_network(input_dim, seed);
        if let Some(depth) = self.depth {
            c.hidden_layers = tapered_widths(input_dim, depth, DEFAULT_WIDTH_FLOOR);
        }
        c.activation = self.activation.unwrap_or(c.activation);
        c.loss = self.loss.unwrap_or(c.loss);
        c.l1_lambda = self.l1_lambda.unwrap_or(c.l1_lambda);
        c.dropout_rate = self.dropout_rate.unwrap_or(c.dropout_rate);
        c.optimizer = self.optimizer.unwrap_or(c.optimizer);
        c.validate()?;
        Ok((c, self.schedule.resolve(master_seed)?))
    }
}

fn save_model(run: &mut RunDir, name: &str, model: MlpModel, data: &PreparedData) -> Result<()> {
    let checkpoint = Checkpoint {
        model,
        vocabulary_hash: data.vocabulary.fingerprint(),
        input_scaling: Some(data.standardizer.clone()),
    };
    run.produce(&checkpoint_file(name), |p| checkpoint.save(p))?;
    Ok(())
}

fn save_record(run: &mut RunDir, name: &str, record: &RunRecord) -> Result<()> {
    let text = serde_json::to_string_pretty(record).expect("run record serializes") + "\n";
    run.produce(&run_record_file(name), |p| fs::write(p, &text).map_err(|e| Error::io(p, e)))?;
    Ok(())
}

pub fn train_dnn(run: &mut RunDir, config: Option<&Path>) -> Result<()> {
    let spec = config.map(ModelSpec::load).transpose()?.unwrap_or_default();
    let data = load_prepared(run)?;
    let (config, schedule) = spec.resolve(data.train.width(), run.seed())?;
    let (model, record) = train(DNN, &config, &schedule, &data.train, &data.validation)?;
    tracing::info!(
        epochs = record.history.len(),
        best_epoch = ?record.best_epoch,
        validation_f1 = record.validation_f1,
        "network trained"
    );
    save_model(run, DNN, model, &data)?;
    save_record(run, DNN, &record)
}

/// Pooled training across facilities next to one model per facility, for
/// the per-facility comparison.
pub fn train_multi_facility(run: &mut RunDir, config: Option<&Path>, anchor: Option<&str>) -> Result<()> {
    let spec = config.map(ModelSpec::load).transpose()?.unwrap_or_default();
    let data = load_prepared(run)?;
    check_facility_free(&data.vocabulary)?;
    let (config, schedule) = spec.resolve(data.train.width(), run.seed())?;
    let bundles = facility_bundles(&data.train, &data.validation, &data.test);
    let anchor = match anchor {
        Some(a) if bundles.iter().any(|b| b.facility_id == a) => a.to_string(),
        Some(a) => return Err(Error::validation("anchor", format!("no facility {a:?} in the run"))),
        None => bundles
            .first()
            .map(|b| b.facility_id.clone())
            .ok_or_else(|| Error::Precondition("no facilities in the training split".into()))?,
    };
    let outcome = multi_facility_train(&bundles, &config, &schedule)?;

    let mut text = String::from("facility_id,anchor,test_rows,pool_rows,single_f1,multi_f1,single_auroc,multi_auroc\n");
    for pooled in &outcome.per_facility {
        let bundle = bundles
            .iter()
            .find(|b| b.facility_id == pooled.facility_id)
            .expect("result for a known facility");
        let label = format!("single/{}", bundle.facility_id);
        let (model, _) = train(&label, &config, &schedule, &bundle.train, &bundle.validation)?;
        let single = facility_result(&model, bundle)?;
        tracing::info!(
            facility = %bundle.facility_id,
            single_f1 = single.f1,
            multi_f1 = pooled.f1,
            "facility evaluated"
        );
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            bundle.facility_id,
            bundle.facility_id == anchor,
            pooled.test_rows,
            outcome.pool_counts[&bundle.facility_id],
            single.f1,
            pooled.f1,
            single.auroc,
            pooled.auroc
        ));
    }
    save_model(run, MULTI_FACILITY, outcome.model, &data)?;
    save_record(run, MULTI_FACILITY, &outcome.record)?;
    run.produce(FACILITIES_CSV, |p| fs::write(p, &text).map_err(|e| Error::io(p, e)))?;
    Ok(())
}

/// `search --config` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpec {
    #[serde(default = "SearchGrid::full")]
    pub grid: SearchGrid,
    #[serde(default)]
    pub schedule: ScheduleSpec,
}

impl Default for SearchSpec {
    fn default() -> Self {
        SearchSpec {
            grid: SearchGrid::full(),
            schedule: ScheduleSpec::default(),
        }
    }
}

pub fn search(run: &mut RunDir, config: Option<&Path>) -> Result<()> {
    let spec: SearchSpec = config.map(|p| read_toml(p, "search config")).transpose()?.unwrap_or_default();
    let data = load_prepared(run)?;
    let schedule = spec.schedule.resolve(run.seed())?;
    let template = MlpConfig::default_network(data.train.width(), derive_seed(run.seed(), "search"));
    tracing::info!(runs = spec.grid.len(), "starting grid search");
    let result = hyperparameter_search(&spec.grid, &template, &schedule, &data.train, &data.validation)?;
    run.produce(RUNS_TSV, |p| write_runs_tsv(&result.runs, p))?;
    let best_run = result.runs.first().expect("a validated grid has at least one point");
    let Some(best) = result.best else {
        return Err(Error::Training("every grid point diverged".into()));
    };
    tracing::info!(best = %best_run.label, validation_f1 = best_run.validation_f1, "grid search finished");
    let best_spec = ModelSpec::from_config(&best_run.config, &schedule);
    let text = toml::to_string(&best_spec).expect("model spec serializes");
    run.produce(BEST_CONFIG, |p| fs::write(p, &text).map_err(|e| Error::io(p, e)))?;
    save_model(run, SEARCH_BEST, best, &data)
}

pub fn baselines(run: &mut RunDir, config: Option<&Path>) -> Result<()> {
    let schedule_spec: ScheduleSpec = match config {
        Some(p) => read_toml::<ModelSpec>(p, "baseline config")?.schedule,
        None => ScheduleSpec::default(),
    };
    let schedule = schedule_spec.resolve(run.seed())?;
    let data = load_prepared(run)?;
    for kind in BaselineKind::ALL {
        let (model, record) = train_baseline(
            kind,
            derive_seed(run.seed(), "baseline"),
            &schedule,
            &data.train,
            &data.validation,
        )?;
        tracing::info!(baseline = %kind, validation_f1 = record.validation_f1, "baseline trained");
        save_model(run, kind.as_str(), model, &data)?;
        save_record(run, kind.as_str(), &record)?;
    }
    Ok(())
}

fn test_rows(data: &PreparedData, checkpoint: &Checkpoint, name: &str) -> Result<FeatureMatrix> {
    if checkpoint.vocabulary_hash != data.vocabulary.fingerprint() {
        return Err(Error::Precondition(format!(
            "model {name} was trained on a different feature vocabulary; retrain it"
        )));
    }
    let raw = data.raw.select(&data.split.test);
    Ok(match &checkpoint.input_scaling {
        Some(s) => s.transform(&raw),
        None => raw,
    })
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut text = String::from("encounter_id,p,coded\n");
    for r in records {
        text.push_str(&format!("{},{},{}\n", r.encounter_id, r.p, r.coded));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let bad = |reason: String| Error::Parse {
            file: file.clone(),
            line: i as u64 + 1,
            reason,
        };
        let fields: Vec<&str> = line.split(',').collect();
        let [id, p, coded] = fields[..] else {
            return Err(bad("expected encounter_id,p,coded".into()));
        };
        let p: f64 = p.parse().map_err(|_| bad(format!("bad probability {p:?}")))?;
        let coded: bool = coded.parse().map_err(|_| bad(format!("bad flag {coded:?}")))?;
        out.push(PredictionRecord::new(id, p, coded));
    }
    Ok(out)
}

/// Test-split metrics for every trained model present.
pub fn evaluate(run: &mut RunDir) -> Result<Vec<String>> {
    let present: Vec<&str> = EVALUATED.into_iter().filter(|n| run.exists(&checkpoint_file(n))).collect();
    if present.is_empty() {
        return Err(Error::MissingInput(format!(
            "{} (run `train` or `baselines` first)",
            checkpoint_file(DNN)
        )));
    }
    let data = load_prepared(run)?;
    let mut done = Vec::new();
    for name in present {
        let checkpoint = Checkpoint::load(&run.input(&checkpoint_file(name))?)?;
        let test = test_rows(&data, &checkpoint, name)?;
        let records = prediction_records(&checkpoint.model, &test)?;
        let eval = evaluate_records(&records, DECISION_THRESHOLD)?;
        tracing::info!(
            model = name,
            f1 = eval.confusion.f1,
            auroc = eval.auroc,
            ap = eval.average_precision,
            "evaluated on the test split"
        );
        let dir = run.path(&metrics_dir(name));
        for written in export_curves(&eval, &dir)? {
            let file = written.file_name().and_then(|f| f.to_str()).expect("curve file name");
            run.record(&format!("{}/{file}", metrics_dir(name)))?;
        }
        run.produce(&predictions_file(name), |p| write_predictions(p, &records))?;
        done.push(name.to_string());
    }
    Ok(done)
}
