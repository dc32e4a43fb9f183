//! Training runs: single model training with early stopping, grid search,
//! linear baselines and the balanced multi-facility protocol.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use ndarray::Axis;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurize::{FeatureKind, FeatureMatrix, FeatureVocabulary};
use crate::metrics::{self, Evaluation, PredictionRecord};
use crate::nn::{
    eval_loss, init_model, tapered_widths, Activation, LossKind, MlpConfig, MlpModel, OptimizerConfig,
    DEFAULT_WIDTH_FLOOR,
};
use crate::rng;

/// Probability threshold for predicted-positive, shared with the audit.
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub max_epochs: usize,
    /// Stop after this many epochs without a new best validation loss;
    /// 0 disables early stopping.
    pub patience: usize,
    pub batch_size: usize,
    pub shuffle_seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            max_epochs: 40,
            patience: 5,
            batch_size: 256,
            shuffle_seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size", "must be at least 1"));
        }
        if self.patience > self.max_epochs {
            return Err(Error::validation(
                "patience",
                format!("{} exceeds max_epochs {}", self.patience, self.max_epochs),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training-mode loss (dropout active) over the epoch's batches.
    pub train_loss: f64,
    pub validation_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged { epoch: usize, reason: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub config: MlpConfig,
    pub seed: u64,
    pub history: Vec<EpochRecord>,
    /// Epoch whose weights were kept; `None` means the initial weights.
    pub best_epoch: Option<usize>,
    pub validation_loss: f64,
    pub validation_f1: f64,
    pub status: RunStatus,
    /// Not serialized and not compared: two identical runs differ here.
    #[serde(skip)]
    pub wall_time: Duration,
}

impl PartialEq for RunRecord {
    fn eq(&self, other: &Self) -> bool {
        self.label == other.label
            && self.config == other.config
            && self.seed == other.seed
            && self.history == other.history
            && self.best_epoch == other.best_epoch
            && self.validation_loss.to_bits() == other.validation_loss.to_bits()
            && self.validation_f1.to_bits() == other.validation_f1.to_bits()
            && self.status == other.status
    }
}

impl RunRecord {
    pub fn diverged(&self) -> bool {
        matches!(self.status, RunStatus::Diverged { .. })
    }
}

fn check_inputs(config: &MlpConfig, train: &FeatureMatrix, validation: &FeatureMatrix) -> Result<()> {
    for (name, m) in [("training", train), ("validation", validation)] {
        if m.width() != config.input_dim {
            return Err(Error::Shape(format!(
                "{name} matrix has {} columns, model expects {}",
                m.width(),
                config.input_dim
            )));
        }
        if m.is_empty() {
            return Err(Error::Precondition(format!("{name} set is empty")));
        }
    }
    Ok(())
}

fn labels_f64(m: &FeatureMatrix) -> Vec<f64> {
    m.labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect()
}

pub fn prediction_records(model: &MlpModel, m: &FeatureMatrix) -> Result<Vec<PredictionRecord>> {
    let p = model.predict(m.rows.view())?;
    Ok(m.encounter_ids
        .iter()
        .zip(p.iter())
        .zip(&m.labels)
        .map(|((id, &p), &coded)| PredictionRecord::new(id.clone(), p, coded))
        .collect())
}

pub fn evaluate_model(model: &MlpModel, m: &FeatureMatrix) -> Result<Evaluation> {
    metrics::evaluate(&prediction_records(model, m)?, DECISION_THRESHOLD)
}

fn f1_on(model: &MlpModel, m: &FeatureMatrix) -> Result<f64> {
    Ok(metrics::confusion_at_threshold(&prediction_records(model, m)?, DECISION_THRESHOLD)?.f1)
}

/// Train with minibatch updates and keep the weights with the lowest
/// validation loss (the initial weights count as a candidate).
pub fn train(
    label: &str,
    config: &MlpConfig,
    schedule: &TrainSchedule,
    train_set: &FeatureMatrix,
    validation: &FeatureMatrix,
) -> Result<(MlpModel, RunRecord)> {
    schedule.validate()?;
    check_inputs(config, train_set, validation)?;
    let started = Instant::now();
    let mut model = init_model(config.clone())?;
    let train_y = labels_f64(train_set);
    let val_y = labels_f64(validation);
    let mut dropout_rng = rng::stream(config.seed, "dropout");
    let mut shuffle_rng = rng::stream(schedule.shuffle_seed, "shuffle");

    let mut best = model.clone();
    let mut best_loss = eval_loss(&model, validation.rows.view(), &val_y)?;
    let mut best_epoch = None;
    let mut since_best = 0;
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=schedule.max_epochs {
        let diverged = |reason: String| Error::Training(format!("diverged at epoch {epoch}: {reason}"));
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for batch in order.chunks(schedule.batch_size) {
            let x = train_set.rows.select(Axis(0), batch);
            let y: Vec<f64> = batch.iter().map(|&i| train_y[i]).collect();
            let loss = model
                .train_batch(x.view(), &y, Some(&mut dropout_rng))
                .map_err(|e| diverged(e.to_string()))?;
            if !loss.is_finite() {
                return Err(diverged(format!("training loss {loss}")));
            }
            total += loss * batch.len() as f64;
        }
        let validation_loss = eval_loss(&model, validation.rows.view(), &val_y)?;
        if !validation_loss.is_finite() {
            return Err(diverged(format!("validation loss {validation_loss}")));
        }
        history.push(EpochRecord {
            epoch,
            train_loss: total / train_set.len() as f64,
            validation_loss,
        });
        if validation_loss < best_loss {
            best_loss = validation_loss;
            best = model.clone();
            best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if schedule.patience > 0 && since_best >= schedule.patience {
                break;
            }
        }
    }

    let validation_f1 = f1_on(&best, validation)?;
    let record = RunRecord {
        label: label.to_string(),
        config: config.clone(),
        seed: config.seed,
        history,
        best_epoch,
        validation_loss: best_loss,
        validation_f1,
        status: RunStatus::Completed,
        wall_time: started.elapsed(),
    };
    Ok((best, record))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl OptimizerKind {
    /// Adam at its defaults; SGD at lr 0.01 with momentum 0.9.
    pub fn config(self) -> OptimizerConfig {
        match self {
            OptimizerKind::Adam => OptimizerConfig::default(),
            OptimizerKind::Sgd => OptimizerConfig::sgd(0.01, 0.9),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchGrid {
    pub activations: Vec<Activation>,
    pub optimizers: Vec<OptimizerKind>,
    pub losses: Vec<LossKind>,
    pub depths: Vec<usize>,
}

impl SearchGrid {
    /// Every activation, optimizer and loss at depths 2, 5, 10 and 15.
    pub fn full() -> Self {
        SearchGrid {
            activations: Activation::ALL.to_vec(),
            optimizers: vec![OptimizerKind::Adam, OptimizerKind::Sgd],
            losses: LossKind::ALL.to_vec(),
            depths: vec![2, 5, 10, 15],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, empty) in [
            ("activations", self.activations.is_empty()),
            ("optimizers", self.optimizers.is_empty()),
            ("losses", self.losses.is_empty()),
            ("depths", self.depths.is_empty()),
        ] {
            if empty {
                return Err(Error::validation(name, "grid axis is empty"));
            }
        }
        if let Some(d) = self.depths.iter().find(|d| !(crate::nn::MIN_DEPTH..=crate::nn::MAX_DEPTH).contains(*d)) {
            return Err(Error::validation("depths", format!("depth {d} outside 2..=15")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.activations.len() * self.optimizers.len() * self.losses.len() * self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// One config per grid point, built on `template` (input width,
    /// regularization, base seed). Each point's seed depends only on its
    /// description, so repeated points train identically.
    pub fn configs(&self, template: &MlpConfig) -> Vec<MlpConfig> {
        let mut out = Vec::with_capacity(self.len());
        for &activation in &self.activations {
            for &opt in &self.optimizers {
                for &loss in &self.losses {
                    for &depth in &self.depths {
                        let mut c = template.clone();
                        c.linear = false;
                        c.activation = activation;
                        c.optimizer = opt.config();
                        c.loss = loss;
                        c.hidden_layers = tapered_widths(template.input_dim, depth, DEFAULT_WIDTH_FLOOR);
                        c.seed = rng::derive_seed(template.seed, &c.describe());
                        out.push(c);
                    }
                }
            }
        }
        out
    }
}

pub struct SearchResult {
    /// Best first: validation F1 descending, then validation loss
    /// ascending, then fewer parameters. Diverged runs come last.
    pub runs: Vec<RunRecord>,
    pub best: Option<MlpModel>,
}

fn rank_key(a: &RunRecord, b: &RunRecord) -> std::cmp::Ordering {
    a.diverged()
        .cmp(&b.diverged())
        .then(b.validation_f1.total_cmp(&a.validation_f1))
        .then(a.validation_loss.total_cmp(&b.validation_loss))
        .then(a.config.parameter_count().cmp(&b.config.parameter_count()))
}

pub fn hyperparameter_search(
    grid: &SearchGrid,
    template: &MlpConfig,
    schedule: &TrainSchedule,
    train_set: &FeatureMatrix,
    validation: &FeatureMatrix,
) -> Result<SearchResult> {
    grid.validate()?;
    schedule.validate()?;
    check_inputs(template, train_set, validation)?;
    let results: Vec<(Option<MlpModel>, RunRecord)> = grid
        .configs(template)
        .into_par_iter()
        .map(|config| {
            let label = config.describe();
            let started = Instant::now();
            match train(&label, &config, schedule, train_set, validation) {
                Ok((model, record)) => Ok((Some(model), record)),
                Err(Error::Training(reason)) => {
                    let epoch = reason
                        .strip_prefix("diverged at epoch ")
                        .and_then(|r| r.split(':').next())
                        .and_then(|e| e.parse().ok())
                        .unwrap_or(0);
                    Ok((
                        None,
                        RunRecord {
                            label,
                            seed: config.seed,
                            config,
                            history: Vec::new(),
                            best_epoch: None,
                            validation_loss: f64::INFINITY,
                            validation_f1: 0.0,
                            status: RunStatus::Diverged { epoch, reason },
                            wall_time: started.elapsed(),
                        },
                    ))
                }
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;

    let mut indexed: Vec<(usize, &RunRecord)> = results.iter().map(|(_, r)| r).enumerate().collect();
    indexed.sort_by(|a, b| rank_key(a.1, b.1).then(a.0.cmp(&b.0)));
    let best = indexed
        .first()
        .and_then(|&(i, _)| results[i].0.clone());
    let runs = indexed.into_iter().map(|(_, r)| r.clone()).collect();
    Ok(SearchResult { runs, best })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Logistic,
    LinearSvm,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 2] = [BaselineKind::Logistic, BaselineKind::LinearSvm];

    pub fn loss(self) -> LossKind {
        match self {
            BaselineKind::Logistic => LossKind::Bce,
            BaselineKind::LinearSvm => LossKind::Hinge,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BaselineKind::Logistic => "logistic",
            BaselineKind::LinearSvm => "linear_svm",
        }
    }

    /// Row name in the comparison table.
    pub fn display_name(self) -> &'static str {
        match self {
            BaselineKind::Logistic => "Logistic Regression",
            BaselineKind::LinearSvm => "Linear SVM",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Adam step size for the linear baselines. A convex model tolerates, and
/// needs, a larger step than the deep default.
pub const BASELINE_LEARNING_RATE: f64 = 1e-2;

/// A network with no hidden layers: bce loss for logistic regression,
/// hinge loss for the linear SVM.
pub fn baseline_config(kind: BaselineKind, input_dim: usize, seed: u64) -> MlpConfig {
    let mut c = MlpConfig::linear_model(input_dim, kind.loss(), rng::derive_seed(seed, kind.as_str()));
    c.optimizer = OptimizerConfig::adam(BASELINE_LEARNING_RATE);
    c
}

pub fn train_baseline(
    kind: BaselineKind,
    seed: u64,
    schedule: &TrainSchedule,
    train_set: &FeatureMatrix,
    validation: &FeatureMatrix,
) -> Result<(MlpModel, RunRecord)> {
    let config = baseline_config(kind, train_set.width(), seed);
    train(kind.as_str(), &config, schedule, train_set, validation)
}

/// The training, validation and test rows belonging to one facility.
#[derive(Debug, Clone, PartialEq)]
pub struct FacilityBundle {
    pub facility_id: String,
    pub train: FeatureMatrix,
    pub validation: FeatureMatrix,
    pub test: FeatureMatrix,
}

/// Split train/validation/test matrices by facility, in facility-id order.
pub fn facility_bundles(train: &FeatureMatrix, validation: &FeatureMatrix, test: &FeatureMatrix) -> Vec<FacilityBundle> {
    let by_facility = |m: &FeatureMatrix| {
        let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, f) in m.facility_ids.iter().enumerate() {
            groups.entry(f.clone()).or_default().push(i);
        }
        groups
    };
    let (tr, va, te) = (by_facility(train), by_facility(validation), by_facility(test));
    tr.iter()
        .map(|(facility, idx)| FacilityBundle {
            facility_id: facility.clone(),
            train: train.select(idx),
            validation: validation.select(va.get(facility).map(Vec::as_slice).unwrap_or(&[])),
            test: test.select(te.get(facility).map(Vec::as_slice).unwrap_or(&[])),
        })
        .collect()
}

/// Fails if any feature could identify the facility an encounter came from.
pub fn check_facility_free(vocab: &FeatureVocabulary) -> Result<()> {
    match vocab
        .descriptors
        .iter()
        .find(|d| d.kind == FeatureKind::Categorical && d.source.to_ascii_lowercase().contains("facility"))
    {
        Some(d) => Err(Error::Precondition(format!("feature {d} identifies the facility"))),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FacilityResult {
    pub facility_id: String,
    pub test_rows: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auroc: f64,
    pub average_precision: f64,
}

pub struct MultiFacilityOutcome {
    pub model: MlpModel,
    pub record: RunRecord,
    /// Rows each facility contributed to the training pool (all equal).
    pub pool_counts: BTreeMap<String, usize>,
    pub per_facility: Vec<FacilityResult>,
    pub excluded: Vec<String>,
}

fn downsample(m: &FeatureMatrix, k: usize, seed: u64, label: &str) -> FeatureMatrix {
    let mut idx: Vec<usize> = (0..m.len()).collect();
    idx.shuffle(&mut rng::stream(seed, label));
    idx.truncate(k);
    idx.sort_unstable();
    m.select(&idx)
}

pub fn facility_result(model: &MlpModel, bundle: &FacilityBundle) -> Result<FacilityResult> {
    let eval = evaluate_model(model, &bundle.test)?;
    Ok(FacilityResult {
        facility_id: bundle.facility_id.clone(),
        test_rows: bundle.test.len(),
        precision: eval.confusion.precision,
        recall: eval.confusion.recall,
        f1: eval.confusion.f1,
        auroc: eval.auroc,
        average_precision: eval.average_precision,
    })
}

/// Pool an equal number of training (and validation) rows from every
/// facility, train one model, and evaluate it on each facility's own test
/// rows. Facilities without a positive training row are left out.
pub fn multi_facility_train(
    bundles: &[FacilityBundle],
    config: &MlpConfig,
    schedule: &TrainSchedule,
) -> Result<MultiFacilityOutcome> {
    let mut excluded = Vec::new();
    let mut usable = Vec::new();
    for b in bundles {
        if b.train.positives() == 0 {
            tracing::warn!(facility = %b.facility_id, "facility has no positive training rows; excluded");
            excluded.push(b.facility_id.clone());
        } else {
            usable.push(b);
        }
    }
    if usable.len() < 2 {
        return Err(Error::Precondition(format!(
            "multi-facility training needs at least 2 usable facilities, found {}",
            usable.len()
        )));
    }
    let k_train = usable.iter().map(|b| b.train.len()).min().unwrap_or(0);
    let k_val = usable.iter().map(|b| b.validation.len()).min().unwrap_or(0);
    let mut train_parts = Vec::new();
    let mut val_parts = Vec::new();
    let mut pool_counts = BTreeMap::new();
    for b in &usable {
        train_parts.push(downsample(&b.train, k_train, config.seed, &format!("pool-train/{}", b.facility_id)));
        val_parts.push(downsample(&b.validation, k_val, config.seed, &format!("pool-val/{}", b.facility_id)));
        pool_counts.insert(b.facility_id.clone(), k_train);
    }
    let pool = FeatureMatrix::concat(&train_parts.iter().collect::<Vec<_>>())?;
    let pool_val = FeatureMatrix::concat(&val_parts.iter().collect::<Vec<_>>())?;
    let (model, record) = train("multi_facility", config, schedule, &pool, &pool_val)?;
    let per_facility = usable
        .iter()
        .map(|b| facility_result(&model, b))
        .collect::<Result<Vec<_>>>()?;
    Ok(MultiFacilityOutcome {
        model,
        record,
        pool_counts,
        per_facility,
        excluded,
    })
}

const RUNS_HEADER: &str =
    "label\tconfig\tseed\tparameters\tepochs\tbest_epoch\tvalidation_loss\tvalidation_f1\tstatus";

/// One tab-separated line per run. Wall time is left out so that repeated
/// runs produce identical files.
pub fn write_runs_tsv(records: &[RunRecord], path: &Path) -> Result<()> {
    let mut text = String::from(RUNS_HEADER);
    text.push('\n');
    for r in records {
        let status = match &r.status {
            RunStatus::Completed => "completed".to_string(),
            RunStatus::Diverged { epoch, .. } => format!("diverged@{epoch}"),
        };
        let best = r.best_epoch.map(|e| e.to_string()).unwrap_or_else(|| "0".into());
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.label,
            r.config.describe(),
            r.seed,
            r.config.parameter_count(),
            r.history.len(),
            best,
            r.validation_loss,
            r.validation_f1,
            status
        ));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub algorithm: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auroc: f64,
    pub ap: f64,
}

impl ComparisonRow {
    pub fn from_evaluation(algorithm: &str, e: &Evaluation) -> Self {
        ComparisonRow {
            algorithm: algorithm.to_string(),
            precision: e.confusion.precision,
            recall: e.confusion.recall,
            f1: e.confusion.f1,
            auroc: e.auroc,
            ap: e.average_precision,
        }
    }
}

pub fn write_comparison_csv(rows: &[ComparisonRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_comparison_csv(path: &Path) -> Result<Vec<ComparisonRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<ComparisonRow>, _>>()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::Rng;

    /// Two features, label = x0 + x1 > 0, with a margin of 0.2.
    pub(crate) fn separable(n: usize, seed: u64, facility: &str) -> FeatureMatrix {
        let mut r = rng::stream(seed, "toy");
        let mut rows = Array2::zeros((n, 2));
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let (a, b) = loop {
                let a: f64 = r.random_range(-1.0..1.0);
                let b: f64 = r.random_range(-1.0..1.0);
                if (a + b).abs() > 0.2 {
                    break (a, b);
                }
            };
            rows[[i, 0]] = a;
            rows[[i, 1]] = b;
            labels.push(a + b > 0.0);
        }
        FeatureMatrix {
            encounter_ids: (0..n).map(|i| format!("{facility}-{i}")).collect(),
            facility_ids: vec![facility.to_string(); n],
            rows,
            labels,
        }
    }

    fn small_net(loss: LossKind, seed: u64) -> MlpConfig {
        MlpConfig {
            input_dim: 2,
            hidden_layers: vec![8, 8],
            activation: Activation::Tanh,
            loss,
            l1_lambda: 0.0,
            dropout_rate: 0.0,
            optimizer: OptimizerConfig::adam(0.01),
            seed,
            linear: false,
        }
    }

    fn schedule(max_epochs: usize) -> TrainSchedule {
        TrainSchedule {
            max_epochs,
            patience: 5.min(max_epochs),
            batch_size: 32,
            shuffle_seed: 3,
        }
    }

    #[test]
    fn separable_toy_set_is_learned() {
        let (tr, va) = (separable(200, 1, "a"), separable(200, 2, "a"));
        let (_, rec) = train("toy", &small_net(LossKind::Mse, 1), &schedule(60), &tr, &va).unwrap();
        assert!(rec.validation_f1 >= 0.95, "{rec:?}");
        let (_, rec) = train_baseline(BaselineKind::Logistic, 1, &TrainSchedule {
            max_epochs: 100,
            patience: 10,
            batch_size: 16,
            shuffle_seed: 1,
        }, &tr, &va)
        .unwrap();
        assert!(rec.validation_f1 >= 0.95, "{rec:?}");
    }

    #[test]
    fn zero_epochs_returns_the_initial_model() {
        let (tr, va) = (separable(50, 1, "a"), separable(50, 2, "a"));
        let cfg = small_net(LossKind::Bce, 4);
        let (model, rec) = train("z", &cfg, &schedule(0), &tr, &va).unwrap();
        assert_eq!(model, init_model(cfg).unwrap());
        assert!(rec.history.is_empty());
        assert_eq!(rec.best_epoch, None);
    }

    #[test]
    fn repeated_runs_are_identical() {
        let (tr, va) = (separable(120, 1, "a"), separable(60, 2, "a"));
        let mut cfg = small_net(LossKind::Mse, 9);
        cfg.dropout_rate = 0.2;
        cfg.l1_lambda = 1e-4;
        let a = train("r", &cfg, &schedule(8), &tr, &va).unwrap();
        let b = train("r", &cfg, &schedule(8), &tr, &va).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn divergence_names_the_epoch() {
        let (tr, va) = (separable(64, 1, "a"), separable(32, 2, "a"));
        let mut cfg = MlpConfig::linear_model(2, LossKind::Mse, 2);
        cfg.optimizer = OptimizerConfig::sgd(1e300, 0.0);
        let mut tr = tr;
        tr.rows.mapv_inplace(|v| v * 1e10);
        match train("d", &cfg, &schedule(3), &tr, &va) {
            Err(Error::Training(msg)) => {
                let epoch: usize = msg["diverged at epoch ".len()..].split(':').next().unwrap().parse().unwrap();
                assert!((1..=3).contains(&epoch), "{msg}");
            }
            other => panic!("expected divergence, got {:?}", other.map(|r| r.1)),
        }
    }

    #[test]
    fn schedule_and_shape_checks() {
        let bad = TrainSchedule {
            max_epochs: 2,
            patience: 3,
            batch_size: 1,
            shuffle_seed: 0,
        };
        assert!(bad.validate().is_err());
        let zero_batch = TrainSchedule {
            batch_size: 0,
            ..TrainSchedule::default()
        };
        assert!(zero_batch.validate().is_err());
        let (tr, va) = (separable(10, 1, "a"), separable(10, 2, "a"));
        let mut cfg = small_net(LossKind::Mse, 0);
        cfg.input_dim = 3;
        assert!(matches!(train("s", &cfg, &schedule(1), &tr, &va), Err(Error::Shape(_))));
    }

    #[test]
    fn full_batch_loss_does_not_increase() {
        // Full-batch steps with a small learning rate: each epoch's loss is
        // measured before its update, so the sequence must be monotone.
        let (tr, va) = (separable(200, 5, "a"), separable(50, 6, "a"));
        for opt in [OptimizerConfig::adam(1e-3), OptimizerConfig::sgd(0.05, 0.0)] {
            let mut cfg = small_net(LossKind::Mse, 7);
            cfg.optimizer = opt;
            let sched = TrainSchedule {
                max_epochs: 50,
                patience: 0,
                batch_size: 200,
                shuffle_seed: 0,
            };
            let (_, rec) = train("m", &cfg, &sched, &tr, &va).unwrap();
            for w in rec.history.windows(2) {
                assert!(w[1].train_loss <= w[0].train_loss, "{opt:?}: {:?}", rec.history);
            }
        }
    }

    #[test]
    fn grid_ranking_and_duplicates() {
        let (tr, va) = (separable(100, 1, "a"), separable(60, 2, "a"));
        let template = small_net(LossKind::Mse, 11);
        let sched = schedule(5);
        let one = SearchGrid {
            activations: vec![Activation::Tanh],
            optimizers: vec![OptimizerKind::Adam],
            losses: vec![LossKind::Mse],
            depths: vec![2],
        };
        let res = hyperparameter_search(&one, &template, &sched, &tr, &va).unwrap();
        assert_eq!(res.runs.len(), 1);
        assert!(res.best.is_some());

        let dup = SearchGrid {
            depths: vec![2, 3, 2],
            ..one.clone()
        };
        let res = hyperparameter_search(&dup, &template, &sched, &tr, &va).unwrap();
        assert_eq!(res.runs.len(), 3);
        let pos: Vec<usize> = res.runs.iter().enumerate().filter(|(_, r)| r.config.hidden_layers.len() == 2).map(|(i, _)| i).collect();
        assert_eq!(pos[1], pos[0] + 1);
        assert_eq!(res.runs[pos[0]], res.runs[pos[1]]);
        for w in res.runs.windows(2) {
            assert!(w[0].validation_f1 >= w[1].validation_f1);
        }

        let empty = SearchGrid { losses: vec![], ..one };
        assert!(hyperparameter_search(&empty, &template, &sched, &tr, &va).is_err());
    }

    #[test]
    fn balanced_pool_and_exclusion() {
        let a = separable(300, 1, "fac-a");
        let b = separable(120, 2, "fac-b");
        let mut c = separable(80, 3, "fac-c");
        c.labels.iter_mut().for_each(|l| *l = false);
        let bundle = |m: FeatureMatrix, s: u64| FacilityBundle {
            facility_id: m.facility_ids[0].clone(),
            validation: separable(40, s + 10, &m.facility_ids[0]),
            test: separable(60, s + 20, &m.facility_ids[0]),
            train: m,
        };
        let bundles = vec![bundle(a, 1), bundle(b, 2), bundle(c, 3)];
        let out = multi_facility_train(&bundles, &small_net(LossKind::Mse, 5), &schedule(20)).unwrap();
        assert_eq!(out.excluded, vec!["fac-c".to_string()]);
        assert_eq!(out.pool_counts.values().copied().collect::<Vec<_>>(), vec![120, 120]);
        assert_eq!(out.per_facility.len(), 2);
        assert!(out.per_facility.iter().all(|f| f.f1 > 0.9), "{:?}", out.per_facility);

        assert!(multi_facility_train(&bundles[..1], &small_net(LossKind::Mse, 5), &schedule(2)).is_err());
    }

    #[test]
    fn bundles_follow_facility_ids() {
        let m = FeatureMatrix::concat(&[&separable(5, 1, "x"), &separable(3, 2, "y")]).unwrap();
        let bundles = facility_bundles(&m, &m, &m);
        assert_eq!(bundles.len(), 2);
        assert_eq!(bundles[0].facility_id, "x");
        assert_eq!(bundles[0].train.len(), 5);
        assert_eq!(bundles[1].test.len(), 3);
    }

    #[test]
    fn comparison_round_trip_and_runs_tsv() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![ComparisonRow {
            algorithm: "Logistic Regression".into(),
            precision: 0.75,
            recall: 0.79,
            f1: 0.77,
            auroc: 0.90,
            ap: 0.78,
        }];
        let path = dir.path().join("comparison.csv");
        write_comparison_csv(&rows, &path).unwrap();
        assert_eq!(read_comparison_csv(&path).unwrap(), rows);
        let head = fs::read_to_string(&path).unwrap();
        assert!(head.starts_with("algorithm,precision,recall,f1,auroc,ap"));

        let (tr, va) = (separable(40, 1, "a"), separable(20, 2, "a"));
        let (_, rec) = train("t", &small_net(LossKind::Mse, 1), &schedule(2), &tr, &va).unwrap();
        let tsv = dir.path().join("runs.tsv");
        write_runs_tsv(&[rec], &tsv).unwrap();
        let text = fs::read_to_string(&tsv).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(text.lines().nth(1).unwrap().split('\t').count(), 9);
    }
}
