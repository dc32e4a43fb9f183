//! Self-describing JSON checkpoints.
//!
//! Parameters are stored as flat row-major arrays next to their shape so a
//! reader never has to infer dimensions from the config.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{Dense, MlpConfig, MlpModel, OptimizerState};
use crate::error::{Error, Result};
use crate::featurize::Standardizer;

pub const CHECKPOINT_FORMAT: &str = "phenoaudit-mlp/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FlatDense {
    shape: [usize; 2],
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl FlatDense {
    fn from_dense(d: &Dense) -> Self {
        let (r, c) = d.weights.dim();
        FlatDense {
            shape: [r, c],
            weights: d.weights.iter().copied().collect(),
            bias: d.bias.to_vec(),
        }
    }

    fn to_dense(&self) -> Result<Dense> {
        let [r, c] = self.shape;
        if self.bias.len() != c {
            return Err(Error::Format(format!("bias length {} for {r}x{c} layer", self.bias.len())));
        }
        Ok(Dense {
            weights: Array2::from_shape_vec((r, c), self.weights.clone()).map_err(|e| Error::Format(e.to_string()))?,
            bias: Array1::from(self.bias.clone()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FlatOptimizer {
    step: u64,
    first: Vec<FlatDense>,
    second: Vec<FlatDense>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    config: MlpConfig,
    vocabulary_hash: String,
    input_scaling: Option<Standardizer>,
    layers: Vec<FlatDense>,
    optimizer: FlatOptimizer,
}

/// A trained model with the metadata needed to reuse it on new features.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: MlpModel,
    /// [`crate::featurize::FeatureVocabulary::fingerprint`] of the inputs.
    pub vocabulary_hash: String,
    pub input_scaling: Option<Standardizer>,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        let m = &self.model;
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.to_string(),
            config: m.config.clone(),
            vocabulary_hash: self.vocabulary_hash.clone(),
            input_scaling: self.input_scaling.clone(),
            layers: m.layers.iter().map(FlatDense::from_dense).collect(),
            optimizer: FlatOptimizer {
                step: m.step,
                first: m.optimizer.first.iter().map(FlatDense::from_dense).collect(),
                second: m.optimizer.second.iter().map(FlatDense::from_dense).collect(),
            },
        };
        serde_json::to_string(&file).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text).map_err(|e| Error::Format(format!("checkpoint: {e}")))?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!(
                "checkpoint format {:?}, expected {CHECKPOINT_FORMAT:?}",
                file.format
            )));
        }
        file.config.validate()?;
        let layers = file.layers.iter().map(FlatDense::to_dense).collect::<Result<Vec<_>>>()?;
        let shapes: Vec<(usize, usize)> = layers.iter().map(|l| l.weights.dim()).collect();
        if shapes != file.config.layer_shapes() {
            return Err(Error::Format("layer shapes do not match the stored config".into()));
        }
        let convert = |v: &[FlatDense]| v.iter().map(FlatDense::to_dense).collect::<Result<Vec<_>>>();
        let optimizer = OptimizerState {
            first: convert(&file.optimizer.first)?,
            second: convert(&file.optimizer.second)?,
        };
        let model = MlpModel {
            config: file.config,
            layers,
            optimizer,
            step: file.optimizer.step,
        };
        if !model.all_finite() {
            return Err(Error::Format("checkpoint contains non-finite parameters".into()));
        }
        Ok(Checkpoint {
            model,
            vocabulary_hash: file.vocabulary_hash,
            input_scaling: file.input_scaling,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
