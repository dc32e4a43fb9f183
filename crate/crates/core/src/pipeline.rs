//! Encounters to standardized train/validation/test matrices.

use serde::{Deserialize, Serialize};

use crate::ehr::{DiabetesCodeSet, EncounterRecord};
use crate::error::Result;
use crate::featurize::{
    build_vocabulary, encode_all, patient_histories, split_dataset, FeatureMatrix, FeatureOptions,
    FeatureVocabulary, PriorCodes, SplitIndices, Standardizer,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitOptions {
    pub test_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SplitOptions {
    fn default() -> Self {
        SplitOptions {
            test_fraction: 0.20,
            val_fraction: 0.20,
            seed: 0,
        }
    }
}

/// Features for every encounter plus the split and the scaling fitted on
/// the training rows.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub vocabulary: FeatureVocabulary,
    pub split: SplitIndices,
    /// Unscaled rows aligned with the input encounters.
    pub raw: FeatureMatrix,
    pub standardizer: Standardizer,
    pub train: FeatureMatrix,
    pub validation: FeatureMatrix,
    pub test: FeatureMatrix,
}

impl PreparedData {
    pub fn from_parts(vocabulary: FeatureVocabulary, split: SplitIndices, raw: FeatureMatrix) -> Self {
        let train_raw = raw.select(&split.train);
        let standardizer = Standardizer::fit(&train_raw.rows);
        PreparedData {
            train: standardizer.transform(&train_raw),
            validation: standardizer.transform(&raw.select(&split.validation)),
            test: standardizer.transform(&raw.select(&split.test)),
            vocabulary,
            split,
            raw,
            standardizer,
        }
    }
}

/// Split first, then build the vocabulary from training encounters only,
/// encode everything, and fit scaling on the training rows.
pub fn prepare(
    encounters: &[EncounterRecord],
    codes: &DiabetesCodeSet,
    features: FeatureOptions,
    split: SplitOptions,
) -> Result<PreparedData> {
    let labels: Vec<bool> = encounters.iter().map(|e| e.coded_diabetic).collect();
    let split = split_dataset(&labels, split.test_fraction, split.val_fraction, split.seed)?;
    let vocabulary = vocabulary_for(encounters, codes, &split.train, features)?;
    let histories = patient_histories(encounters, codes);
    let raw = encode_all(encounters, &histories, &vocabulary);
    Ok(PreparedData::from_parts(vocabulary, split, raw))
}

/// Vocabulary from the training rows alone. Presence of history codes is
/// counted over earlier *training* encounters, so nothing in the validation
/// or test rows can change which features exist.
pub fn vocabulary_for(
    encounters: &[EncounterRecord],
    codes: &DiabetesCodeSet,
    train: &[usize],
    features: FeatureOptions,
) -> Result<FeatureVocabulary> {
    let subset: Vec<EncounterRecord> = train.iter().map(|&i| encounters[i].clone()).collect();
    let histories = patient_histories(&subset, codes);
    let enc: Vec<&EncounterRecord> = subset.iter().collect();
    let hist: Vec<&PriorCodes> = histories.iter().collect();
    build_vocabulary(&enc, &hist, features)
}
