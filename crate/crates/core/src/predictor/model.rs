//! Deployable SVM predictor and the training pipeline producing it.

use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::dataset::{FeatureDataset, Standardizer};
use super::features::FeatureSchema;
use super::segment::SegmentationConfig;
use super::select::{SelectionConfig, SelectionResult, greedy_forward_select};
use super::smote::smote_oversample;
use super::svm::{SvmMachine, SvmParams, class_of, train_svm};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    /// Neighbors used by SMOTE.
    pub smote_k: usize,
    /// Majority samples kept after random undersampling; 0 keeps all.
    pub max_majority: usize,
    pub selection: SelectionConfig,
    /// Solver settings for the final model; kernel width and C come from selection.
    pub svm: SvmParams,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            smote_k: 5,
            max_majority: 2000,
            selection: SelectionConfig::default(),
            svm: SvmParams::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub format_version: u32,
    pub schema: FeatureSchema,
    pub segmentation: SegmentationConfig,
    /// Constants for the full feature vector.
    pub standardizer: Standardizer,
    /// Feature indices fed to the machine, in selection order.
    pub selected: Vec<usize>,
    pub selection: SelectionResult,
    pub machine: SvmMachine,
    /// Hash of the configuration that produced the model.
    pub config_hash: String,
    /// Data set the model was trained on.
    pub training_run: String,
}

impl SvmModel {
    pub fn selected_names(&self) -> Vec<String> {
        let names = self.schema.names();
        self.selected.iter().map(|&i| names[i].clone()).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text).map_err(|e| Error::Schema(format!("model file: {e}")))?;
        if m.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Schema(format!(
                "model format version {} (expected {MODEL_FORMAT_VERSION})",
                m.format_version
            )));
        }
        Ok(m)
    }
}

/// Decision value and class of a raw (unstandardized) feature vector.
pub fn svm_predict(model: &SvmModel, features: &[f64]) -> Result<(f64, i8)> {
    if features.len() != model.schema.dimension() {
        return Err(Error::Schema(format!(
            "feature vector has {} entries, model schema expects {}",
            features.len(),
            model.schema.dimension()
        )));
    }
    let z = model.standardizer.apply_selected(features, &model.selected);
    let f = model.machine.decision(&z);
    Ok((f, class_of(f)))
}

/// Class-balanced copy of `(x, y)`: the majority is randomly undersampled to `max_majority`,
/// then the minority is grown by SMOTE to the majority count. Synthetic rows come last and are
/// returned with the index of the minority row they were grown from.
pub fn balance(x: &[Vec<f64>], y: &[i8], cfg: &TrainingConfig) -> Result<(Vec<Vec<f64>>, Vec<i8>, Vec<Option<usize>>)> {
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let n_neg = y.iter().filter(|&&v| v < 0).count();
    let n_pos = y.len() - n_neg;
    if n_neg == 0 || n_pos == 0 {
        return Err(Error::InsufficientData(format!(
            "training needs both classes (upset {n_neg}, nominal {n_pos})"
        )));
    }
    let minority: i8 = if n_neg <= n_pos { -1 } else { 1 };
    let mut major: Vec<usize> = (0..y.len()).filter(|&i| y[i] != minority).collect();
    if cfg.max_majority > 0 && major.len() > cfg.max_majority {
        major.shuffle(&mut rng);
        major.truncate(cfg.max_majority);
        major.sort_unstable();
    }
    let minor: Vec<usize> = (0..y.len()).filter(|&i| y[i] == minority).collect();
    let needed = major.len().saturating_sub(minor.len());
    let values: Vec<Vec<f64>> = minor.iter().map(|&i| x[i].clone()).collect();
    let k = cfg.smote_k.min(minor.len().saturating_sub(1)).max(1);
    let synthetic = smote_oversample(&values, k, needed, None, &mut rng)?;

    let mut xb: Vec<Vec<f64>> = Vec::with_capacity(major.len() + minor.len() + needed);
    let mut yb = Vec::with_capacity(xb.capacity());
    let mut parent = Vec::with_capacity(xb.capacity());
    for &i in major.iter().chain(&minor) {
        xb.push(x[i].clone());
        yb.push(y[i]);
        parent.push(None);
    }
    for (v, p) in synthetic {
        xb.push(v);
        yb.push(minority);
        parent.push(Some(minor[p]));
    }
    Ok((xb, yb, parent))
}

/// Standardizer, selected features and machine fitted to a feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedClassifier {
    pub standardizer: Standardizer,
    pub selection: SelectionResult,
    pub machine: SvmMachine,
}

impl FittedClassifier {
    pub fn decision(&self, features: &[f64]) -> f64 {
        self.machine
            .decision(&self.standardizer.apply_selected(features, &self.selection.selected))
    }

    pub fn classify(&self, features: &[f64]) -> i8 {
        class_of(self.decision(features))
    }
}

/// Standardize on the real rows, balance, select features and fit the final machine.
pub fn fit_classifier(x: &[Vec<f64>], y: &[i8], cfg: &TrainingConfig) -> Result<FittedClassifier> {
    let standardizer = Standardizer::fit(x)?;
    let z: Vec<Vec<f64>> = x.iter().map(|r| standardizer.apply(r)).collect();
    let (xb, yb, _) = balance(&z, y, cfg)?;
    let candidates: Vec<usize> = (0..standardizer.mean.len()).collect();
    let selection = greedy_forward_select(&xb, &yb, &candidates, &cfg.selection)?;
    let xs: Vec<Vec<f64>> = xb
        .iter()
        .map(|r| selection.selected.iter().map(|&i| r[i]).collect())
        .collect();
    let params = SvmParams {
        sigma2: selection.sigma2,
        c: selection.c,
        ..cfg.svm
    };
    let machine = train_svm(&xs, &yb, &params)?;
    Ok(FittedClassifier {
        standardizer,
        selection,
        machine,
    })
}

pub fn train_predictor(
    dataset: &FeatureDataset,
    segmentation: &SegmentationConfig,
    cfg: &TrainingConfig,
    config_hash: &str,
    training_run: &str,
) -> Result<SvmModel> {
    let fit = fit_classifier(&dataset.matrix(), &dataset.labels(), cfg)?;
    Ok(SvmModel {
        format_version: MODEL_FORMAT_VERSION,
        schema: dataset.schema.clone(),
        segmentation: segmentation.clone(),
        standardizer: fit.standardizer,
        selected: fit.selection.selected.clone(),
        selection: fit.selection,
        machine: fit.machine,
        config_hash: config_hash.to_string(),
        training_run: training_run.to_string(),
    })
}
