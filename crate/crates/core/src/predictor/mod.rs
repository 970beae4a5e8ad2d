//! Upset prediction: segmentation, features, class balancing, feature selection, SVM training
//! and in-loop predictors.

pub mod dataset;
pub mod features;
pub mod metrics;
pub mod model;
pub mod online;
pub mod segment;
pub mod select;
pub mod smote;
pub mod svm;
pub mod synthetic;

pub use dataset::{FeatureDataset, LabeledFeatureVector, Provenance, Standardizer};
pub use features::{FeatureSchema, extract_features, time_reversal_stat};
pub use metrics::{ConfusionCounts, mcc};
pub use model::{FittedClassifier, SvmModel, TrainingConfig, fit_classifier, svm_predict, train_predictor};
pub use online::{SvmPredictor, ThresholdPredictor};
pub use segment::{SegmentationConfig, SignalSegment, segment_and_label};
pub use select::{SelectionConfig, SelectionResult, greedy_forward_select};
pub use smote::smote_oversample;
pub use svm::{SvmMachine, SvmParams, train_svm};

/// `-1` (upset) iff `g >= q_star`.
pub fn threshold_predict(g: f64, q_star: f64) -> i8 {
    if g >= q_star { -1 } else { 1 }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_examples() {
        let q: f64 = 1600.0 * 1.08;
        assert!((q - 1728.0).abs() < 1e-9);
        assert_eq!(threshold_predict(1720.0, q), 1);
        assert_eq!(threshold_predict(q, q), -1);
        assert_eq!(threshold_predict(1e12, f64::INFINITY), 1);
    }
}
