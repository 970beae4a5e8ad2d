//! Predictors evaluated inside the closed loop.

use crate::closedloop::{LogRow, OnlinePredictor};
use crate::error::{Error, Result};

use super::features::extract_features;
use super::model::{SvmModel, svm_predict};
use super::segment::SignalSegment;
use super::threshold_predict;

/// Triggers when the current tether force reaches `q_star`.
pub struct ThresholdPredictor {
    pub q_star: f64,
}

impl OnlinePredictor for ThresholdPredictor {
    fn predict(&self, log: &[LogRow]) -> Result<i8> {
        Ok(log.last().map_or(1, |r| threshold_predict(r.f_t, self.q_star)))
    }
}

/// Classifies the most recent window of the log; nominal until a full window exists.
pub struct SvmPredictor {
    model: SvmModel,
    window: usize,
}

impl SvmPredictor {
    pub fn new(model: SvmModel) -> Result<Self> {
        let window = model.segmentation.window_samples(model.schema.sample_rate);
        if window < 8 {
            return Err(Error::config("predictor window is shorter than 8 samples"));
        }
        for s in &model.schema.signals {
            if !crate::closedloop::LOG_COLUMNS.contains(&s.as_str()) {
                return Err(Error::Schema(format!("model uses unknown log signal '{s}'")));
            }
        }
        Ok(Self { model, window })
    }

    pub fn model(&self) -> &SvmModel {
        &self.model
    }

    /// Decision value on the window ending at the last row, if the log is long enough.
    pub fn decision(&self, log: &[LogRow]) -> Result<Option<f64>> {
        if log.len() < self.window {
            return Ok(None);
        }
        let recent = &log[log.len() - self.window..];
        let segment = SignalSegment {
            signals: self
                .model
                .schema
                .signals
                .iter()
                .map(|name| recent.iter().map(|r| r.get(name).unwrap()).collect())
                .collect(),
            label: 1,
            run_id: String::new(),
            end_time: recent[recent.len() - 1].t,
        };
        let features = extract_features(&segment, &self.model.schema)?;
        Ok(Some(svm_predict(&self.model, &features)?.0))
    }
}

impl OnlinePredictor for SvmPredictor {
    fn predict(&self, log: &[LogRow]) -> Result<i8> {
        Ok(match self.decision(log)? {
            Some(f) => super::svm::class_of(f),
            None => 1,
        })
    }
}
