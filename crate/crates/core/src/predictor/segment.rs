//! Windowing of run logs into labeled segments.

use serde::{Deserialize, Serialize};

use crate::closedloop::RunLog;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentationConfig {
    /// Window length (s).
    pub window: f64,
    /// Shift between consecutive windows (s).
    pub stride: f64,
    /// Gap between the end of the upset window and the upset (s).
    pub reaction_shift: f64,
    /// Log columns cut into each segment, in feature order.
    pub signals: Vec<String>,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            window: 5.0,
            stride: 0.5,
            reaction_shift: 0.2,
            signals: ["wind_x", "wind_y", "wind_z", "a_z_tau", "f_t", "alpha", "e_p"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

impl SegmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.window > 0.0) {
            return Err(Error::config("segmentation window must be positive"));
        }
        if !(self.stride > 0.0 && self.stride <= self.window) {
            return Err(Error::config("segmentation stride must lie in (0, window]"));
        }
        if !(self.reaction_shift >= 0.0) {
            return Err(Error::config("reaction shift must be non-negative"));
        }
        if self.signals.is_empty() {
            return Err(Error::config("segmentation needs at least one signal"));
        }
        Ok(())
    }

    /// Samples per window at `sample_rate`.
    pub fn window_samples(&self, sample_rate: f64) -> usize {
        (self.window * sample_rate).round() as usize
    }

    pub fn stride_samples(&self, sample_rate: f64) -> usize {
        ((self.stride * sample_rate).round() as usize).max(1)
    }
}

/// One window of every configured signal, covering `(end_time - window, end_time]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalSegment {
    pub signals: Vec<Vec<f64>>,
    pub label: i8,
    pub run_id: String,
    pub end_time: f64,
}

/// Sample rate of a log inferred from its first two rows.
pub fn log_sample_rate(log: &RunLog) -> Result<f64> {
    if log.rows.len() < 2 {
        return Err(Error::InsufficientData("log has fewer than two samples".into()));
    }
    let dt = log.rows[1].t - log.rows[0].t;
    if !(dt > 0.0) {
        return Err(Error::InsufficientData("log time stamps are not increasing".into()));
    }
    Ok(1.0 / dt)
}

/// Cuts a log into windows. A run without upset is windowed backwards from its final sample.
/// In an upset run the first window ends `reaction_shift` before the upset and is the only
/// one labeled `-1`; earlier windows are labeled `1`.
pub fn segment_and_label(log: &RunLog, run_id: &str, cfg: &SegmentationConfig) -> Result<Vec<SignalSegment>> {
    if log.rows.len() < 2 {
        return Ok(Vec::new());
    }
    let fs = log_sample_rate(log)?;
    let n = cfg.window_samples(fs);
    let stride = cfg.stride_samples(fs);
    if n == 0 || log.rows.len() < n {
        return Ok(Vec::new());
    }
    let columns = cfg
        .signals
        .iter()
        .map(|name| log.signal(name))
        .collect::<Result<Vec<_>>>()?;

    let tol = 1e-6 / fs;
    let mut end = match log.upset_time {
        Some(t_upset) => {
            let end = t_upset - cfg.reaction_shift;
            match log.rows.iter().rposition(|r| r.t <= end + tol) {
                Some(i) if i + 1 >= n => i,
                _ => {
                    log::warn!(
                        "run {run_id}: upset at {t_upset:.2} s leaves no room for a {:.2} s window",
                        cfg.window
                    );
                    return Ok(Vec::new());
                }
            }
        }
        None => log.rows.len() - 1,
    };

    let mut out = Vec::new();
    let mut label = if log.upset_time.is_some() { -1 } else { 1 };
    loop {
        let start = end + 1 - n;
        out.push(SignalSegment {
            signals: columns.iter().map(|c| c[start..=end].to_vec()).collect(),
            label,
            run_id: run_id.to_string(),
            end_time: log.rows[end].t,
        });
        label = 1;
        if end < stride || end - stride + 1 < n {
            break;
        }
        end -= stride;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::closedloop::{LogRow, Outcome};

    fn ramp_log(duration: f64, upset: Option<f64>) -> RunLog {
        let n = (duration * 10.0).round() as usize;
        let rows = (0..=n)
            .map(|i| {
                let mut r = LogRow::from_values(&vec![0.0; crate::closedloop::LOG_COLUMNS.len()]);
                r.t = i as f64 / 10.0;
                r.f_t = r.t;
                r
            })
            .collect();
        RunLog {
            rows,
            events: Vec::new(),
            outcome: if upset.is_some() { Outcome::Rupture } else { Outcome::Completed },
            upset_time: upset,
        }
    }

    fn cfg(stride: f64) -> SegmentationConfig {
        SegmentationConfig {
            stride,
            signals: vec!["f_t".into()],
            ..Default::default()
        }
    }

    #[test]
    fn nominal_run_count() {
        let segs = segment_and_label(&ramp_log(20.0, None), "r", &cfg(1.0)).unwrap();
        let expected = ((20.0f64 - 5.0) / 1.0).floor() as usize + 1;
        assert_eq!(segs.len(), expected);
        assert!(segs.iter().all(|s| s.label == 1 && s.signals[0].len() == 50));
        assert_eq!(segs[0].end_time, 20.0);
    }

    #[test]
    fn upset_window_position() {
        let mut log = ramp_log(12.0, Some(12.0));
        log.rows.truncate(121);
        let segs = segment_and_label(&log, "r", &cfg(1.0)).unwrap();
        assert_eq!(segs[0].label, -1);
        assert!((segs[0].end_time - 11.8).abs() < 1e-9);
        // (6.8, 11.8]
        assert!((segs[0].signals[0][0] - 6.9).abs() < 1e-9);
        assert_eq!(segs.iter().filter(|s| s.label == -1).count(), 1);
        assert!(segs[1..].iter().all(|s| s.label == 1));
    }

    #[test]
    fn early_upset_has_no_segment() {
        let log = ramp_log(4.0, Some(4.0));
        assert!(segment_and_label(&log, "r", &cfg(1.0)).unwrap().is_empty());
    }

    #[test]
    fn short_log_is_empty() {
        let log = ramp_log(3.0, None);
        assert!(segment_and_label(&log, "r", &cfg(1.0)).unwrap().is_empty());
    }
}
