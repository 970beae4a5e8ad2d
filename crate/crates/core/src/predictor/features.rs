//! Per-window time and frequency domain statistics.

use rustfft::FftPlanner;
use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::segment::SignalSegment;

/// Bumped whenever the feature list or a feature definition changes.
pub const FEATURE_SCHEMA_VERSION: u32 = 1;

const RMS_FLOOR: f64 = 1e-12;

/// Names and order of the feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSchema {
    pub version: u32,
    pub signals: Vec<String>,
    /// Lags of the time-reversal statistic (s).
    pub lags: Vec<f64>,
    pub sample_rate: f64,
    /// Lower edge of the high-frequency amplitude band (Hz).
    pub cutoff_hz: f64,
}

impl FeatureSchema {
    pub fn new(signals: Vec<String>, sample_rate: f64) -> Self {
        Self {
            version: FEATURE_SCHEMA_VERSION,
            signals,
            lags: vec![0.5, 1.0],
            sample_rate,
            cutoff_hz: 1.0,
        }
    }

    /// Feature names for a single signal.
    pub fn per_signal_names(&self) -> Vec<String> {
        let mut names: Vec<String> = [
            "mean",
            "median",
            "rms",
            "variance",
            "max",
            "min",
            "peak_to_peak",
            "skewness",
            "kurtosis",
            "crest_factor",
            "mad",
            "cumsum_range",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        names.extend(self.lags.iter().map(|tau| format!("time_reversal_{tau}s")));
        names.extend(
            ["max_slope", "spectrum_median", "spectrum_max", "spectrum_max_above_cutoff"]
                .iter()
                .map(|s| s.to_string()),
        );
        names
    }

    /// Fully qualified names `signal.feature`, signal-major.
    pub fn names(&self) -> Vec<String> {
        let per = self.per_signal_names();
        self.signals
            .iter()
            .flat_map(|s| per.iter().map(move |f| format!("{s}.{f}")))
            .collect()
    }

    pub fn dimension(&self) -> usize {
        self.signals.len() * self.per_signal_names().len()
    }

    pub fn lag_samples(&self, tau: f64) -> usize {
        (tau * self.sample_rate).round() as usize
    }
}

fn mean(s: &[f64]) -> f64 {
    s.iter().sum::<f64>() / s.len() as f64
}

fn median(s: &[f64]) -> f64 {
    let mut v = s.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `E[d^3] / E[d^2]^{3/2}` of the increments `d_t = s_t - s_{t-lag}`; zero for zero increments.
pub fn time_reversal_stat(signal: &[f64], lag: usize) -> f64 {
    if lag == 0 || signal.len() <= lag {
        return 0.0;
    }
    let (mut m2, mut m3) = (0.0, 0.0);
    for t in lag..signal.len() {
        let d = signal[t] - signal[t - lag];
        m2 += d * d;
        m3 += d * d * d;
    }
    let n = (signal.len() - lag) as f64;
    let (m2, m3) = (m2 / n, m3 / n);
    if m2 <= 0.0 {
        return 0.0;
    }
    m3 / (m2 * m2.sqrt())
}

/// Single-sided amplitude spectrum of the mean-removed signal, bins `1..=n/2`, with frequencies.
pub fn amplitude_spectrum(signal: &[f64], sample_rate: f64) -> Vec<(f64, f64)> {
    let n = signal.len();
    let m = mean(signal);
    let mut buf: Vec<Complex<f64>> = signal.iter().map(|&x| Complex::new(x - m, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    (1..=n / 2)
        .map(|k| {
            let scale = if 2 * k == n { 1.0 } else { 2.0 };
            (k as f64 * sample_rate / n as f64, scale * buf[k].norm() / n as f64)
        })
        .collect()
}

/// Statistics of one signal window in the order of [`FeatureSchema::per_signal_names`].
pub fn signal_features(s: &[f64], schema: &FeatureSchema) -> Result<Vec<f64>> {
    if s.len() < 8 {
        return Err(Error::InsufficientData(format!(
            "feature extraction needs at least 8 samples, got {}",
            s.len()
        )));
    }
    let n = s.len() as f64;
    let mu = mean(s);
    let med = median(s);
    let (mut m2, mut m3, mut m4, mut sq) = (0.0, 0.0, 0.0, 0.0);
    for &x in s {
        let d = x - mu;
        m2 += d * d;
        m3 += d * d * d;
        m4 += d * d * d * d;
        sq += x * x;
    }
    let (m2, m3, m4) = (m2 / n, m3 / n, m4 / n);
    let rms = (sq / n).sqrt();
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = s.iter().copied().fold(f64::INFINITY, f64::min);
    let peak = max.abs().max(min.abs());
    let constant = m2 <= (f64::EPSILON * mu).powi(2);
    let (skew, kurt) = if constant {
        (0.0, 0.0)
    } else {
        (m3 / (m2 * m2.sqrt()), m4 / (m2 * m2) - 3.0)
    };
    let crest = if rms < RMS_FLOOR { 1.0 } else { peak / rms };
    let deviations: Vec<f64> = s.iter().map(|x| (x - med).abs()).collect();
    let mad = median(&deviations);
    let (mut acc, mut cmin, mut cmax) = (0.0, f64::INFINITY, f64::NEG_INFINITY);
    for &x in s {
        acc += x;
        cmin = cmin.min(acc);
        cmax = cmax.max(acc);
    }
    let max_slope = s.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max) * schema.sample_rate;

    let spectrum = amplitude_spectrum(s, schema.sample_rate);
    let amps: Vec<f64> = spectrum.iter().map(|&(_, a)| a).collect();
    let spec_median = median(&amps);
    let spec_max = amps.iter().copied().fold(0.0, f64::max);
    let spec_high = spectrum
        .iter()
        .filter(|&&(f, _)| f > schema.cutoff_hz)
        .map(|&(_, a)| a)
        .fold(0.0, f64::max);

    let mut out = vec![
        mu,
        med,
        rms,
        m2,
        max,
        min,
        max - min,
        skew,
        kurt,
        crest,
        mad,
        cmax - cmin,
    ];
    for &tau in &schema.lags {
        out.push(time_reversal_stat(s, schema.lag_samples(tau)));
    }
    out.extend([max_slope, spec_median, spec_max, spec_high]);
    Ok(out)
}

/// Feature vector of a segment, signal-major in schema order.
pub fn extract_features(segment: &SignalSegment, schema: &FeatureSchema) -> Result<Vec<f64>> {
    if segment.signals.len() != schema.signals.len() {
        return Err(Error::Schema(format!(
            "segment has {} signals, schema expects {}",
            segment.signals.len(),
            schema.signals.len()
        )));
    }
    let mut out = Vec::with_capacity(schema.dimension());
    for s in &segment.signals {
        out.extend(signal_features(s, schema)?);
    }
    if let Some(i) = out.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite feature {}", schema.names()[i])));
    }
    Ok(out)
}
