//! Campaign configuration file.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::closedloop::SimulationConfig;
use crate::error::{Error, Result};
use crate::predictor::{SegmentationConfig, TrainingConfig};
use crate::subsim::SubsetSimConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    /// Pumping cycles run by `simulate`.
    pub runs: usize,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self { runs: 10 }
    }
}

/// Replaces the closed loop by `g(theta) = sum(theta) / sqrt(d)` in `subsim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkSection {
    pub enabled: bool,
    pub dimension: usize,
    pub g_star: f64,
}

impl Default for BenchmarkSection {
    fn default() -> Self {
        Self {
            enabled: false,
            dimension: 100,
            g_star: 3.0,
        }
    }
}

/// Builds feature sets from synthetic logs instead of simulator replays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSection {
    pub enabled: bool,
    pub nominal_runs: usize,
    pub upset_runs: usize,
    /// Length of a synthetic run (s).
    pub duration: f64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        Self {
            enabled: false,
            nominal_runs: 30,
            upset_runs: 30,
            duration: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureSection {
    /// Time-reversal statistic lags (s).
    pub lags: Vec<f64>,
    /// Lower edge of the high-frequency amplitude band (Hz).
    pub cutoff_hz: f64,
    /// Non-failure direct Monte Carlo samples replayed for nominal segments.
    pub nominal_runs: usize,
    /// Failure samples replayed; 0 replays all.
    pub max_failure_runs: usize,
}

impl Default for FeatureSection {
    fn default() -> Self {
        Self {
            lags: vec![0.5, 1.0],
            cutoff_hz: 1.0,
            nominal_runs: 50,
            max_failure_runs: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    /// Threshold predictors at `F_t,set * (1 + offset)`.
    pub threshold_offsets: Vec<f64>,
    pub svm: bool,
    /// Nominal runs used for false-trigger statistics.
    pub monte_carlo_runs: usize,
    /// Failure samples replayed per predictor; 0 replays all.
    pub max_replays: usize,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            threshold_offsets: vec![0.08, 0.10, 0.12, 0.14, 0.16],
            svm: true,
            monte_carlo_runs: 100,
            max_replays: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    /// Power lost while an avoidance maneuver runs (kW).
    pub p_em: f64,
    /// Average cycle power (kW); measured from the evaluation runs when absent.
    pub p_pc: Option<f64>,
    /// Average cycle duration (min); measured when absent.
    pub t_pc: Option<f64>,
    /// Upset probability per cycle; taken from the evaluation subset simulation when absent.
    pub p_f: Option<f64>,
    /// Further loss per missed upset (kWh).
    pub e_misc: f64,
    /// Downtime grid (min), log-spaced.
    pub downtime_from: f64,
    pub downtime_to: f64,
    pub downtime_points: usize,
}

impl Default for LossSection {
    fn default() -> Self {
        Self {
            p_em: 0.4,
            p_pc: None,
            t_pc: None,
            p_f: None,
            e_misc: 0.0,
            downtime_from: 60.0,
            downtime_to: 40320.0,
            downtime_points: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CampaignConfig {
    /// Master seed; every stage derives its own streams from it.
    pub seed: u64,
    /// Campaign directory; a command line `--out` takes precedence. Not part of the hash.
    pub output_dir: String,
    pub simulation: SimulationConfig,
    pub simulate: SimulateSection,
    /// The seed inside this section is replaced by one derived from the master seed and run id.
    pub subsim: SubsetSimConfig,
    pub benchmark: BenchmarkSection,
    pub synthetic: SyntheticSection,
    pub segmentation: SegmentationConfig,
    pub features: FeatureSection,
    pub training: TrainingConfig,
    pub evaluation: EvaluationSection,
    pub loss: LossSection,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            output_dir: "campaign".into(),
            simulation: SimulationConfig::default(),
            simulate: SimulateSection::default(),
            subsim: SubsetSimConfig::default(),
            benchmark: BenchmarkSection::default(),
            synthetic: SyntheticSection::default(),
            segmentation: SegmentationConfig::default(),
            features: FeatureSection::default(),
            training: TrainingConfig::default(),
            evaluation: EvaluationSection::default(),
            loss: LossSection::default(),
        }
    }
}

impl CampaignConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string().trim_end().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.simulation.validate()?;
        self.subsim.validate()?;
        self.segmentation.validate()?;
        self.training.selection.validate()?;
        if self.benchmark.enabled && (self.benchmark.dimension == 0 || !self.benchmark.g_star.is_finite()) {
            return Err(Error::config("benchmark needs a positive dimension and finite g_star"));
        }
        if self.synthetic.enabled
            && (self.synthetic.upset_runs == 0
                || self.synthetic.nominal_runs == 0
                || !(self.synthetic.duration > self.segmentation.window))
        {
            return Err(Error::config("synthetic mode needs runs of both kinds longer than the window"));
        }
        if self.features.lags.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::config("feature lags must be positive"));
        }
        if self.evaluation.threshold_offsets.iter().any(|o| !o.is_finite()) {
            return Err(Error::config("threshold offsets must be finite"));
        }
        let l = &self.loss;
        let positive = |v: Option<f64>| v.is_none_or(|x| x > 0.0);
        if !(l.p_em >= 0.0 && l.e_misc >= 0.0 && positive(l.p_pc) && positive(l.t_pc)) {
            return Err(Error::config("loss powers and durations must be positive"));
        }
        if l.p_f.is_some_and(|p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::config("loss.p_f must be a probability"));
        }
        if !(l.downtime_from > 0.0 && l.downtime_to >= l.downtime_from && l.downtime_points >= 1) {
            return Err(Error::config("downtime grid must be positive and increasing"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical (defaults filled in) configuration.
    pub fn hash(&self) -> String {
        let hashed = Self {
            output_dir: String::new(),
            ..self.clone()
        };
        let canonical = serde_json::to_string(&hashed).expect("configuration serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

/// Seed for a named stream of the campaign.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = CampaignConfig::from_toml("seed = 7\n[subsim]\nn_samples = 200\n", Path::new("c.toml")).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.subsim.n_samples, 200);
        assert_eq!(cfg.subsim.p0, 0.1);
        assert_eq!(cfg.segmentation.window, 5.0);
    }

    #[test]
    fn round_trip_and_hash() {
        let cfg = CampaignConfig::default();
        let back = CampaignConfig::from_toml(&cfg.to_toml(), Path::new("c.toml")).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        let other = CampaignConfig { seed: 2, ..cfg.clone() };
        assert_ne!(other.hash(), cfg.hash());
        let moved = CampaignConfig {
            output_dir: "elsewhere".into(),
            ..cfg.clone()
        };
        assert_eq!(moved.hash(), cfg.hash());
    }

    #[test]
    fn unknown_field_reports_location() {
        let err = CampaignConfig::from_toml("seed = 1\n[subsim]\nsamples = 3\n", Path::new("c.toml")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3"), "{msg}");
        assert!(msg.contains("samples"), "{msg}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn invalid_value_rejected() {
        let err = CampaignConfig::from_toml("[subsim]\np0 = 1.5\n", Path::new("c.toml")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, "a"), derive_seed(1, "b"));
        assert_eq!(derive_seed(1, "a"), derive_seed(1, "a"));
    }
}
