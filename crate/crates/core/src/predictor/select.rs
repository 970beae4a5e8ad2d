//! Greedy forward feature selection by cross-validated MCC.

use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::metrics::{ConfusionCounts, mcc};
use super::svm::{SvmParams, train_svm};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionConfig {
    pub folds: usize,
    /// Stop when the relative MCC improvement of the best candidate falls below this.
    pub min_relative_improvement: f64,
    /// Upper bound on the number of selected features; 0 means no bound.
    pub max_features: usize,
    pub sigma2_grid: Vec<f64>,
    pub c_grid: Vec<f64>,
    /// Hyperparameters used before the first grid search.
    pub initial_sigma2: f64,
    pub initial_c: f64,
    pub seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            folds: 10,
            min_relative_improvement: 1e-4,
            max_features: 0,
            sigma2_grid: vec![0.5, 2.0, 8.0, 32.0],
            c_grid: vec![1.0, 10.0, 100.0],
            initial_sigma2: 2.0,
            initial_c: 10.0,
            seed: 0,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::config("cross-validation needs at least two folds"));
        }
        if !(self.min_relative_improvement >= 0.0) {
            return Err(Error::config("min_relative_improvement must be non-negative"));
        }
        let positive = |v: &[f64]| !v.is_empty() && v.iter().all(|x| *x > 0.0);
        if !positive(&self.sigma2_grid) || !positive(&self.c_grid) {
            return Err(Error::config("hyperparameter grids must be non-empty and positive"));
        }
        if !(self.initial_sigma2 > 0.0 && self.initial_c > 0.0) {
            return Err(Error::config("initial hyperparameters must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Selected feature indices in the order they were added.
    pub selected: Vec<usize>,
    /// Cross-validated MCC after each addition.
    pub trace: Vec<f64>,
    pub sigma2: f64,
    pub c: f64,
}

/// Fold index of every sample; each class is shuffled and dealt round-robin.
pub fn stratified_folds(labels: &[i8], k: usize, seed: u64) -> Result<Vec<usize>> {
    let mut fold = vec![0; labels.len()];
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for class in [-1i8, 1] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.len() < k {
            return Err(Error::InsufficientData(format!(
                "class {class} has {} samples, fewer than {k} folds",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        for (n, i) in idx.into_iter().enumerate() {
            fold[i] = n % k;
        }
    }
    Ok(fold)
}

fn columns(x: &[Vec<f64>], cols: &[usize], rows: &[usize]) -> Vec<Vec<f64>> {
    rows.iter().map(|&r| cols.iter().map(|&c| x[r][c]).collect()).collect()
}

/// Mean MCC over folds of an SVM trained on the listed feature columns.
pub fn cv_mcc(x: &[Vec<f64>], y: &[i8], cols: &[usize], fold: &[usize], k: usize, params: &SvmParams) -> Result<f64> {
    let mut total = 0.0;
    for f in 0..k {
        let train: Vec<usize> = (0..y.len()).filter(|&i| fold[i] != f).collect();
        let test: Vec<usize> = (0..y.len()).filter(|&i| fold[i] == f).collect();
        let yt: Vec<i8> = train.iter().map(|&i| y[i]).collect();
        let model = match train_svm(&columns(x, cols, &train), &yt, params) {
            Ok(m) => m,
            Err(Error::NotConverged(msg)) => {
                log::warn!("fold {f} of features {cols:?}: {msg}; scored as MCC 0");
                continue;
            }
            Err(e) => return Err(e),
        };
        let mut counts = ConfusionCounts::default();
        for (&i, xi) in test.iter().zip(columns(x, cols, &test)) {
            counts.add(y[i], model.classify(&xi));
        }
        total += mcc(&counts);
    }
    Ok(total / k as f64)
}

/// Adds, one at a time, the feature with the best cross-validated MCC (lower index on ties) and
/// re-tunes `(sigma2, C)` on the grid after every addition. `x` is expected standardized.
pub fn greedy_forward_select(x: &[Vec<f64>], y: &[i8], candidates: &[usize], cfg: &SelectionConfig) -> Result<SelectionResult> {
    cfg.validate()?;
    if !y.iter().any(|&v| v < 0) || !y.iter().any(|&v| v > 0) {
        return Err(Error::InsufficientData("feature selection needs both classes".into()));
    }
    let k = cfg.folds;
    let fold = stratified_folds(y, k, cfg.seed)?;
    let base = SvmParams::default();
    let max_iterations = (50 * y.len()).max(100_000);
    let mut params = SvmParams {
        sigma2: cfg.initial_sigma2,
        c: cfg.initial_c,
        max_iterations,
        ..base
    };
    let mut selected: Vec<usize> = Vec::new();
    let mut trace: Vec<f64> = Vec::new();
    let limit = if cfg.max_features == 0 { candidates.len() } else { cfg.max_features.min(candidates.len()) };

    while selected.len() < limit {
        let remaining: Vec<usize> = candidates.iter().copied().filter(|c| !selected.contains(c)).collect();
        let scores = remaining
            .par_iter()
            .map(|&c| {
                let mut cols = selected.clone();
                cols.push(c);
                cv_mcc(x, y, &cols, &fold, k, &params)
            })
            .collect::<Result<Vec<f64>>>()?;
        let mut best = 0;
        for (i, s) in scores.iter().enumerate() {
            if *s > scores[best] || (*s == scores[best] && remaining[i] < remaining[best]) {
                best = i;
            }
        }
        let score = scores[best];
        if let Some(&prev) = trace.last() {
            let rel = (score - prev) / f64::max(prev.abs(), f64::MIN_POSITIVE);
            if rel < cfg.min_relative_improvement {
                log::info!("selection stops: best candidate improves MCC by {rel:.3e}");
                break;
            }
        }
        selected.push(remaining[best]);

        let grid: Vec<(f64, f64)> = cfg
            .sigma2_grid
            .iter()
            .flat_map(|&s| cfg.c_grid.iter().map(move |&c| (s, c)))
            .collect();
        let tuned = grid
            .par_iter()
            .map(|&(sigma2, c)| cv_mcc(x, y, &selected, &fold, k, &SvmParams { sigma2, c, ..params }))
            .collect::<Result<Vec<f64>>>()?;
        let mut best_mcc = score;
        for (&(sigma2, c), &m) in grid.iter().zip(&tuned) {
            if m > best_mcc {
                best_mcc = m;
                params.sigma2 = sigma2;
                params.c = c;
            }
        }
        log::info!(
            "selected feature {} (MCC {best_mcc:.4}, sigma2 {}, C {})",
            remaining[best],
            params.sigma2,
            params.c
        );
        trace.push(best_mcc);
    }
    Ok(SelectionResult {
        selected,
        trace,
        sigma2: params.sigma2,
        c: params.c,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn data(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<i8>) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let y: Vec<i8> = (0..n).map(|i| if i % 2 == 0 { 1 } else { -1 }).collect();
        let x = y
            .iter()
            .map(|&l| {
                let noise: f64 = rng.sample(StandardNormal);
                let sep = l as f64 * 2.0 + 0.1 * rng.sample::<f64, _>(StandardNormal);
                vec![noise, sep, sep]
            })
            .collect();
        (x, y)
    }

    fn quick() -> SelectionConfig {
        SelectionConfig {
            folds: 4,
            sigma2_grid: vec![2.0],
            c_grid: vec![10.0],
            ..Default::default()
        }
    }

    #[test]
    fn perfect_feature_first_then_stop() {
        let (x, y) = data(80, 1);
        let r = greedy_forward_select(&x, &y, &[0, 1], &quick()).unwrap();
        assert_eq!(r.selected, vec![1]);
        assert_eq!(r.trace, vec![1.0]);
    }

    #[test]
    fn identical_features_tie_to_lower_index() {
        let (x, y) = data(80, 2);
        let r = greedy_forward_select(&x, &y, &[2, 1], &quick()).unwrap();
        assert_eq!(r.selected[0], 1);
    }

    #[test]
    fn folds_are_stratified() {
        let y: Vec<i8> = (0..50).map(|i| if i < 10 { -1 } else { 1 }).collect();
        let f = stratified_folds(&y, 5, 3).unwrap();
        for k in 0..5 {
            assert_eq!((0..50).filter(|&i| f[i] == k && y[i] < 0).count(), 2);
            assert_eq!((0..50).filter(|&i| f[i] == k && y[i] > 0).count(), 8);
        }
        assert!(stratified_folds(&y[..12], 5, 0).is_err());
    }

    #[test]
    fn single_class_rejected() {
        let x = vec![vec![0.0]; 20];
        assert!(greedy_forward_select(&x, &[1; 20], &[0], &quick()).is_err());
    }
}
