//! Soft-margin support vector machine with a Gaussian kernel, trained by sequential minimal
//! optimization with second-order working-set selection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const TAU: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SvmParams {
    /// Kernel width in `exp(-|x - y|^2 / sigma2)`.
    pub sigma2: f64,
    /// Box constraint.
    pub c: f64,
    /// KKT violation tolerance.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Kernel row cache size (MB).
    pub cache_mb: usize,
}

impl Default for SvmParams {
    fn default() -> Self {
        Self {
            sigma2: 2.0,
            c: 10.0,
            tolerance: 1e-3,
            max_iterations: 10_000_000,
            cache_mb: 256,
        }
    }
}

pub fn rbf(a: &[f64], b: &[f64], sigma2: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-d2 / sigma2).exp()
}

/// Decision function `f(x) = sum_j coef_j K(x, sv_j) + b` with `coef_j = alpha_j y_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmMachine {
    pub support_vectors: Vec<Vec<f64>>,
    pub alpha: Vec<f64>,
    pub labels: Vec<i8>,
    pub bias: f64,
    pub sigma2: f64,
    /// Solver iterations used.
    pub iterations: usize,
}

impl SvmMachine {
    pub fn decision(&self, x: &[f64]) -> f64 {
        let mut f = 0.0;
        for ((sv, a), &y) in self.support_vectors.iter().zip(&self.alpha).zip(&self.labels) {
            f += a * y as f64 * rbf(x, sv, self.sigma2);
        }
        f + self.bias
    }

    pub fn classify(&self, x: &[f64]) -> i8 {
        class_of(self.decision(x))
    }
}

/// `1` iff `f >= 0`.
pub fn class_of(f: f64) -> i8 {
    if f >= 0.0 { 1 } else { -1 }
}

struct KernelCache<'a> {
    x: &'a [Vec<f64>],
    y: &'a [i8],
    sigma2: f64,
    rows: Vec<Option<Vec<f64>>>,
    order: std::collections::VecDeque<usize>,
    capacity: usize,
}

impl<'a> KernelCache<'a> {
    fn new(x: &'a [Vec<f64>], y: &'a [i8], sigma2: f64, cache_mb: usize) -> Self {
        let n = x.len();
        let capacity = ((cache_mb << 20) / (8 * n.max(1))).clamp(2, n.max(2));
        Self {
            x,
            y,
            sigma2,
            rows: vec![None; n],
            order: Default::default(),
            capacity,
        }
    }

    /// Row `i` of `Q_ij = y_i y_j K(x_i, x_j)`.
    fn row(&mut self, i: usize) -> &[f64] {
        if self.rows[i].is_none() {
            if self.order.len() >= self.capacity {
                let old = self.order.pop_front().unwrap();
                self.rows[old] = None;
            }
            let yi = self.y[i] as f64;
            let r = self
                .x
                .iter()
                .zip(self.y)
                .map(|(xj, &yj)| yi * yj as f64 * rbf(&self.x[i], xj, self.sigma2))
                .collect();
            self.rows[i] = Some(r);
            self.order.push_back(i);
        }
        self.rows[i].as_deref().unwrap()
    }
}

/// Solves the soft-margin dual on `(x, y)` and keeps the samples with `alpha > 0`.
pub fn train_svm(x: &[Vec<f64>], y: &[i8], params: &SvmParams) -> Result<SvmMachine> {
    let n = x.len();
    if n != y.len() {
        return Err(Error::domain("feature and label counts differ"));
    }
    if !y.iter().any(|&v| v < 0) || !y.iter().any(|&v| v > 0) {
        return Err(Error::InsufficientData("SVM training needs both classes".into()));
    }
    if !(params.sigma2 > 0.0 && params.c > 0.0 && params.tolerance > 0.0) {
        return Err(Error::config("SVM sigma2, C and tolerance must be positive"));
    }
    let c = params.c;
    let yf: Vec<f64> = y.iter().map(|&v| if v < 0 { -1.0 } else { 1.0 }).collect();
    let ys: Vec<i8> = yf.iter().map(|&v| v as i8).collect();
    let mut cache = KernelCache::new(x, &ys, params.sigma2, params.cache_mb);
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    // Q_ii = K(x_i, x_i) = 1 for the Gaussian kernel
    let qd = 1.0;

    let upper = |a: f64| a >= c;
    let lower = |a: f64| a <= 0.0;

    let mut iterations = 0;
    loop {
        // most violating i from the "up" set
        let mut gmax = f64::NEG_INFINITY;
        let mut i_sel = None;
        for t in 0..n {
            let v = -yf[t] * grad[t];
            let in_up = if yf[t] > 0.0 { !upper(alpha[t]) } else { !lower(alpha[t]) };
            if in_up && v > gmax {
                gmax = v;
                i_sel = Some(t);
            }
        }
        let Some(i) = i_sel else { break };
        let qi = cache.row(i).to_vec();

        let mut gmax2 = f64::NEG_INFINITY;
        let mut j_sel = None;
        let mut obj_min = f64::INFINITY;
        for t in 0..n {
            let in_low = if yf[t] > 0.0 { !lower(alpha[t]) } else { !upper(alpha[t]) };
            if !in_low {
                continue;
            }
            let v = -yf[t] * grad[t];
            gmax2 = gmax2.max(-v);
            let b = gmax - v;
            if b > 0.0 {
                let a = qd + qd - 2.0 * yf[i] * yf[t] * qi[t];
                let a = if a > 0.0 { a } else { TAU };
                let obj = -(b * b) / a;
                if obj < obj_min {
                    obj_min = obj;
                    j_sel = Some(t);
                }
            }
        }
        if gmax + gmax2 < params.tolerance {
            break;
        }
        let Some(j) = j_sel else { break };
        if iterations >= params.max_iterations {
            return Err(Error::NotConverged(format!(
                "SMO stopped after {iterations} iterations with KKT gap {:.3e} (tolerance {:.1e}, n = {n})",
                gmax + gmax2,
                params.tolerance
            )));
        }
        iterations += 1;

        let qij = qi[j];
        let (ai_old, aj_old) = (alpha[i], alpha[j]);
        if yf[i] != yf[j] {
            let quad = {
                let q = qd + qd + 2.0 * qij;
                if q > 0.0 { q } else { TAU }
            };
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let quad = {
                let q = qd + qd - 2.0 * qij;
                if q > 0.0 { q } else { TAU }
            };
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (dai, daj) = (alpha[i] - ai_old, alpha[j] - aj_old);
        let qj = cache.row(j);
        for t in 0..n {
            grad[t] += qi[t] * dai + qj[t] * daj;
        }
    }

    // bias from free multipliers, or the middle of the feasible interval
    let (mut ub, mut lb, mut sum_free, mut n_free) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize);
    for t in 0..n {
        let yg = yf[t] * grad[t];
        if upper(alpha[t]) {
            if yf[t] < 0.0 { ub = ub.min(yg) } else { lb = lb.max(yg) }
        } else if lower(alpha[t]) {
            if yf[t] > 0.0 { ub = ub.min(yg) } else { lb = lb.max(yg) }
        } else {
            n_free += 1;
            sum_free += yg;
        }
    }
    let rho = if n_free > 0 { sum_free / n_free as f64 } else { 0.5 * (ub + lb) };

    let keep: Vec<usize> = (0..n).filter(|&t| alpha[t] > 0.0).collect();
    Ok(SvmMachine {
        support_vectors: keep.iter().map(|&t| x[t].clone()).collect(),
        alpha: keep.iter().map(|&t| alpha[t]).collect(),
        labels: keep.iter().map(|&t| ys[t]).collect(),
        bias: -rho,
        sigma2: params.sigma2,
        iterations,
    })
}
