//! Economic loss rate of prediction errors and predictor ranking.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossModelParams {
    /// Upset probability per pumping cycle.
    pub p_f: f64,
    /// Probability of missing an upset given one occurs.
    pub fn_conditional: f64,
    /// Probability of a false trigger per pumping cycle.
    pub fp_probability: f64,
    /// Power lost during an avoidance maneuver (kW).
    pub p_em: f64,
    /// Average cycle power (kW).
    pub p_pc: f64,
    /// Average cycle duration (min).
    pub t_pc: f64,
    /// Downtime after a missed upset (min).
    pub downtime: f64,
    /// Further loss per missed upset (kWh).
    pub e_misc: f64,
}

impl LossModelParams {
    /// Average cycle parameters of the reference system with a given downtime.
    pub fn reference(fn_conditional: f64, fp_probability: f64, downtime: f64) -> Self {
        Self {
            p_f: 2e-7,
            fn_conditional,
            fp_probability,
            p_em: 0.4,
            p_pc: 3.9,
            t_pc: 2.5,
            downtime,
            e_misc: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.p_f,
            self.fn_conditional,
            self.fp_probability,
            self.p_em,
            self.p_pc,
            self.t_pc,
            self.downtime,
            self.e_misc,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("loss model parameters must be finite"));
        }
        for (name, p) in [
            ("p_f", self.p_f),
            ("fn_conditional", self.fn_conditional),
            ("fp_probability", self.fp_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::domain(format!("{name} = {p} is not a probability")));
            }
        }
        if self.p_em < 0.0 || self.downtime < 0.0 || self.e_misc < 0.0 {
            return Err(Error::domain("powers, times and energies must be non-negative"));
        }
        if !(self.p_pc > 0.0 && self.t_pc > 0.0) {
            return Err(Error::domain("cycle power and duration must be positive"));
        }
        Ok(())
    }
}

pub fn minutes_to_hours(min: f64) -> f64 {
    min / 60.0
}

pub fn hours_to_minutes(h: f64) -> f64 {
    h * 60.0
}

pub fn kw_min_to_kwh(e: f64) -> f64 {
    e / 60.0
}

pub fn kwh_to_kw_min(e: f64) -> f64 {
    e * 60.0
}

/// Rate of missed upsets per cycle from replayed upsets of an independent run.
pub fn fn_rate(n_fn: u64, n_tp: u64, p_f: f64) -> Result<f64> {
    if n_fn + n_tp == 0 {
        return Err(Error::InsufficientData("no replayed upsets to estimate the miss rate".into()));
    }
    Ok(n_fn as f64 / (n_fn + n_tp) as f64 * p_f)
}

/// False trigger probability of a threshold `q*` from the CDF value `F(q*)` of the per-run
/// maximum of `g`.
pub fn fp_prob_from_cdf(cdf_at_threshold: f64, p_f: f64) -> f64 {
    (1.0 - cdf_at_threshold - p_f).max(0.0)
}

/// Empirical-CDF version of [`fp_prob_from_cdf`] over per-run maxima of `g`.
pub fn fp_prob_threshold(run_maxima: &[f64], q_star: f64, p_f: f64) -> Result<f64> {
    if run_maxima.is_empty() {
        return Err(Error::InsufficientData("no run maxima for the threshold CDF".into()));
    }
    if run_maxima.len() < 1000 {
        log::warn!("threshold CDF built from only {} runs", run_maxima.len());
    }
    let n = run_maxima.len() as f64;
    let cdf = run_maxima.iter().filter(|&&g| g <= q_star).count() as f64 / n;
    if cdf < 0.5 {
        log::warn!("threshold {q_star} lies below the median run maximum; nearly every cycle triggers");
    }
    Ok(fp_prob_from_cdf(cdf, p_f))
}

/// Intermediate quantities of the loss rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub lambda_fn: f64,
    pub lambda_fp: f64,
    /// Cycles until the first expected missed upset; infinite without misses.
    pub n_pc: f64,
    /// False triggers expected before the first miss.
    pub n_fp: f64,
    /// Cycles lost to the downtime.
    pub n_mpc: f64,
    /// Energy of one cycle (kWh).
    pub e_pc: f64,
    /// Loss per cycle relative to the cycle energy.
    pub loss_rate: f64,
}

/// Expected energy lost per cycle through false triggers and missed upsets, relative to the
/// cycle energy:
/// `(n_FP P_em / P_pc + n_mpc + E_misc / E_pc) / (n_pc + n_mpc)`.
/// Without misses this is its limit `lambda_FP P_em / P_pc`.
pub fn loss_breakdown(p: &LossModelParams) -> Result<LossBreakdown> {
    p.validate()?;
    let lambda_fn = p.fn_conditional * p.p_f;
    let lambda_fp = p.fp_probability;
    let n_mpc = p.downtime / p.t_pc;
    let e_pc = kw_min_to_kwh(p.p_pc * p.t_pc);
    let power_ratio = p.p_em / p.p_pc;
    let (n_pc, n_fp, loss_rate) = if lambda_fn == 0.0 {
        (f64::INFINITY, f64::INFINITY, lambda_fp * power_ratio)
    } else {
        let n_pc = 1.0 / lambda_fn;
        let n_fp = lambda_fp * n_pc;
        let l = (n_fp * power_ratio + n_mpc + p.e_misc / e_pc) / (n_pc + n_mpc);
        (n_pc, if lambda_fp == 0.0 { 0.0 } else { n_fp }, l)
    };
    Ok(LossBreakdown {
        lambda_fn,
        lambda_fp,
        n_pc,
        n_fp,
        n_mpc,
        e_pc,
        loss_rate,
    })
}

pub fn loss_rate(p: &LossModelParams) -> Result<f64> {
    Ok(loss_breakdown(p)?.loss_rate)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedEntry {
    pub downtime: f64,
    pub rank: usize,
    pub name: String,
    pub loss_rate: f64,
}

/// Loss rate of every predictor at every downtime, ascending per downtime with ties in name order.
pub fn rank_predictors(predictors: &[(String, LossModelParams)], downtimes: &[f64]) -> Result<Vec<RankedEntry>> {
    let mut out = Vec::new();
    for &dt in downtimes {
        let mut rows = predictors
            .iter()
            .map(|(name, p)| {
                let l = loss_rate(&LossModelParams { downtime: dt, ..*p })?;
                Ok((name.clone(), l))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
        out.extend(rows.into_iter().enumerate().map(|(i, (name, l))| RankedEntry {
            downtime: dt,
            rank: i + 1,
            name,
            loss_rate: l,
        }));
    }
    Ok(out)
}

/// `downtime_min,rank,predictor,loss_rate` rows.
pub fn ranking_csv(entries: &[RankedEntry]) -> String {
    let mut s = String::from("downtime_min,rank,predictor,loss_rate\n");
    for e in entries {
        let _ = writeln!(s, "{},{},{},{:e}", e.downtime, e.rank, e.name, e.loss_rate);
    }
    s
}

/// Log-spaced downtime grid (min) from `from` to `to` with `n` points.
pub fn downtime_grid(from: f64, to: f64, n: usize) -> Vec<f64> {
    if n < 2 {
        return vec![from];
    }
    let (a, b) = (from.ln(), to.ln());
    let mut grid: Vec<f64> = (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect();
    grid[0] = from;
    grid[n - 1] = to;
    grid
}
