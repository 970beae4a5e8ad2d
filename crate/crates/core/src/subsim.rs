//! Subset simulation with the modified Metropolis sampler and adaptive proposal scaling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SubsetSimConfig {
    /// Samples per level.
    pub n_samples: usize,
    /// Conditional level probability.
    pub p0: f64,
    pub max_levels: usize,
    /// Initial proposal scaling relative to the seed spread.
    pub initial_scaling: f64,
    /// Target acceptance rate for the scaling adaptation.
    pub target_acceptance: f64,
    /// Chains per adaptation batch; 0 picks a tenth of the chains per level.
    pub adaptation_batch: usize,
    /// Added to `g_star` for samples whose evaluation failed at level 0.
    pub error_penalty: f64,
    pub seed: u64,
}

impl Default for SubsetSimConfig {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            p0: 0.1,
            max_levels: 20,
            initial_scaling: 0.6,
            target_acceptance: 0.44,
            adaptation_batch: 0,
            error_penalty: 1.0,
            seed: 0,
        }
    }
}

impl SubsetSimConfig {
    /// Seeds carried into each new level.
    pub fn n_seeds(&self) -> usize {
        (self.n_samples as f64 * self.p0).round() as usize
    }

    /// Steps each chain adds after its seed.
    pub fn chain_length(&self) -> usize {
        (1.0 / self.p0).round() as usize - 1
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p0 > 0.0 && self.p0 < 1.0) {
            return Err(Error::config("p0 must lie in (0, 1)"));
        }
        let nc = self.n_samples as f64 * self.p0;
        if self.n_samples == 0 || (nc - nc.round()).abs() > 1e-9 || nc.round() < 1.0 {
            return Err(Error::config("n_samples * p0 must be a positive integer"));
        }
        let inv = 1.0 / self.p0;
        if (inv - inv.round()).abs() > 1e-9 {
            return Err(Error::config("1/p0 must be an integer"));
        }
        if self.max_levels == 0 {
            return Err(Error::config("max_levels must be >= 1"));
        }
        if !(self.initial_scaling > 0.0 && self.initial_scaling <= 1.0) {
            return Err(Error::config("initial_scaling must lie in (0, 1]"));
        }
        if !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0) {
            return Err(Error::config("target_acceptance must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Result of one limit-function evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub g: f64,
    /// The run ended without a usable result (counted separately).
    pub invalid: bool,
}

impl Evaluation {
    pub fn valid(g: f64) -> Self {
        Self { g, invalid: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub theta: Vec<f64>,
    pub g: f64,
    pub invalid: bool,
    /// Level at which the sample was generated (0 = direct Monte Carlo).
    pub level: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSummary {
    /// Threshold defining this level's domain (none for level 0).
    pub threshold: Option<f64>,
    /// Limit values of the level's samples in generation order.
    pub g: Vec<f64>,
    pub invalid: usize,
    /// Mean chain acceptance rate (level 0: none).
    pub acceptance: Option<f64>,
    /// Proposal scaling at the end of the level.
    pub scaling: f64,
    /// Failed evaluations inside chains, treated as rejected candidates.
    pub chain_errors: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubsetSimResult {
    pub levels: Vec<LevelSummary>,
    /// Intermediate thresholds `T_1 < T_2 < ...`.
    pub thresholds: Vec<f64>,
    pub g_star: f64,
    /// Number of levels used, `m_s`.
    pub level_count: usize,
    /// Failure-domain samples in the final level (repeats counted).
    pub n_failures: usize,
    pub p_f: f64,
    /// `p_f` with invalid samples removed from the failure count.
    pub p_f_valid_only: f64,
    pub converged: bool,
    /// Distinct samples with `g >= g_star`, over all levels.
    pub failures: Vec<Sample>,
    /// Every distinct sample, kept when requested.
    pub retained: Vec<Sample>,
    pub invalid_count: usize,
}

/// Per-chain random stream derived from the master seed.
pub fn stream_rng(seed: u64, level: usize, index: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(((level as u64) << 40) | index as u64);
    rng
}

fn standard_normal_vec<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Noise vector of the `index`-th direct Monte Carlo sample.
pub fn level0_theta(seed: u64, index: usize, d: usize) -> Vec<f64> {
    standard_normal_vec(&mut stream_rng(seed, 0, index), d)
}

/// `n` iid standard-normal samples of dimension `d`, evaluated in submission order.
pub fn direct_mc_level<F>(simulate: &F, d: usize, n: usize, seed: u64, error_g: f64) -> Vec<Sample>
where
    F: Fn(&[f64]) -> Result<Evaluation> + Sync,
{
    (0..n)
        .into_par_iter()
        .map(|i| {
            let theta = level0_theta(seed, i, d);
            let (g, invalid) = match simulate(&theta) {
                Ok(e) => (e.g, e.invalid),
                Err(_) => (error_g, true),
            };
            Sample {
                theta,
                g,
                invalid,
                level: 0,
            }
        })
        .collect()
}

/// Indices ordering `g` descending; ties keep the lower index first.
pub fn descending_order(g: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..g.len()).collect();
    idx.sort_by(|&a, &b| g[b].total_cmp(&g[a]).then(a.cmp(&b)));
    idx
}

/// Midpoint between the `n_c`-th and `(n_c+1)`-th largest values.
///
/// Fails when no value lies strictly above the midpoint.
pub fn intermediate_threshold(sorted_desc: &[f64], n_samples: usize, p0: f64, level: usize) -> Result<f64> {
    let nc = (n_samples as f64 * p0).round() as usize;
    if nc == 0 || sorted_desc.len() < nc + 1 {
        return Err(Error::InsufficientData(format!(
            "threshold needs {} samples, got {}",
            nc + 1,
            sorted_desc.len()
        )));
    }
    let t = 0.5 * (sorted_desc[nc - 1] + sorted_desc[nc]);
    // ties at the boundary are fine as long as something lies strictly above
    if !(sorted_desc[0] > t) {
        return Err(Error::DegenerateLevel {
            level,
            reason: format!("no limit value exceeds the tied threshold {t}"),
        });
    }
    Ok(t)
}

/// One chain state with its evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub theta: Vec<f64>,
    pub g: f64,
    pub invalid: bool,
    /// The state repeats its predecessor.
    pub repeated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutput {
    pub states: Vec<ChainState>,
    pub accepted: usize,
    pub errors: usize,
}

/// Modified Metropolis chain targeting the standard normal restricted to `g >= threshold`.
pub fn metropolis_chain<F, R>(
    seed_theta: &[f64],
    seed_eval: Evaluation,
    steps: usize,
    sigma: &[f64],
    threshold: f64,
    simulate: &F,
    rng: &mut R,
) -> ChainOutput
where
    F: Fn(&[f64]) -> Result<Evaluation> + ?Sized,
    R: Rng + ?Sized,
{
    let mut current = seed_theta.to_vec();
    let mut current_eval = seed_eval;
    let mut states = Vec::with_capacity(steps);
    let (mut accepted, mut errors) = (0, 0);
    for _ in 0..steps {
        let mut candidate = current.clone();
        let mut moved = false;
        for k in 0..current.len() {
            let xi = current[k] + sigma[k] * rng.sample::<f64, _>(StandardNormal);
            // ratio of standard normal densities
            let ratio = (0.5 * (current[k] * current[k] - xi * xi)).exp();
            let u: f64 = rng.random();
            if ratio >= 1.0 || u < ratio {
                candidate[k] = xi;
                moved = true;
            }
        }
        let mut take = false;
        if moved {
            match simulate(&candidate) {
                Ok(e) if e.g >= threshold => {
                    take = true;
                    current_eval = e;
                }
                Ok(_) => {}
                Err(_) => errors += 1,
            }
        }
        if take {
            current = candidate;
            accepted += 1;
        }
        states.push(ChainState {
            theta: current.clone(),
            g: current_eval.g,
            invalid: current_eval.invalid,
            repeated: !take,
        });
    }
    ChainOutput { states, accepted, errors }
}

/// Scaling update steering the batch acceptance toward `target`, `j` counting batches from 1.
pub fn adaptive_proposal_update(acceptance: f64, scaling: f64, target: f64, j: usize) -> f64 {
    let j = j.max(1) as f64;
    (scaling * ((acceptance - target) / j.sqrt()).exp()).clamp(1e-3, 1.0)
}

/// Per-coordinate proposal spread: scaled sample deviation of the seeds, capped at 1.
fn proposal_sigma(seeds: &[&Sample], scaling: f64) -> Vec<f64> {
    let d = seeds[0].theta.len();
    let n = seeds.len() as f64;
    (0..d)
        .map(|k| {
            let sd = if seeds.len() > 1 {
                let mean = seeds.iter().map(|s| s.theta[k]).sum::<f64>() / n;
                (seeds.iter().map(|s| (s.theta[k] - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                1.0
            };
            (scaling * sd).min(1.0)
        })
        .collect()
}

/// Complete state between levels; a run resumed from it continues identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetSimState {
    pub levels: Vec<LevelSummary>,
    pub thresholds: Vec<f64>,
    pub scaling: f64,
    pub invalid_count: usize,
    /// Samples of the latest level in generation order.
    pub current: Vec<Sample>,
    /// Whether each current sample is new rather than a chain repeat.
    pub distinct: Vec<bool>,
    pub failures: Vec<Sample>,
    pub retained: Vec<Sample>,
    pub finished: bool,
    pub converged: bool,
}

impl SubsetSimState {
    fn record(&mut self, g_star: f64, retain_all: bool) {
        for (s, &new) in self.current.iter().zip(&self.distinct) {
            if new && s.g >= g_star {
                self.failures.push(s.clone());
            }
            if new && retain_all {
                self.retained.push(s.clone());
            }
        }
    }
}

fn check_problem(d: usize, cfg: &SubsetSimConfig) -> Result<()> {
    cfg.validate()?;
    if d == 0 {
        return Err(Error::config("dimension must be >= 1"));
    }
    Ok(())
}

/// Level 0: direct Monte Carlo.
pub fn subset_simulation_start<F>(simulate: &F, d: usize, g_star: f64, cfg: &SubsetSimConfig, retain_all: bool) -> Result<SubsetSimState>
where
    F: Fn(&[f64]) -> Result<Evaluation> + Sync,
{
    check_problem(d, cfg)?;
    let current = direct_mc_level(simulate, d, cfg.n_samples, cfg.seed, g_star + cfg.error_penalty);
    let invalid = current.iter().filter(|s| s.invalid).count();
    let mut state = SubsetSimState {
        levels: vec![LevelSummary {
            threshold: None,
            g: current.iter().map(|s| s.g).collect(),
            invalid,
            acceptance: None,
            scaling: cfg.initial_scaling,
            chain_errors: 0,
        }],
        thresholds: Vec::new(),
        scaling: cfg.initial_scaling,
        invalid_count: invalid,
        distinct: vec![true; current.len()],
        current,
        failures: Vec::new(),
        retained: Vec::new(),
        finished: false,
        converged: false,
    };
    state.record(g_star, retain_all);
    Ok(state)
}

/// Either ends the run or adds one conditional level.
pub fn subset_simulation_step<F>(
    state: &mut SubsetSimState,
    simulate: &F,
    d: usize,
    g_star: f64,
    cfg: &SubsetSimConfig,
    retain_all: bool,
) -> Result<()>
where
    F: Fn(&[f64]) -> Result<Evaluation> + Sync,
{
    check_problem(d, cfg)?;
    if state.finished {
        return Ok(());
    }
    let n_s = cfg.n_samples;
    let n_c = cfg.n_seeds();
    let steps = cfg.chain_length();
    let batch = if cfg.adaptation_batch == 0 {
        (n_c / 10).max(1)
    } else {
        cfg.adaptation_batch
    };
    let level = state.levels.len() - 1;
    let n_f = state.current.iter().filter(|s| s.g >= g_star).count();
    if n_f > n_c {
        state.converged = true;
        state.finished = true;
        return Ok(());
    }
    if state.levels.len() >= cfg.max_levels {
        state.finished = true;
        return Ok(());
    }
    let g: Vec<f64> = state.current.iter().map(|s| s.g).collect();
    let order = descending_order(&g);
    let sorted: Vec<f64> = order.iter().map(|&i| g[i]).collect();
    let mut t = intermediate_threshold(&sorted, n_s, cfg.p0, level + 1)?;
    if let Some(&prev) = state.thresholds.last() {
        if !(t > prev) {
            return Err(Error::DegenerateLevel {
                level: level + 1,
                reason: format!("threshold {t} does not exceed previous {prev}"),
            });
        }
    }
    let last = t >= g_star;
    if last {
        t = g_star;
    }
    state.thresholds.push(t);

    let seeds: Vec<&Sample> = order[..n_c].iter().map(|&i| &state.current[i]).collect();
    let mut next: Vec<Sample> = Vec::with_capacity(n_s);
    let mut next_distinct: Vec<bool> = Vec::with_capacity(n_s);
    let (mut acc_total, mut step_total, mut chain_errors) = (0usize, 0usize, 0usize);
    let mut scaling = state.scaling;
    let mut j = 0;
    for group in (0..n_c).collect::<Vec<_>>().chunks(batch) {
        let sigma = proposal_sigma(&seeds, scaling);
        let outputs: Vec<ChainOutput> = group
            .par_iter()
            .map(|&c| {
                let seed = seeds[c];
                let mut rng = stream_rng(cfg.seed, level + 1, c);
                metropolis_chain(
                    &seed.theta,
                    Evaluation {
                        g: seed.g,
                        invalid: seed.invalid,
                    },
                    steps,
                    &sigma,
                    t,
                    simulate,
                    &mut rng,
                )
            })
            .collect();
        let mut group_acc = 0;
        for (&c, out) in group.iter().zip(outputs) {
            let seed = seeds[c];
            next.push(Sample {
                level: level + 1,
                ..seed.clone()
            });
            next_distinct.push(false);
            group_acc += out.accepted;
            chain_errors += out.errors;
            for st in out.states {
                next_distinct.push(!st.repeated);
                next.push(Sample {
                    theta: st.theta,
                    g: st.g,
                    invalid: st.invalid,
                    level: level + 1,
                });
            }
        }
        let group_steps = group.len() * steps;
        acc_total += group_acc;
        step_total += group_steps;
        j += 1;
        if group_steps > 0 {
            scaling = adaptive_proposal_update(group_acc as f64 / group_steps as f64, scaling, cfg.target_acceptance, j);
        }
    }
    let level_invalid = next.iter().zip(&next_distinct).filter(|(s, &new)| new && s.invalid).count();
    state.invalid_count += level_invalid;
    state.scaling = scaling;
    state.levels.push(LevelSummary {
        threshold: Some(t),
        g: next.iter().map(|s| s.g).collect(),
        invalid: next.iter().filter(|s| s.invalid).count(),
        acceptance: (step_total > 0).then(|| acc_total as f64 / step_total as f64),
        scaling,
        chain_errors,
    });
    state.current = next;
    state.distinct = next_distinct;
    state.record(g_star, retain_all);
    if last {
        state.converged = true;
        state.finished = true;
    }
    Ok(())
}

/// Estimate from a finished (or abandoned) run.
pub fn subset_simulation_result(state: SubsetSimState, g_star: f64, cfg: &SubsetSimConfig) -> SubsetSimResult {
    let m_s = state.levels.len();
    let n_f = state.current.iter().filter(|s| s.g >= g_star).count();
    let n_f_valid = state.current.iter().filter(|s| s.g >= g_star && !s.invalid).count();
    let scale = cfg.p0.powi(m_s as i32 - 1) / cfg.n_samples as f64;
    SubsetSimResult {
        levels: state.levels,
        thresholds: state.thresholds,
        g_star,
        level_count: m_s,
        n_failures: n_f,
        p_f: scale * n_f as f64,
        p_f_valid_only: scale * n_f_valid as f64,
        converged: state.converged,
        failures: state.failures,
        retained: state.retained,
        invalid_count: state.invalid_count,
    }
}

/// Subset simulation of `P(g(theta) >= g_star)` for standard-normal `theta` of dimension `d`.
pub fn run_subset_simulation<F>(simulate: &F, d: usize, g_star: f64, cfg: &SubsetSimConfig, retain_all: bool) -> Result<SubsetSimResult>
where
    F: Fn(&[f64]) -> Result<Evaluation> + Sync,
{
    run_subset_simulation_with(simulate, d, g_star, cfg, retain_all, None, |_| Ok(()))
}

/// As [`run_subset_simulation`], optionally resuming from a saved state and calling
/// `on_level` after every completed level.
pub fn run_subset_simulation_with<F, C>(
    simulate: &F,
    d: usize,
    g_star: f64,
    cfg: &SubsetSimConfig,
    retain_all: bool,
    resume: Option<SubsetSimState>,
    mut on_level: C,
) -> Result<SubsetSimResult>
where
    F: Fn(&[f64]) -> Result<Evaluation> + Sync,
    C: FnMut(&SubsetSimState) -> Result<()>,
{
    let mut state = match resume {
        Some(s) => s,
        None => {
            let s = subset_simulation_start(simulate, d, g_star, cfg, retain_all)?;
            on_level(&s)?;
            s
        }
    };
    while !state.finished {
        let before = state.levels.len();
        subset_simulation_step(&mut state, simulate, d, g_star, cfg, retain_all)?;
        if state.levels.len() > before {
            on_level(&state)?;
        }
    }
    Ok(subset_simulation_result(state, g_star, cfg))
}

/// Estimator `p0^(m_s - 1) * n_f / n_s`.
pub fn failure_probability(p0: f64, level_count: usize, n_failures: usize, n_samples: usize) -> f64 {
    p0.powi(level_count as i32 - 1) * n_failures as f64 / n_samples as f64
}
