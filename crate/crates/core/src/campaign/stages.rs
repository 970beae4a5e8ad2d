//! Campaign stages: simulate, subsim, features, train, evaluate, loss, report and the pipeline.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::closedloop::{
    LimitFunction, NoPredictor, OnlinePredictor, Outcome, RunLog, SimulationConfig, average_cycle_power, evaluate_limit,
    run_pumping_cycle,
};
use crate::error::{Error, Result};
use crate::losseval::{LossModelParams, downtime_grid, fp_prob_threshold, loss_rate, rank_predictors, ranking_csv};
use crate::predictor::synthetic::synthetic_run_log;
use crate::predictor::{
    ConfusionCounts, FeatureDataset, FeatureSchema, LabeledFeatureVector, Provenance, SvmModel, SvmPredictor,
    ThresholdPredictor, extract_features, mcc, segment_and_label, svm_predict, threshold_predict, train_predictor,
};
use crate::subsim::{
    Evaluation, SubsetSimState, level0_theta, subset_simulation_result, subset_simulation_start, subset_simulation_step,
};
use crate::windfield::{NoiseSeedVector, TURBULENCE_CHANNELS};

use super::config::derive_seed;
use super::store::{Campaign, CsvTable, f64_bytes, f64_from_bytes, hash_parts, sha256_hex};

const SIMULATE_VERSION: u32 = 1;
const SUBSIM_VERSION: u32 = 1;
const FEATURES_VERSION: u32 = 1;
const TRAIN_VERSION: u32 = 1;
const EVALUATE_VERSION: u32 = 1;
const LOSS_VERSION: u32 = 1;
const REPORT_VERSION: u32 = 1;

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("value serializes")
}

fn pretty<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("value serializes") + "\n"
}

fn parse_json<T: for<'de> Deserialize<'de>>(c: &Campaign, rel: &str) -> Result<T> {
    let text = c.read_string(rel)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: c.path(rel),
        message: e.to_string(),
    })
}

/// Run ids become file names: letters, digits, `-` and `_` only.
pub fn validate_run_id(id: &str) -> Result<()> {
    if id.is_empty() || !id.chars().all(|ch| ch.is_ascii_alphanumeric() || ch == '-' || ch == '_') {
        return Err(Error::config(format!(
            "run id '{id}' must be non-empty and use only letters, digits, '-' and '_'"
        )));
    }
    Ok(())
}

fn limit_function(cfg: &SimulationConfig) -> LimitFunction {
    LimitFunction {
        g_star: cfg.g_star,
        invalid_penalty: cfg.invalid_penalty,
    }
}

/// Closed-loop run driven by a flat noise vector.
pub fn simulate_theta(theta: &[f64], cfg: &SimulationConfig, predictor: &dyn OnlinePredictor) -> Result<RunLog> {
    let noise = NoiseSeedVector::from_samples(theta.to_vec(), TURBULENCE_CHANNELS, cfg.sample_rate)?;
    run_pumping_cycle(&noise, cfg, predictor)
}

fn standard_normal(seed: u64, d: usize) -> Vec<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..d).map(|_| rng.sample(rand_distr::StandardNormal)).collect()
}

fn max_column(log: &RunLog, f: impl Fn(&crate::closedloop::LogRow) -> f64) -> f64 {
    log.rows.iter().map(f).fold(f64::NEG_INFINITY, f64::max)
}

fn triggered(log: &RunLog) -> bool {
    log.rows.iter().any(|r| r.y_hat < 0.0)
}

// ---------------------------------------------------------------------------------------------
// simulate

#[derive(Debug, Clone, Default)]
pub struct SimulateOptions {
    pub runs: Option<usize>,
    pub seed: Option<u64>,
    /// Zero turbulence.
    pub calm: bool,
    /// Replay a single stored noise vector instead of sampling.
    pub theta: Option<std::path::PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OutcomeCounts {
    pub completed: usize,
    pub rupture: usize,
    pub incomplete: usize,
    pub invalid: usize,
}

impl OutcomeCounts {
    fn add(&mut self, o: Outcome) {
        match o {
            Outcome::Completed => self.completed += 1,
            Outcome::Rupture => self.rupture += 1,
            Outcome::Incomplete => self.incomplete += 1,
            Outcome::Invalid => self.invalid += 1,
        }
    }
}

pub fn cmd_simulate(c: &Campaign, opts: &SimulateOptions) -> Result<OutcomeCounts> {
    let cfg = &c.config.simulation;
    let d = cfg.noise_dimension();
    let base = opts.seed.unwrap_or(c.config.seed);
    let theta_file = match &opts.theta {
        Some(p) => {
            let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
            let v = f64_from_bytes(&bytes, p)?;
            if v.len() != d {
                return Err(Error::config(format!(
                    "{}: noise vector has {} entries, configuration needs {d}",
                    p.display(),
                    v.len()
                )));
            }
            Some(v)
        }
        None => None,
    };
    let runs = if theta_file.is_some() { 1 } else { opts.runs.unwrap_or(c.config.simulate.runs) };
    let input = hash_parts(&[
        "simulate",
        &json(cfg),
        &base.to_string(),
        &runs.to_string(),
        &opts.calm.to_string(),
        &theta_file.as_ref().map(|v| sha256_hex(&f64_bytes(v))).unwrap_or_default(),
    ]);
    let mut counts = OutcomeCounts::default();
    let lf = limit_function(cfg);
    let header = c.header(1);
    c.run_stage("simulate", SIMULATE_VERSION, &input, |out| {
        let results = (0..runs)
            .into_par_iter()
            .map(|k| {
                let seed = derive_seed(base, &format!("run:{k}"));
                let theta = match (&theta_file, opts.calm) {
                    (Some(v), _) => v.clone(),
                    (None, true) => vec![0.0; d],
                    (None, false) => standard_normal(seed, d),
                };
                let log = simulate_theta(&theta, cfg, &NoPredictor)?;
                let g = evaluate_limit(&log, &lf)?;
                Ok((k, seed, log, g))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut summary =
            format!("# {header}\nrun_id,seed,outcome,g,invalid,max_f_t,upset_time,duration_s,power_kw\n");
        let mut gs = Vec::new();
        for (k, seed, log, g) in &results {
            let id = format!("run_{k:04}");
            let meta = format!("{header} run_id={id} seed={seed}");
            out.put(format!("runs/{id}.csv"), log.to_csv(&meta));
            out.put(format!("runs/{id}.events.csv"), log.events_csv(&meta));
            counts.add(log.outcome);
            let power = average_cycle_power(log).map(|p| p.to_string()).unwrap_or_else(|_| "nan".into());
            let upset = log.upset_time.map(|t| t.to_string()).unwrap_or_else(|| "none".into());
            let _ = writeln!(
                summary,
                "{id},{seed},{},{},{},{},{upset},{},{power}",
                log.outcome.as_str(),
                g.g,
                g.invalid,
                max_column(log, |r| r.f_t),
                log.duration()
            );
            gs.push(g.g);
        }
        out.put("runs/summary.csv", summary);
        gs.sort_by(f64::total_cmp);
        let mut cdf = format!("# {header}\ng,cdf\n");
        for (i, g) in gs.iter().enumerate() {
            let _ = writeln!(cdf, "{g},{}", (i + 1) as f64 / gs.len() as f64);
        }
        out.put("runs/max_g_cdf.csv", cdf);
        out.put("runs/outcomes.json", pretty(&counts));
        Ok(())
    })?;
    if counts == OutcomeCounts::default() && runs > 0 {
        counts = parse_json(c, "runs/outcomes.json")?;
    }
    Ok(counts)
}

// ---------------------------------------------------------------------------------------------
// subsim

#[derive(Debug, Clone, Default)]
pub struct SubsimOptions {
    /// Continue from the checkpoint of an interrupted run.
    pub resume: bool,
    /// Stop once this level has been checkpointed.
    pub stop_after_level: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsimSummary {
    pub run_id: String,
    pub config_hash: String,
    pub seed: u64,
    /// Seed of the subset-simulation streams.
    pub stream_seed: u64,
    pub mode: String,
    pub dimension: usize,
    pub g_star: f64,
    pub p_f: f64,
    pub p_f_valid_only: f64,
    pub level_count: usize,
    pub n_failures: usize,
    pub distinct_failures: usize,
    pub converged: bool,
    pub invalid_count: usize,
    pub thresholds: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    input_hash: String,
    state: SubsetSimState,
}

fn subsim_stage(id: &str) -> String {
    format!("subsim-{id}")
}

fn subsim_input(c: &Campaign, id: &str) -> String {
    let cfg = &c.config;
    hash_parts(&[
        "subsim",
        id,
        &cfg.seed.to_string(),
        &json(&cfg.simulation),
        &json(&cfg.subsim),
        &json(&cfg.benchmark),
    ])
}

fn save_checkpoint(c: &Campaign, id: &str, input: &str, state: &SubsetSimState) -> Result<()> {
    let mut stripped = state.clone();
    let mut blob = Vec::new();
    for s in stripped
        .current
        .iter_mut()
        .chain(stripped.failures.iter_mut())
        .chain(stripped.retained.iter_mut())
    {
        blob.extend(std::mem::take(&mut s.theta));
    }
    let ck = Checkpoint {
        input_hash: input.to_string(),
        state: stripped,
    };
    c.write(&format!("subsim/{id}/checkpoint.bin"), &f64_bytes(&blob))?;
    c.write(&format!("subsim/{id}/checkpoint.json"), json(&ck).as_bytes())
}

fn load_checkpoint(c: &Campaign, id: &str, input: &str, d: usize) -> Result<SubsetSimState> {
    let ck: Checkpoint = parse_json(c, &format!("subsim/{id}/checkpoint.json"))?;
    if ck.input_hash != input {
        return Err(Error::config(format!(
            "checkpoint of subset simulation '{id}' was written with a different configuration"
        )));
    }
    let rel = format!("subsim/{id}/checkpoint.bin");
    let blob = f64_from_bytes(&c.read(&rel)?, &c.path(&rel))?;
    let mut state = ck.state;
    let mut chunks = blob.chunks_exact(d);
    for s in state
        .current
        .iter_mut()
        .chain(state.failures.iter_mut())
        .chain(state.retained.iter_mut())
    {
        s.theta = chunks
            .next()
            .ok_or_else(|| Error::Schema(format!("{rel}: truncated checkpoint")))?
            .to_vec();
    }
    Ok(state)
}

/// Returns `None` when stopped before the run finished.
pub fn cmd_subsim(c: &Campaign, id: &str, opts: &SubsimOptions) -> Result<Option<SubsimSummary>> {
    validate_run_id(id)?;
    let cfg = &c.config;
    let stage = subsim_stage(id);
    let input = subsim_input(c, id);
    let summary_rel = format!("subsim/{id}/summary.json");
    if c.is_cached(&stage, SUBSIM_VERSION, &input)? {
        log::info!("{stage}: cached");
        return parse_json(c, &summary_rel).map(Some);
    }
    let stream_seed = derive_seed(cfg.seed, &format!("subsim:{id}"));
    let ss = crate::subsim::SubsetSimConfig {
        seed: stream_seed,
        ..cfg.subsim
    };
    let (d, g_star, mode) = if cfg.benchmark.enabled {
        (cfg.benchmark.dimension, cfg.benchmark.g_star, "benchmark")
    } else {
        (cfg.simulation.noise_dimension(), cfg.simulation.g_star, "closed_loop")
    };
    let sim_cfg = &cfg.simulation;
    let lf = limit_function(sim_cfg);
    let benchmark = cfg.benchmark.enabled;
    let simulate = move |theta: &[f64]| -> Result<Evaluation> {
        if benchmark {
            return Ok(Evaluation::valid(theta.iter().sum::<f64>() / (theta.len() as f64).sqrt()));
        }
        let log = simulate_theta(theta, sim_cfg, &NoPredictor)?;
        let v = evaluate_limit(&log, &lf)?;
        Ok(Evaluation {
            g: v.g,
            invalid: v.invalid,
        })
    };

    let mut state = if opts.resume && c.exists(&format!("subsim/{id}/checkpoint.json")) {
        let s = load_checkpoint(c, id, &input, d)?;
        log::info!("{stage}: resuming after level {}", s.levels.len() - 1);
        s
    } else {
        let s = subset_simulation_start(&simulate, d, g_star, &ss, false)?;
        save_checkpoint(c, id, &input, &s)?;
        s
    };
    while !state.finished {
        let level = state.levels.len() - 1;
        log::info!(
            "{stage}: level {level} done, {} samples at or above g*",
            state.current.iter().filter(|s| s.g >= g_star).count()
        );
        if opts.stop_after_level.is_some_and(|stop| level >= stop) {
            log::info!("{stage}: stopped after level {level}; rerun with --resume to continue");
            return Ok(None);
        }
        subset_simulation_step(&mut state, &simulate, d, g_star, &ss, false)?;
        save_checkpoint(c, id, &input, &state)?;
    }
    let result = subset_simulation_result(state, g_star, &ss);
    let summary = SubsimSummary {
        run_id: id.to_string(),
        config_hash: c.config_hash.clone(),
        seed: cfg.seed,
        stream_seed,
        mode: mode.to_string(),
        dimension: d,
        g_star,
        p_f: result.p_f,
        p_f_valid_only: result.p_f_valid_only,
        level_count: result.level_count,
        n_failures: result.n_failures,
        distinct_failures: result.failures.len(),
        converged: result.converged,
        invalid_count: result.invalid_count,
        thresholds: result.thresholds.clone(),
    };
    let header = c.header(1);
    c.run_stage(&stage, SUBSIM_VERSION, &input, |out| {
        out.put(summary_rel.clone(), pretty(&summary));
        let mut levels = format!(
            "# {header} run_id={id}\nlevel,threshold,samples,at_or_above_g_star,invalid,acceptance,scaling,chain_errors\n"
        );
        let mut samples = format!("# {header} run_id={id}\nlevel,index,g\n");
        for (k, l) in result.levels.iter().enumerate() {
            let _ = writeln!(
                levels,
                "{k},{},{},{},{},{},{},{}",
                l.threshold.map(|t| t.to_string()).unwrap_or_else(|| "none".into()),
                l.g.len(),
                l.g.iter().filter(|&&g| g >= g_star).count(),
                l.invalid,
                l.acceptance.map(|a| a.to_string()).unwrap_or_else(|| "none".into()),
                l.scaling,
                l.chain_errors
            );
            for (i, g) in l.g.iter().enumerate() {
                let _ = writeln!(samples, "{k},{i},{g}");
            }
        }
        out.put(format!("subsim/{id}/levels.csv"), levels);
        out.put(format!("subsim/{id}/samples.csv"), samples);
        let mut failures = format!("# {header} run_id={id}\nfailure_id,level,g,invalid,theta_file\n");
        for (k, s) in result.failures.iter().enumerate() {
            let file = format!("failures/F{k:04}.bin");
            let _ = writeln!(failures, "F{k:04},{},{},{},{file}", s.level, s.g, s.invalid);
            out.put(format!("subsim/{id}/{file}"), f64_bytes(&s.theta));
        }
        out.put(format!("subsim/{id}/failures.csv"), failures);
        Ok(())
    })?;
    c.remove(&format!("subsim/{id}/checkpoint.json"))?;
    c.remove(&format!("subsim/{id}/checkpoint.bin"))?;
    Ok(Some(summary))
}

struct FailureEntry {
    id: String,
    theta: Vec<f64>,
}

fn load_failures(c: &Campaign, id: &str, limit: usize) -> Result<Vec<FailureEntry>> {
    let rel = format!("subsim/{id}/failures.csv");
    let table = CsvTable::parse(&c.read_string(&rel)?, &c.path(&rel))?;
    let take = if limit == 0 { table.rows.len() } else { limit.min(table.rows.len()) };
    table.rows[..take]
        .iter()
        .map(|r| {
            let file = format!("subsim/{id}/{}", table.get(r, "theta_file")?);
            Ok(FailureEntry {
                id: table.get(r, "failure_id")?.to_string(),
                theta: f64_from_bytes(&c.read(&file)?, &c.path(&file))?,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------------------------
// features

fn features_stage(id: &str) -> String {
    format!("features-{id}")
}

pub fn feature_schema(c: &Campaign) -> FeatureSchema {
    let cfg = &c.config;
    FeatureSchema {
        lags: cfg.features.lags.clone(),
        cutoff_hz: cfg.features.cutoff_hz,
        ..FeatureSchema::new(cfg.segmentation.signals.clone(), cfg.simulation.sample_rate)
    }
}

enum Job {
    Replay { run_id: String, source: &'static str, theta: Vec<f64> },
    Synthetic { run_id: String, seed: u64, upset_time: Option<f64> },
}

struct JobResult {
    run_id: String,
    source: &'static str,
    outcome: Outcome,
    g: f64,
    upset_time: Option<f64>,
    rows: Vec<LabeledFeatureVector>,
}

pub fn cmd_features(c: &Campaign, id: &str) -> Result<usize> {
    validate_run_id(id)?;
    let cfg = &c.config;
    let synthetic = cfg.synthetic.enabled;
    let upstream = if synthetic { String::new() } else { c.stage_fingerprint(&subsim_stage(id))? };
    let input = hash_parts(&[
        "features",
        id,
        &cfg.seed.to_string(),
        &json(&cfg.segmentation),
        &json(&cfg.features),
        &json(&cfg.synthetic),
        &json(&cfg.simulation),
        &crate::predictor::features::FEATURE_SCHEMA_VERSION.to_string(),
        &upstream,
    ]);
    let schema = feature_schema(c);
    let header = c.header(schema.version);
    let stage = features_stage(id);
    let mut count = 0;
    let ran = c.run_stage(&stage, FEATURES_VERSION, &input, |out| {
        let jobs = if synthetic {
            synthetic_jobs(c, id)
        } else {
            replay_jobs(c, id)?
        };
        let sim_cfg = &cfg.simulation;
        let lf = limit_function(sim_cfg);
        let results = jobs
            .into_par_iter()
            .map(|job| {
                let (run_id, source, log) = match job {
                    Job::Replay { run_id, source, theta } => {
                        let log = simulate_theta(&theta, sim_cfg, &NoPredictor)?;
                        (run_id, source, log)
                    }
                    Job::Synthetic { run_id, seed, upset_time } => {
                        let log = synthetic_run_log(
                            seed,
                            cfg.synthetic.duration,
                            upset_time,
                            sim_cfg.sample_rate,
                            cfg.segmentation.reaction_shift,
                        );
                        let source = if upset_time.is_some() { "synthetic_upset" } else { "synthetic_nominal" };
                        (run_id, source, log)
                    }
                };
                let g = evaluate_limit(&log, &lf)?.g;
                if source == "failure" && log.outcome != Outcome::Rupture {
                    log::warn!("{run_id}: failure sample replayed as {}", log.outcome.as_str());
                }
                let rows = if log.outcome == Outcome::Invalid {
                    Vec::new()
                } else {
                    let segs = segment_and_label(&log, &run_id, &cfg.segmentation)?;
                    segs.iter()
                        .map(|s| {
                            Ok(LabeledFeatureVector {
                                values: extract_features(s, &schema)?,
                                label: s.label,
                                provenance: Provenance::Real,
                                run_id: s.run_id.clone(),
                                end_time: s.end_time,
                            })
                        })
                        .collect::<Result<Vec<_>>>()?
                };
                Ok(JobResult {
                    run_id,
                    source,
                    outcome: log.outcome,
                    g,
                    upset_time: log.upset_time,
                    rows,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut runs = format!("# {header} run_id={id}\nrun_id,source,outcome,g,upset_time,segments\n");
        let mut dataset = FeatureDataset {
            schema: schema.clone(),
            rows: Vec::new(),
        };
        for r in results {
            let upset = r.upset_time.map(|t| t.to_string()).unwrap_or_else(|| "none".into());
            let _ = writeln!(
                runs,
                "{},{},{},{},{upset},{}",
                r.run_id,
                r.source,
                r.outcome.as_str(),
                r.g,
                r.rows.len()
            );
            dataset.rows.extend(r.rows);
        }
        count = dataset.rows.len();
        out.put(format!("features/{id}.csv"), dataset.to_csv(&format!("{header} run_id={id}")));
        out.put(format!("features/{id}.runs.csv"), runs);
        Ok(())
    })?;
    if !ran {
        let rel = format!("features/{id}.csv");
        count = FeatureDataset::from_csv(&c.read_string(&rel)?, &c.path(&rel))?.rows.len();
    }
    Ok(count)
}

fn synthetic_jobs(c: &Campaign, id: &str) -> Vec<Job> {
    let s = &c.config.synthetic;
    let window = c.config.segmentation.window;
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(c.config.seed, &format!("synthetic:{id}")));
    let mut jobs = Vec::new();
    for k in 0..s.upset_runs {
        let upset = rng.random_range(window + 1.0..s.duration);
        jobs.push(Job::Synthetic {
            run_id: format!("{id}-U{k:04}"),
            seed: rng.random(),
            upset_time: Some(upset),
        });
    }
    for k in 0..s.nominal_runs {
        jobs.push(Job::Synthetic {
            run_id: format!("{id}-N{k:04}"),
            seed: rng.random(),
            upset_time: None,
        });
    }
    jobs
}

fn replay_jobs(c: &Campaign, id: &str) -> Result<Vec<Job>> {
    let summary: SubsimSummary = parse_json(c, &format!("subsim/{id}/summary.json"))?;
    if summary.mode != "closed_loop" {
        return Err(Error::config(format!(
            "subset simulation '{id}' ran in {} mode and has no closed-loop samples",
            summary.mode
        )));
    }
    let mut jobs: Vec<Job> = load_failures(c, id, c.config.features.max_failure_runs)?
        .into_iter()
        .map(|f| Job::Replay {
            run_id: format!("{id}-{}", f.id),
            source: "failure",
            theta: f.theta,
        })
        .collect();
    let rel = format!("subsim/{id}/samples.csv");
    let table = CsvTable::parse(&c.read_string(&rel)?, &c.path(&rel))?;
    let mut nominal = 0;
    for r in &table.rows {
        if nominal >= c.config.features.nominal_runs {
            break;
        }
        if table.get(r, "level")? != "0" || table.get_f64(r, "g")? >= summary.g_star {
            continue;
        }
        let index: usize = table
            .get(r, "index")?
            .parse()
            .map_err(|_| Error::Schema(format!("{rel}: bad index")))?;
        jobs.push(Job::Replay {
            run_id: format!("{id}-N{index:04}"),
            source: "nominal",
            theta: level0_theta(summary.stream_seed, index, summary.dimension),
        });
        nominal += 1;
    }
    Ok(jobs)
}

// ---------------------------------------------------------------------------------------------
// train

pub fn cmd_train(c: &Campaign, id: &str) -> Result<SvmModel> {
    validate_run_id(id)?;
    let cfg = &c.config;
    let input = hash_parts(&[
        "train",
        id,
        &json(&cfg.training),
        &json(&cfg.segmentation),
        &c.stage_fingerprint(&features_stage(id))?,
    ]);
    let header = c.header(crate::predictor::model::MODEL_FORMAT_VERSION);
    c.run_stage("train", TRAIN_VERSION, &input, |out| {
        let rel = format!("features/{id}.csv");
        let dataset = FeatureDataset::from_csv(&c.read_string(&rel)?, &c.path(&rel))?;
        log::info!(
            "training on {} segments ({} upset)",
            dataset.rows.len(),
            dataset.count(-1)
        );
        let model = train_predictor(&dataset, &cfg.segmentation, &cfg.training, &c.config_hash, id)?;
        let names = model.schema.names();
        let mut sel = format!("# {header} run_id={id}\nstep,feature_index,feature,cv_mcc\n");
        for (k, (&f, m)) in model.selection.selected.iter().zip(&model.selection.trace).enumerate() {
            let _ = writeln!(sel, "{},{f},{},{m}", k + 1, names[f]);
        }
        out.put("models/svm.json", model.to_json() + "\n");
        out.put("models/selection.csv", sel);
        Ok(())
    })?;
    load_model(c)
}

pub fn load_model(c: &Campaign) -> Result<SvmModel> {
    let rel = "models/svm.json";
    SvmModel::from_json(&c.read_string(rel)?).map_err(|e| match e {
        Error::Schema(m) => Error::Schema(format!("{}: {m}", c.path(rel).display())),
        other => other,
    })
}

// ---------------------------------------------------------------------------------------------
// evaluate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleStats {
    pub p_f: f64,
    pub p_pc_kw: f64,
    pub t_pc_min: f64,
    pub completed_runs: usize,
    pub monte_carlo_runs: usize,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorEvaluation {
    pub name: String,
    pub q_star: Option<f64>,
    pub n_replays: usize,
    pub n_tp: u64,
    pub n_fn: u64,
    pub fp_method: &'static str,
    pub n_mc: usize,
    pub fp_probability: f64,
}

impl PredictorEvaluation {
    pub fn fn_conditional(&self) -> f64 {
        if self.n_tp + self.n_fn == 0 {
            f64::NAN
        } else {
            self.n_fn as f64 / (self.n_tp + self.n_fn) as f64
        }
    }
}

fn threshold_name(offset: f64) -> String {
    format!("threshold_{}pct", (offset * 100.0 * 1000.0).round() / 1000.0)
}

pub fn cmd_evaluate(c: &Campaign, train_id: &str, eval_id: &str) -> Result<Vec<PredictorEvaluation>> {
    validate_run_id(train_id)?;
    validate_run_id(eval_id)?;
    if train_id == eval_id {
        return Err(Error::config(format!(
            "evaluation must use a different data set than training (both are '{train_id}')"
        )));
    }
    let cfg = &c.config;
    let synthetic = cfg.synthetic.enabled;
    let upstream_ss = if synthetic { String::new() } else { c.stage_fingerprint(&subsim_stage(eval_id))? };
    let input = hash_parts(&[
        "evaluate",
        train_id,
        eval_id,
        &cfg.seed.to_string(),
        &json(&cfg.evaluation),
        &json(&cfg.simulation),
        &json(&cfg.loss.p_f),
        &c.stage_fingerprint("train")?,
        &c.stage_fingerprint(&features_stage(eval_id))?,
        &upstream_ss,
    ]);
    let model = load_model(c)?;
    if model.training_run != train_id {
        return Err(Error::config(format!(
            "stored model was trained on '{}', not '{train_id}'",
            model.training_run
        )));
    }
    let header = c.header(1);
    let mut evals = Vec::new();
    c.run_stage("evaluate", EVALUATE_VERSION, &input, |out| {
        let rel = format!("features/{eval_id}.csv");
        let dataset = FeatureDataset::from_csv(&c.read_string(&rel)?, &c.path(&rel))?;
        if dataset.schema != model.schema {
            return Err(Error::Schema(format!(
                "features of '{eval_id}' do not match the model's feature schema"
            )));
        }
        let f_set = cfg.simulation.guidance.forces.traction;
        let thresholds: Vec<(String, f64)> = cfg
            .evaluation
            .threshold_offsets
            .iter()
            .map(|&o| (threshold_name(o), f_set * (1.0 + o)))
            .collect();

        // window-level classification of the held-out segments
        let mut seg = format!("# {header} train_run={train_id} eval_run={eval_id}\npredictor,tp,tn,fp,fn,mcc\n");
        let truth = dataset.labels();
        let mut svm_counts = ConfusionCounts::default();
        if cfg.evaluation.svm {
            let pred = dataset
                .rows
                .par_iter()
                .map(|r| svm_predict(&model, &r.values).map(|p| p.1))
                .collect::<Result<Vec<i8>>>()?;
            svm_counts = ConfusionCounts::from_labels(&truth, &pred);
            write_counts(&mut seg, "svm", &svm_counts);
        }
        let max_ft = dataset.schema.names().iter().position(|n| n == "f_t.max");
        if let Some(col) = max_ft {
            for (name, q) in &thresholds {
                let pred: Vec<i8> = dataset.rows.iter().map(|r| threshold_predict(r.values[col], *q)).collect();
                write_counts(&mut seg, name, &ConfusionCounts::from_labels(&truth, &pred));
            }
        }
        out.put("reports/segments.csv", seg);

        let stats;
        if synthetic {
            let fp = svm_counts.fp as f64 / (svm_counts.fp + svm_counts.tn).max(1) as f64;
            evals.push(PredictorEvaluation {
                name: "svm".into(),
                q_star: None,
                n_replays: (svm_counts.tp + svm_counts.fn_) as usize,
                n_tp: svm_counts.tp,
                n_fn: svm_counts.fn_,
                fp_method: "segments",
                n_mc: (svm_counts.fp + svm_counts.tn) as usize,
                fp_probability: fp,
            });
            stats = CycleStats {
                p_f: cfg.loss.p_f.unwrap_or(2e-7),
                p_pc_kw: 3.9,
                t_pc_min: 2.5,
                completed_runs: 0,
                monte_carlo_runs: 0,
                source: "reference".into(),
            };
        } else {
            let (e, s, mc_csv) = closed_loop_evaluation(c, eval_id, &model, &thresholds)?;
            evals = e;
            stats = s;
            out.put("reports/mc_runs.csv", format!("# {header} eval_run={eval_id}\n{mc_csv}"));
        }
        let mut table = format!(
            "# {header} train_run={train_id} eval_run={eval_id}\npredictor,q_star,n_replays,n_tp,n_fn,fn_conditional,fp_method,n_mc,fp_probability\n"
        );
        for e in &evals {
            let q = e.q_star.map(|q| q.to_string()).unwrap_or_else(|| "none".into());
            let _ = writeln!(
                table,
                "{},{q},{},{},{},{},{},{},{}",
                e.name,
                e.n_replays,
                e.n_tp,
                e.n_fn,
                e.fn_conditional(),
                e.fp_method,
                e.n_mc,
                e.fp_probability
            );
        }
        out.put("reports/evaluation.csv", table);
        out.put("reports/cycle_stats.json", pretty(&stats));
        Ok(())
    })?;
    if evals.is_empty() {
        evals = read_evaluation(c)?;
    }
    Ok(evals)
}

fn write_counts(s: &mut String, name: &str, k: &ConfusionCounts) {
    let _ = writeln!(s, "{name},{},{},{},{},{}", k.tp, k.tn, k.fp, k.fn_, mcc(k));
}

type ClosedLoopEvaluation = (Vec<PredictorEvaluation>, CycleStats, String);

fn closed_loop_evaluation(
    c: &Campaign,
    eval_id: &str,
    model: &SvmModel,
    thresholds: &[(String, f64)],
) -> Result<ClosedLoopEvaluation> {
    let cfg = &c.config;
    let sim = &cfg.simulation;
    let summary: SubsimSummary = parse_json(c, &format!("subsim/{eval_id}/summary.json"))?;
    if summary.mode != "closed_loop" {
        return Err(Error::config(format!("subset simulation '{eval_id}' has no closed-loop samples")));
    }
    let p_f = cfg.loss.p_f.unwrap_or(summary.p_f);
    let failures = load_failures(c, eval_id, cfg.evaluation.max_replays)?;
    let svm = SvmPredictor::new(model.clone())?;

    let mut predictors: Vec<(String, Option<f64>, Box<dyn OnlinePredictor>)> = thresholds
        .iter()
        .map(|(n, q)| (n.clone(), Some(*q), Box::new(ThresholdPredictor { q_star: *q }) as Box<dyn OnlinePredictor>))
        .collect();
    if cfg.evaluation.svm {
        predictors.push(("svm".into(), None, Box::new(SvmPredictor::new(model.clone())?)));
    }

    // replays of the evaluation failures with each predictor and avoidance in the loop
    let pairs: Vec<(usize, usize)> = (0..predictors.len())
        .flat_map(|p| (0..failures.len()).map(move |f| (p, f)))
        .collect();
    let outcomes = pairs
        .par_iter()
        .map(|&(p, f)| simulate_theta(&failures[f].theta, sim, predictors[p].2.as_ref()).map(|l| l.outcome))
        .collect::<Result<Vec<Outcome>>>()?;

    // nominal Monte Carlo runs without and with the SVM in the loop
    let d = sim.noise_dimension();
    let n_mc = cfg.evaluation.monte_carlo_runs;
    let lf = limit_function(sim);
    let mc = (0..n_mc)
        .into_par_iter()
        .map(|k| {
            let theta = standard_normal(derive_seed(cfg.seed, &format!("mc:{eval_id}:{k}")), d);
            let base = simulate_theta(&theta, sim, &NoPredictor)?;
            let with_svm = if cfg.evaluation.svm {
                Some(simulate_theta(&theta, sim, &svm)?)
            } else {
                None
            };
            let g = evaluate_limit(&base, &lf)?.g;
            Ok((base, with_svm, g))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut mc_csv = String::from("run,outcome,g,max_f_t,power_kw,duration_s,svm_triggered,svm_outcome\n");
    let mut maxima = Vec::new();
    let (mut power, mut duration, mut completed, mut svm_fp) = (0.0, 0.0, 0usize, 0usize);
    for (k, (base, with_svm, g)) in mc.iter().enumerate() {
        let max_ft = max_column(base, |r| r.f_t);
        maxima.push(max_ft);
        let p = average_cycle_power(base).ok();
        if let Some(p) = p {
            power += p;
            duration += base.duration();
            completed += 1;
        }
        let (trig, svm_outcome) = match with_svm {
            Some(l) => (triggered(l), l.outcome.as_str()),
            None => (false, "none"),
        };
        if trig && base.outcome != Outcome::Rupture {
            svm_fp += 1;
        }
        let _ = writeln!(
            mc_csv,
            "{k},{},{g},{max_ft},{},{},{trig},{svm_outcome}",
            base.outcome.as_str(),
            p.map(|p| p.to_string()).unwrap_or_else(|| "nan".into()),
            base.duration()
        );
    }
    let stats = CycleStats {
        p_f,
        p_pc_kw: if completed > 0 { power / completed as f64 } else { f64::NAN },
        t_pc_min: if completed > 0 { duration / completed as f64 / 60.0 } else { f64::NAN },
        completed_runs: completed,
        monte_carlo_runs: n_mc,
        source: "monte_carlo".into(),
    };

    let mut evals = Vec::new();
    for (p, (name, q, _)) in predictors.iter().enumerate() {
        let mut e = PredictorEvaluation {
            name: name.clone(),
            q_star: *q,
            n_replays: failures.len(),
            n_tp: 0,
            n_fn: 0,
            fp_method: if q.is_some() { "cdf" } else { "count" },
            n_mc,
            fp_probability: 0.0,
        };
        for f in 0..failures.len() {
            if outcomes[p * failures.len() + f] == Outcome::Rupture {
                e.n_fn += 1;
            } else {
                e.n_tp += 1;
            }
        }
        e.fp_probability = match q {
            Some(q) if !maxima.is_empty() => fp_prob_threshold(&maxima, *q, p_f)?,
            Some(_) => f64::NAN,
            None => svm_fp as f64 / n_mc.max(1) as f64,
        };
        evals.push(e);
    }
    Ok((evals, stats, mc_csv))
}

fn read_evaluation(c: &Campaign) -> Result<Vec<PredictorEvaluation>> {
    let rel = "reports/evaluation.csv";
    let t = CsvTable::parse(&c.read_string(rel)?, &c.path(rel))?;
    t.rows
        .iter()
        .map(|r| {
            let int = |name: &str| -> Result<u64> {
                t.get(r, name)?
                    .parse()
                    .map_err(|_| Error::Schema(format!("{rel}: bad '{name}'")))
            };
            Ok(PredictorEvaluation {
                name: t.get(r, "predictor")?.to_string(),
                q_star: t.get(r, "q_star")?.parse().ok(),
                n_replays: int("n_replays")? as usize,
                n_tp: int("n_tp")?,
                n_fn: int("n_fn")?,
                fp_method: match t.get(r, "fp_method")? {
                    "cdf" => "cdf",
                    "count" => "count",
                    _ => "segments",
                },
                n_mc: int("n_mc")? as usize,
                fp_probability: t.get_f64(r, "fp_probability")?,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------------------------
// loss

pub fn cmd_loss(c: &Campaign) -> Result<Vec<(String, LossModelParams)>> {
    let cfg = &c.config.loss;
    let input = hash_parts(&["loss", &json(cfg), &c.stage_fingerprint("evaluate")?]);
    let evals = read_evaluation(c)?;
    let stats: CycleStats = parse_json(c, "reports/cycle_stats.json")?;
    let base = LossModelParams {
        p_f: cfg.p_f.unwrap_or(stats.p_f),
        fn_conditional: 1.0,
        fp_probability: 0.0,
        p_em: cfg.p_em,
        p_pc: cfg.p_pc.unwrap_or(stats.p_pc_kw),
        t_pc: cfg.t_pc.unwrap_or(stats.t_pc_min),
        downtime: cfg.downtime_from,
        e_misc: cfg.e_misc,
    };
    let mut predictors = vec![("none".to_string(), base)];
    for e in &evals {
        predictors.push((
            e.name.clone(),
            LossModelParams {
                fn_conditional: e.fn_conditional(),
                fp_probability: e.fp_probability,
                ..base
            },
        ));
    }
    for (name, p) in &predictors {
        p.validate()
            .map_err(|err| Error::InsufficientData(format!("loss inputs of '{name}': {err}")))?;
    }
    let grid = downtime_grid(cfg.downtime_from, cfg.downtime_to, cfg.downtime_points);
    let header = c.header(1);
    c.run_stage("loss", LOSS_VERSION, &input, |out| {
        let mut curves = format!("# {header}\ndowntime_min");
        for (n, _) in &predictors {
            curves.push(',');
            curves.push_str(n);
        }
        curves.push('\n');
        for &dt in &grid {
            let _ = write!(curves, "{dt}");
            for (_, p) in &predictors {
                let _ = write!(curves, ",{:e}", loss_rate(&LossModelParams { downtime: dt, ..*p })?);
            }
            curves.push('\n');
        }
        out.put("reports/loss.csv", curves);
        let ranking = rank_predictors(&predictors, &grid)?;
        out.put("reports/ranking.csv", format!("# {header}\n{}", ranking_csv(&ranking)));
        out.put("reports/loss_params.json", pretty(&predictors));
        Ok(())
    })?;
    Ok(predictors)
}

// ---------------------------------------------------------------------------------------------
// report

/// Markdown summary regenerated from the stored artifacts.
pub fn cmd_report(c: &Campaign) -> Result<String> {
    let mut s = format!("# Campaign report\n\n- config hash: `{}`\n- seed: {}\n\n", c.config_hash, c.config.seed);
    let mut ids: Vec<String> = match std::fs::read_dir(c.path("subsim")) {
        Ok(rd) => rd
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join("summary.json").exists())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect(),
        Err(_) => Vec::new(),
    };
    ids.sort();
    let mut inputs = vec!["report".to_string()];
    if !ids.is_empty() {
        s.push_str("## Subset simulation\n\n| run | mode | levels | p_f | distinct failures | converged |\n|---|---|---|---|---|---|\n");
        for id in &ids {
            let m: SubsimSummary = parse_json(c, &format!("subsim/{id}/summary.json"))?;
            let _ = writeln!(
                s,
                "| {id} | {} | {} | {:.3e} | {} | {} |",
                m.mode, m.level_count, m.p_f, m.distinct_failures, m.converged
            );
            inputs.push(c.stage_fingerprint(&subsim_stage(id)).unwrap_or_default());
        }
        s.push('\n');
    }
    if c.exists("models/svm.json") {
        let m = load_model(c)?;
        let _ = writeln!(
            s,
            "## SVM predictor\n\nTrained on `{}`; {} support vectors, sigma2 = {}, C = {}.\n\n| step | feature | CV MCC |\n|---|---|---|",
            m.training_run,
            m.machine.alpha.len(),
            m.selection.sigma2,
            m.selection.c
        );
        for (k, (name, mcc)) in m.selected_names().iter().zip(&m.selection.trace).enumerate() {
            let _ = writeln!(s, "| {} | {name} | {mcc:.4} |", k + 1);
        }
        s.push('\n');
        inputs.push(c.stage_fingerprint("train").unwrap_or_default());
    }
    if c.exists("reports/evaluation.csv") {
        s.push_str("## Evaluation\n\n| predictor | q* (N) | replays | missed | P(miss given upset) | P(false trigger) |\n|---|---|---|---|---|---|\n");
        for e in read_evaluation(c)? {
            let q = e.q_star.map(|q| format!("{q:.0}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                s,
                "| {} | {q} | {} | {} | {:.4} | {:.4} |",
                e.name,
                e.n_replays,
                e.n_fn,
                e.fn_conditional(),
                e.fp_probability
            );
        }
        s.push('\n');
        inputs.push(c.stage_fingerprint("evaluate").unwrap_or_default());
    }
    if c.exists("reports/ranking.csv") {
        let rel = "reports/ranking.csv";
        let t = CsvTable::parse(&c.read_string(rel)?, &c.path(rel))?;
        if let Some(last) = t.rows.last() {
            let dt = t.get(last, "downtime_min")?.to_string();
            let _ = writeln!(s, "## Loss ranking at {dt} min downtime\n\n| rank | predictor | L/E_pc |\n|---|---|---|");
            for r in t.rows.iter().filter(|r| r[0] == dt) {
                let loss: f64 = r[3].parse().unwrap_or(f64::NAN);
                let _ = writeln!(s, "| {} | {} | {loss:.3e} |", r[1], r[2]);
            }
            s.push('\n');
        }
        inputs.push(c.stage_fingerprint("loss").unwrap_or_default());
    }
    let refs: Vec<&str> = inputs.iter().map(String::as_str).collect();
    let input = hash_parts(&refs);
    let text = s.clone();
    c.run_stage("report", REPORT_VERSION, &input, |out| {
        out.put("reports/report.md", text);
        Ok(())
    })?;
    Ok(s)
}

// ---------------------------------------------------------------------------------------------
// pipeline

/// Subset simulation for both data sets, features, training, evaluation, loss and report.
/// Every stage is skipped when its inputs are unchanged.
pub fn cmd_pipeline(c: &Campaign, train_id: &str, eval_id: &str) -> Result<()> {
    validate_run_id(train_id)?;
    validate_run_id(eval_id)?;
    if train_id == eval_id {
        return Err(Error::config(format!(
            "training and evaluation must use different data sets (both are '{train_id}')"
        )));
    }
    if !c.config.synthetic.enabled {
        for id in [train_id, eval_id] {
            if cmd_subsim(c, id, &SubsimOptions::default())?.is_none() {
                return Err(Error::Numerical(format!("subset simulation '{id}' did not finish")));
            }
        }
    }
    cmd_features(c, train_id)?;
    cmd_features(c, eval_id)?;
    cmd_train(c, train_id)?;
    cmd_evaluate(c, train_id, eval_id)?;
    cmd_loss(c)?;
    cmd_report(c)?;
    Ok(())
}

/// Copies the resolved configuration next to the artifacts.
pub fn write_config_copy(c: &Campaign) -> Result<()> {
    c.write("config.toml", c.config.to_toml().as_bytes())
}
