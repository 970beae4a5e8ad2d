use std::path::PathBuf;

use awe_upset::closedloop::{
    LOG_COLUMNS, LimitFunction, NoPredictor, Outcome, RunLog, ScriptedPredictor, SimulationConfig, average_cycle_power,
    evaluate_limit, run_pumping_cycle, run_with_wind,
};
use awe_upset::subsim::level0_theta;
use awe_upset::windfield::{NoiseSeedVector, TURBULENCE_CHANNELS, WindField};
use rayon::prelude::*;

const GOLDEN_TOLERANCE: f64 = 1e-9;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn calm_run(cfg: &SimulationConfig) -> RunLog {
    run_with_wind(&WindField::calm(cfg.shear), cfg, &NoPredictor).unwrap()
}

fn turbulent_theta(cfg: &SimulationConfig, seed: u64, index: usize) -> NoiseSeedVector {
    let d = cfg.noise_dimension();
    NoiseSeedVector::from_samples(level0_theta(seed, index, d), TURBULENCE_CHANNELS, cfg.sample_rate).unwrap()
}

fn limit(cfg: &SimulationConfig) -> LimitFunction {
    LimitFunction {
        g_star: cfg.g_star,
        invalid_penalty: cfg.invalid_penalty,
    }
}

/// Every tenth logged row plus the final one, as CSV.
fn golden_rows(log: &RunLog) -> String {
    let mut out = LOG_COLUMNS.join(",");
    out.push('\n');
    let last = log.rows.len() - 1;
    for (i, row) in log.rows.iter().enumerate() {
        if i % 10 == 0 || i == last {
            let cells: Vec<String> = row.values().iter().map(|v| format!("{v:e}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
    }
    out
}

fn golden_summary(log: &RunLog, cfg: &SimulationConfig) -> String {
    let g = evaluate_limit(log, &limit(cfg)).unwrap().g;
    let power = average_cycle_power(log).unwrap();
    format!(
        "outcome,{}\nduration_s,{:e}\nmax_f_t,{:e}\npower_kw,{:e}\nevents,{}\n",
        log.outcome.as_str(),
        log.duration(),
        g,
        power,
        log.events.iter().map(|e| format!("{}@{:e}:{}", e.kind, e.t, e.detail)).collect::<Vec<_>>().join(";")
    )
}

fn assert_close_csv(expected: &str, actual: &str, what: &str) {
    let exp: Vec<&str> = expected.lines().collect();
    let act: Vec<&str> = actual.lines().collect();
    assert_eq!(exp.len(), act.len(), "{what}: line count");
    for (ln, (e, a)) in exp.iter().zip(&act).enumerate() {
        let ec: Vec<&str> = e.split(',').collect();
        let ac: Vec<&str> = a.split(',').collect();
        assert_eq!(ec.len(), ac.len(), "{what}: field count on line {ln}");
        for (x, y) in ec.iter().zip(&ac) {
            match (x.parse::<f64>(), y.parse::<f64>()) {
                (Ok(x), Ok(y)) => assert!(
                    (x - y).abs() <= GOLDEN_TOLERANCE * x.abs().max(1.0),
                    "{what}: line {ln}: expected {x}, got {y}"
                ),
                _ => assert_eq!(x, y, "{what}: line {ln}"),
            }
        }
    }
}

fn check_golden(name: &str, actual: &str) {
    let path = fixture(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("{}: {e}; regenerate with UPDATE_GOLDEN=1", path.display()));
    assert_close_csv(&expected, actual, name);
}

#[test]
fn calm_cycle_matches_golden_files() {
    let cfg = SimulationConfig::default();
    let log = calm_run(&cfg);
    assert_eq!(log.outcome, Outcome::Completed);
    check_golden("calm_cycle_rows.csv", &golden_rows(&log));
    check_golden("calm_cycle_summary.csv", &golden_summary(&log, &cfg));
}

#[test]
fn calm_cycle_tracks_path_and_produces_power() {
    let cfg = SimulationConfig::default();
    let log = calm_run(&cfg);
    assert_eq!(log.outcome, Outcome::Completed);
    let worst = log.rows.iter().filter(|r| r.mode == 0.0).map(|r| r.e_p.abs()).fold(0.0, f64::max);
    assert!(worst < 5.0, "traction cross-track error {worst} m");
    assert!(average_cycle_power(&log).unwrap() > 0.0);
    assert!(log.rows.iter().all(|r| r.tether_length <= cfg.guidance.lengths.hard_max));
}

#[test]
fn modes_follow_the_pumping_sequence() {
    let cfg = SimulationConfig::default();
    let log = calm_run(&cfg);
    let changes: Vec<&str> = log.events.iter().filter(|e| e.kind == "mode_change").map(|e| e.detail.as_str()).collect();
    assert_eq!(changes, ["traction->retraction", "retraction->transition", "transition->traction"]);
    assert_eq!(log.events.last().unwrap().kind, "cycle_complete");
}

#[test]
fn runs_are_deterministic_and_schedule_independent() {
    let cfg = SimulationConfig::default();
    let thetas: Vec<NoiseSeedVector> = (0..3).map(|i| turbulent_theta(&cfg, 42, i)).collect();
    let sequential: Vec<RunLog> = thetas.iter().map(|t| run_pumping_cycle(t, &cfg, &NoPredictor).unwrap()).collect();
    let parallel: Vec<RunLog> = thetas.par_iter().map(|t| run_pumping_cycle(t, &cfg, &NoPredictor).unwrap()).collect();
    assert_eq!(sequential, parallel);
}

/// The zero-gust peak is the deterministic first-downstroke load; a gust can shave it slightly,
/// so single runs may sit just below it while the corpus as a whole lies above.
#[test]
fn regression_corpus_is_not_calmer_than_zero_gust() {
    let cfg = SimulationConfig::default();
    let calm = evaluate_limit(&calm_run(&cfg), &limit(&cfg)).unwrap().g;
    let mut sum = 0.0;
    let n = 12;
    for i in 0..n {
        let log = run_pumping_cycle(&turbulent_theta(&cfg, 7, i), &cfg, &NoPredictor).unwrap();
        let g = evaluate_limit(&log, &limit(&cfg)).unwrap().g;
        assert!(g >= 0.99 * calm, "run {i}: turbulent g {g} far below zero-gust g {calm}");
        sum += g;
        if log.outcome != Outcome::Rupture {
            assert!(log.rows.iter().all(|r| r.tether_length <= cfg.guidance.lengths.hard_max));
        }
    }
    assert!(sum / n as f64 >= calm);
}

#[test]
fn rupture_terminates_the_log_and_follows_any_trigger() {
    // a low critical force makes the calm cycle rupture on its first downstroke
    let cfg = SimulationConfig {
        g_star: 1700.0,
        ..SimulationConfig::default()
    };
    let wind = WindField::calm(cfg.shear);
    let log = run_with_wind(&wind, &cfg, &ScriptedPredictor { start: 100.0, end: 101.0 }).unwrap();
    assert_eq!(log.outcome, Outcome::Rupture);
    let tu = log.upset_time.unwrap();
    let last = log.rows.last().unwrap();
    assert_eq!(last.t, tu);
    assert!(last.f_t > cfg.g_star);
    assert!(tu - log.rows[log.rows.len() - 2].t <= 1.0 / cfg.sample_rate + 1e-12);
    let kinds: Vec<&str> = log.events.iter().map(|e| e.kind.as_str()).collect();
    assert_eq!(kinds.last(), Some(&"rupture"));

    // a trigger before the rupture is logged before it
    let early = run_with_wind(&wind, &cfg, &ScriptedPredictor { start: 1.0, end: 1.5 }).unwrap();
    let pos = |k: &str| early.events.iter().position(|e| e.kind == k);
    if let (Some(t), Some(r)) = (pos("avoidance_trigger"), pos("rupture")) {
        assert!(t < r);
    }
    assert!(pos("avoidance_trigger").is_some());
}

#[test]
fn log_round_trips_through_csv() {
    let cfg = SimulationConfig::default();
    let log = calm_run(&cfg);
    let text = log.to_csv("# config_hash=test seed=0 schema_version=1");
    let back = RunLog::from_csv(&text, std::path::Path::new("calm.csv")).unwrap();
    assert_eq!(back.rows, log.rows);
}
