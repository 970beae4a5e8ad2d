//! One pumping cycle from a noise vector: trim, simulate, log, reduce to a limit value.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frames::{o_to_w, w_to_o};
use crate::guidance::{
    path_frame, rate_inversion, unbanked_axes, GuidanceConfig, GuidanceContext, GuidanceEvent, GuidanceState, Mode,
};
use crate::plant::{
    integrate_step, measure, ActuatorBank, AircraftState, PlantInputs, PlantMeasurements, PlantParams, PlantState,
    TetherState, WinchState,
};
use crate::windfield::{DrydenParams, NoiseSeedVector, ShearProfile, WindField, TURBULENCE_CHANNELS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    /// Maximum simulated time (s).
    pub t_sim: f64,
    /// Noise, logging and predictor rate (Hz).
    pub sample_rate: f64,
    /// Integrator and flight-control rate (Hz); a multiple of `sample_rate`.
    pub integrator_rate: f64,
    /// Critical tether force (N).
    pub g_star: f64,
    /// Added to `g_star` for runs that end invalid (N).
    pub invalid_penalty: f64,
    /// Lift coefficient used for the initial trim.
    pub trim_cl: f64,
    #[serde(default)]
    pub shear: ShearProfile,
    #[serde(default)]
    pub dryden: DrydenParams,
    #[serde(default)]
    pub plant: PlantParams,
    #[serde(default)]
    pub guidance: GuidanceConfig,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            t_sim: 300.0,
            sample_rate: 10.0,
            integrator_rate: 100.0,
            g_star: 2000.0,
            invalid_penalty: 1000.0,
            trim_cl: 0.9,
            shear: ShearProfile::default(),
            dryden: DrydenParams::default(),
            plant: PlantParams::default(),
            guidance: GuidanceConfig::default(),
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_sim > 0.0 && self.sample_rate > 0.0) {
            return Err(Error::config("t_sim and sample_rate must be > 0"));
        }
        let ratio = self.integrator_rate / self.sample_rate;
        if !(ratio >= 1.0 && (ratio - ratio.round()).abs() < 1e-9) {
            return Err(Error::config("integrator_rate must be an integer multiple of sample_rate"));
        }
        if !(self.g_star > 0.0 && self.invalid_penalty >= 0.0) {
            return Err(Error::config("g_star must be > 0 and invalid_penalty >= 0"));
        }
        self.shear.validate()?;
        self.dryden.validate()?;
        self.plant.validate()?;
        self.guidance.validate()
    }

    pub fn substeps(&self) -> usize {
        (self.integrator_rate / self.sample_rate).round() as usize
    }

    /// Length of the noise vector one run consumes.
    pub fn noise_dimension(&self) -> usize {
        NoiseSeedVector::dimension(self.t_sim, self.sample_rate, TURBULENCE_CHANNELS)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Completed,
    Rupture,
    /// Reached `t_sim` before the cycle completed; the limit value is still the peak force.
    Incomplete,
    Invalid,
}

impl Outcome {
    pub fn as_str(&self) -> &'static str {
        match self {
            Outcome::Completed => "completed",
            Outcome::Rupture => "rupture",
            Outcome::Incomplete => "incomplete",
            Outcome::Invalid => "invalid",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "completed" => Some(Outcome::Completed),
            "rupture" => Some(Outcome::Rupture),
            "incomplete" => Some(Outcome::Incomplete),
            "invalid" => Some(Outcome::Invalid),
            _ => None,
        }
    }
}

/// One logged sample.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LogRow {
    pub t: f64,
    /// Wind at the aircraft in W (m/s).
    pub wind_x: f64,
    pub wind_y: f64,
    pub wind_z: f64,
    /// Acceleration along the tether toward the ground station (m/s^2).
    pub a_z_tau: f64,
    /// Tether force at the aircraft (N).
    pub f_t: f64,
    /// Largest aircraft-end tether force since the previous sample (N).
    pub f_t_peak: f64,
    pub alpha: f64,
    /// Path-following error (m).
    pub e_p: f64,
    /// Position in O (m).
    pub pos_x: f64,
    pub pos_y: f64,
    pub pos_z: f64,
    pub airspeed: f64,
    pub tether_length: f64,
    pub winch_speed: f64,
    /// Largest absolute winch acceleration since the previous sample (m/s^2).
    pub winch_accel_peak: f64,
    pub f_ground: f64,
    pub f_set: f64,
    /// 0 traction, 1 retraction, 2 transition.
    pub mode: f64,
    pub mu: f64,
    pub mu_set: f64,
    pub alpha_set: f64,
    pub delta_a: f64,
    pub delta_e: f64,
    pub delta_r: f64,
    /// Largest absolute surface deflection since the previous sample (deg), a/e/r.
    pub deflection_peak_a: f64,
    pub deflection_peak_e: f64,
    pub deflection_peak_r: f64,
    /// Largest absolute surface rate since the previous sample (deg/s), a/e/r.
    pub rate_peak_a: f64,
    pub rate_peak_e: f64,
    pub rate_peak_r: f64,
    pub phi_r: f64,
    pub s: f64,
    pub y_hat: f64,
}

macro_rules! log_columns {
    ($($name:ident),* $(,)?) => {
        /// Column names of the persisted run log, in file order.
        pub const LOG_COLUMNS: &[&str] = &[$(stringify!($name)),*];

        impl LogRow {
            pub fn values(&self) -> Vec<f64> {
                vec![$(self.$name),*]
            }

            pub fn from_values(v: &[f64]) -> Self {
                let mut it = v.iter().copied();
                Self { $($name: it.next().unwrap_or(f64::NAN)),* }
            }

            /// Value of a named column.
            pub fn get(&self, name: &str) -> Option<f64> {
                match name {
                    $(stringify!($name) => Some(self.$name),)*
                    _ => None,
                }
            }
        }
    };
}

log_columns!(
    t, wind_x, wind_y, wind_z, a_z_tau, f_t, f_t_peak, alpha, e_p, pos_x, pos_y, pos_z, airspeed,
    tether_length, winch_speed, winch_accel_peak, f_ground, f_set, mode, mu, mu_set, alpha_set,
    delta_a, delta_e, delta_r, deflection_peak_a, deflection_peak_e, deflection_peak_r, rate_peak_a,
    rate_peak_e, rate_peak_r, phi_r, s, y_hat,
);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEvent {
    pub t: f64,
    pub kind: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub rows: Vec<LogRow>,
    pub events: Vec<LogEvent>,
    pub outcome: Outcome,
    /// Time of the first rupture sample, if any.
    pub upset_time: Option<f64>,
}

impl RunLog {
    pub fn signal(&self, name: &str) -> Result<Vec<f64>> {
        if !LOG_COLUMNS.contains(&name) {
            return Err(Error::Schema(format!("unknown log signal '{name}'")));
        }
        Ok(self.rows.iter().map(|r| r.get(name).unwrap()).collect())
    }

    pub fn duration(&self) -> f64 {
        match (self.rows.first(), self.rows.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0.0,
        }
    }

    /// CSV text with a `#` metadata line, a header line and one row per sample.
    pub fn to_csv(&self, meta: &str) -> String {
        let mut out = String::new();
        let upset = self.upset_time.map(|t| t.to_string()).unwrap_or_else(|| "none".into());
        let _ = writeln!(out, "# {meta} outcome={} upset_time={upset}", self.outcome.as_str());
        out.push_str(&LOG_COLUMNS.join(","));
        out.push('\n');
        for row in &self.rows {
            let line: Vec<String> = row.values().iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    pub fn events_csv(&self, meta: &str) -> String {
        let mut out = format!("# {meta}\nt,kind,detail\n");
        for e in &self.events {
            let _ = writeln!(out, "{},{},{}", e.t, e.kind, e.detail);
        }
        out
    }

    /// Parses text produced by [`RunLog::to_csv`]; events are not part of that file.
    pub fn from_csv(text: &str, path: &Path) -> Result<Self> {
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            message: format!("line {line}: {msg}"),
        };
        let mut lines = text.lines().enumerate();
        let (_, meta) = lines.next().ok_or_else(|| parse_err(1, "empty file".into()))?;
        let mut outcome = None;
        let mut upset_time = None;
        for token in meta.trim_start_matches('#').split_whitespace() {
            if let Some(v) = token.strip_prefix("outcome=") {
                outcome = Outcome::parse(v);
            } else if let Some(v) = token.strip_prefix("upset_time=") {
                upset_time = v.parse::<f64>().ok();
            }
        }
        let outcome = outcome.ok_or_else(|| parse_err(1, "missing outcome".into()))?;
        let (_, header) = lines.next().ok_or_else(|| parse_err(2, "missing header".into()))?;
        let names: Vec<&str> = header.split(',').collect();
        if names != LOG_COLUMNS {
            return Err(Error::Schema(format!("{}: run log columns do not match", path.display())));
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let values: std::result::Result<Vec<f64>, _> = line.split(',').map(str::parse::<f64>).collect();
            let values = values.map_err(|e| parse_err(i + 1, e.to_string()))?;
            if values.len() != LOG_COLUMNS.len() {
                return Err(parse_err(i + 1, format!("expected {} fields", LOG_COLUMNS.len())));
            }
            rows.push(LogRow::from_values(&values));
        }
        Ok(Self {
            rows,
            events: Vec::new(),
            outcome,
            upset_time,
        })
    }
}

/// Named reduction of a run log to a scalar; larger means closer to the upset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimitFunction {
    pub g_star: f64,
    pub invalid_penalty: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LimitValue {
    pub g: f64,
    pub invalid: bool,
}

/// Maximum tether force at the aircraft over the run.
pub fn evaluate_limit(log: &RunLog, lf: &LimitFunction) -> Result<LimitValue> {
    if log.rows.is_empty() {
        return Err(Error::InsufficientData("limit of an empty run log".into()));
    }
    if log.outcome == Outcome::Invalid {
        return Ok(LimitValue {
            g: lf.g_star + lf.invalid_penalty,
            invalid: true,
        });
    }
    let g = log.rows.iter().map(|r| r.f_t.max(r.f_t_peak)).fold(f64::NEG_INFINITY, f64::max);
    Ok(LimitValue { g, invalid: false })
}

/// Time-averaged winch power `F_ground * v_W` over a completed cycle (kW).
pub fn average_cycle_power(log: &RunLog) -> Result<f64> {
    if log.outcome != Outcome::Completed {
        return Err(Error::Domain(format!("power of a run with outcome {}", log.outcome.as_str())));
    }
    if log.rows.is_empty() {
        return Err(Error::InsufficientData("power of an empty run log".into()));
    }
    let sum: f64 = log.rows.iter().map(|r| r.f_ground * r.winch_speed).sum();
    Ok(sum / log.rows.len() as f64 / 1000.0)
}

/// Predictor evaluated inside the loop at the sample rate on the log recorded so far.
pub trait OnlinePredictor: Sync {
    /// `-1` predicts an upset, `1` nominal.
    fn predict(&self, log: &[LogRow]) -> Result<i8>;
}

/// Never predicts an upset.
pub struct NoPredictor;

impl OnlinePredictor for NoPredictor {
    fn predict(&self, _log: &[LogRow]) -> Result<i8> {
        Ok(1)
    }
}

/// Predicts an upset inside a fixed time interval.
pub struct ScriptedPredictor {
    pub start: f64,
    pub end: f64,
}

impl OnlinePredictor for ScriptedPredictor {
    fn predict(&self, log: &[LogRow]) -> Result<i8> {
        let t = log.last().map(|r| r.t).unwrap_or(0.0);
        Ok(if t >= self.start && t < self.end { -1 } else { 1 })
    }
}

/// Initial plant and guidance state: trimmed on the traction path at `s = 0`.
pub fn trim_initial_state(cfg: &SimulationConfig, wind: &WindField) -> Result<(PlantState, GuidanceState)> {
    let g = &cfg.guidance;
    let plant = &cfg.plant;
    let ac = &plant.aircraft;
    let teth = &plant.tether;
    let f_set = g.forces.traction;

    let l_unstretched = g.lengths.initial;
    let radius = l_unstretched * (1.0 + f_set / (teth.stiffness * teth.reference_length));
    let frame = path_frame(0.0, &g.shape, g.shape.phi_set);
    let u_w = frame.point;
    let p_w = u_w * radius;
    let t_w = frame.tangent();
    let wind_w = Vector3::new(cfg.shear.speed(p_w.z)?, 0.0, 0.0) + wind.gust(0.0);

    let u_o = w_to_o(&u_w);
    let qbar_s = |va: f64| 0.5 * ac.air_density * va * va * ac.wing_area;
    let cl = cfg.trim_cl;
    let cd = ac.aero.cd0 + ac.aero.k_induced * cl * cl;

    let residual = |x: &Vector3<f64>| -> Vector3<f64> {
        let (vt, vr, mu) = (x[0], x[1], x[2]);
        let vk_w = t_w * vt + u_w * vr;
        let va_o = w_to_o(&(vk_w - wind_w));
        let va = va_o.norm();
        let v_hat = va_o / va;
        let (y0, z0) = unbanked_axes(&v_hat);
        let lift_dir = y0 * mu.sin() - z0 * mu.cos();
        let aero = qbar_s(va) * (lift_dir * cl - v_hat * cd);
        let gravity = Vector3::new(0.0, 0.0, ac.mass * ac.gravity);
        let tether = -u_o * f_set;
        let accel = -u_o * (vt * vt / radius);
        (aero + gravity + tether - accel * ac.mass) / (ac.mass * ac.gravity)
    };

    let mut x = Vector3::new(25.0, 2.0, 0.0);
    let mut converged = false;
    for _ in 0..50 {
        let r0 = residual(&x);
        if r0.norm() < 1e-12 {
            converged = true;
            break;
        }
        let mut jac = Matrix3::zeros();
        for k in 0..3 {
            let mut xp = x;
            let h = 1e-6 * x[k].abs().max(1.0);
            xp[k] += h;
            jac.set_column(k, &((residual(&xp) - r0) / h));
        }
        let step = jac
            .lu()
            .solve(&r0)
            .ok_or_else(|| Error::NotConverged("trim Jacobian is singular".into()))?;
        x -= step;
        if step.norm() < 1e-12 {
            converged = true;
            break;
        }
    }
    if !converged || !x.iter().all(|v| v.is_finite()) || x[0] <= 0.0 {
        return Err(Error::NotConverged(format!("initial trim failed (state {x:?})")));
    }
    let (vt, vr, mu) = (x[0], x[1], x[2]);

    let vk_w = t_w * vt + u_w * vr;
    let vk_o = w_to_o(&vk_w);
    let va_o = w_to_o(&(vk_w - wind_w));
    let v_hat = va_o.normalize();
    let (y0, z0) = unbanked_axes(&v_hat);
    let alpha = (cl - ac.aero.cl0) / ac.aero.cl_alpha;
    let r_oa = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[v_hat, y0, z0]));
    let r_ob = r_oa * Rotation3::from_axis_angle(&Vector3::x_axis(), mu) * Rotation3::from_axis_angle(&Vector3::y_axis(), alpha);
    let attitude = UnitQuaternion::from_rotation_matrix(&r_ob);

    let position = w_to_o(&p_w);
    let aircraft = AircraftState {
        position,
        velocity: attitude.inverse_transform_vector(&vk_o),
        attitude,
        rates: Vector3::zeros(),
    };
    let tether = TetherState::straight(&Vector3::zeros(), &position, &vk_o, teth.segments, l_unstretched);
    let mut state = PlantState {
        aircraft,
        tether,
        winch: WinchState::steady(&plant.winch, vr),
        actuators: ActuatorBank::default(),
        measurements: PlantMeasurements::default(),
    };
    state.measurements = measure(&state, plant, wind, 0.0);
    let trim = rate_inversion(&Vector3::zeros(), &state, ac, &plant.actuators, &g.gains);
    state.actuators.deflection = trim;
    state.measurements = measure(&state, plant, wind, 0.0);
    Ok((state, GuidanceState::traction_start(g, 0.0)))
}

fn mode_code(mode: Mode) -> f64 {
    match mode {
        Mode::Traction => 0.0,
        Mode::Retraction => 1.0,
        Mode::Transition => 2.0,
    }
}

#[derive(Default)]
struct Peaks {
    f_t: f64,
    winch_accel: f64,
    deflection: [f64; 3],
    rate: [f64; 3],
}

impl Peaks {
    fn update(&mut self, s: &PlantState) {
        self.f_t = self.f_t.max(s.measurements.tension_aircraft);
        self.winch_accel = self.winch_accel.max(s.winch.acceleration.abs());
        for i in 0..3 {
            self.deflection[i] = self.deflection[i].max(s.actuators.deflection[i].abs());
            self.rate[i] = self.rate[i].max(s.actuators.rate[i].abs());
        }
    }
}

fn make_row(t: f64, s: &PlantState, g: &GuidanceState, mu: f64, mu_set: f64, alpha_set: f64, y_hat: i8, peaks: &Peaks) -> LogRow {
    let m = &s.measurements;
    let wind_w = o_to_w(&m.wind_o);
    let p = s.aircraft.position;
    let r_hat = p.normalize();
    LogRow {
        t,
        wind_x: wind_w.x,
        wind_y: wind_w.y,
        wind_z: wind_w.z,
        a_z_tau: -m.acceleration_o.dot(&r_hat),
        f_t: m.tension_aircraft,
        f_t_peak: peaks.f_t.max(m.tension_aircraft),
        alpha: m.alpha,
        e_p: g.path_error,
        pos_x: p.x,
        pos_y: p.y,
        pos_z: p.z,
        airspeed: m.airspeed,
        tether_length: s.tether.length,
        winch_speed: s.winch.speed,
        winch_accel_peak: peaks.winch_accel,
        f_ground: m.tension_ground,
        f_set: g.setpoint.value,
        mode: mode_code(g.mode),
        mu,
        mu_set,
        alpha_set,
        delta_a: s.actuators.deflection[0],
        delta_e: s.actuators.deflection[1],
        delta_r: s.actuators.deflection[2],
        deflection_peak_a: peaks.deflection[0],
        deflection_peak_e: peaks.deflection[1],
        deflection_peak_r: peaks.deflection[2],
        rate_peak_a: peaks.rate[0],
        rate_peak_e: peaks.rate[1],
        rate_peak_r: peaks.rate[2],
        phi_r: g.phi_r,
        s: g.s,
        y_hat: y_hat as f64,
    }
}

fn describe(ev: &GuidanceEvent) -> (String, String) {
    use crate::guidance::AvoidanceEvent as A;
    match ev {
        GuidanceEvent::ModeChange { from, to } => ("mode_change".into(), format!("{}->{}", from.as_str(), to.as_str())),
        GuidanceEvent::Avoidance(A::Triggered) => ("avoidance_trigger".into(), String::new()),
        GuidanceEvent::Avoidance(A::Rearmed) => ("avoidance_rearm".into(), String::new()),
        GuidanceEvent::Avoidance(A::Completed) => ("avoidance_complete".into(), String::new()),
        GuidanceEvent::AvoidanceAborted => ("avoidance_aborted".into(), "retraction started".into()),
        GuidanceEvent::ClosestPointFallback => ("closest_point_fallback".into(), String::new()),
    }
}

/// Simulates one pumping cycle driven by `theta`.
pub fn run_pumping_cycle(theta: &NoiseSeedVector, cfg: &SimulationConfig, predictor: &dyn OnlinePredictor) -> Result<RunLog> {
    cfg.validate()?;
    if theta.channels != TURBULENCE_CHANNELS || theta.len() != cfg.noise_dimension() {
        return Err(Error::config(format!(
            "noise vector has {} entries over {} channels, configuration needs {}",
            theta.len(),
            theta.channels,
            cfg.noise_dimension()
        )));
    }
    if (theta.sample_rate - cfg.sample_rate).abs() > 1e-12 {
        return Err(Error::config("noise sample rate differs from the configured sample rate"));
    }
    let wind = WindField::from_noise(cfg.shear, &cfg.dryden, theta)?;
    run_with_wind(&wind, cfg, predictor)
}

/// Simulates one pumping cycle in a precomputed wind field.
pub fn run_with_wind(wind: &WindField, cfg: &SimulationConfig, predictor: &dyn OnlinePredictor) -> Result<RunLog> {
    let (mut plant, mut guidance) = trim_initial_state(cfg, wind)?;
    let ctx = GuidanceContext {
        config: &cfg.guidance,
        aircraft: &cfg.plant.aircraft,
        actuators: &cfg.plant.actuators,
    };
    let substeps = cfg.substeps();
    let dt = 1.0 / cfg.integrator_rate;
    let dt_s = 1.0 / cfg.sample_rate;
    let samples = (cfg.t_sim * cfg.sample_rate - 1e-9).ceil() as usize;

    let mut rows: Vec<LogRow> = Vec::with_capacity(samples + 1);
    let mut events: Vec<LogEvent> = Vec::new();
    let mut peaks = Peaks::default();
    peaks.update(&plant);
    let mu0 = crate::guidance::measured_bank(&plant);
    rows.push(make_row(0.0, &plant, &guidance, mu0, mu0, plant.measurements.alpha, 1, &peaks));

    let mut guidance_events = Vec::new();
    let mut outcome = None;
    let mut upset_time = None;
    let mut last_out = None;

    'outer: for k in 0..samples {
        let y_hat = predictor.predict(&rows)?;
        rows.last_mut().unwrap().y_hat = y_hat as f64;
        let t_k = k as f64 * dt_s;
        if let Some(ev) = guidance.update_setpoint(&ctx, y_hat, plant.measurements.tension_aircraft, dt_s) {
            let (kind, detail) = describe(&ev);
            events.push(LogEvent { t: t_k, kind, detail });
        }
        peaks = Peaks::default();
        for j in 0..substeps {
            let t = t_k + j as f64 * dt;
            guidance_events.clear();
            let out = guidance.step(&ctx, &plant, dt, &mut guidance_events);
            for ev in &guidance_events {
                let (kind, detail) = describe(ev);
                events.push(LogEvent { t, kind, detail });
            }
            last_out = Some(out);
            let inputs = PlantInputs {
                surface_commands_deg: out.surface_commands_deg,
                tether_force_setpoint: out.force_setpoint,
            };
            let t_next = t_k + (j + 1) as f64 * dt;
            plant = match integrate_step(&plant, &cfg.plant, &inputs, wind, t, dt) {
                Ok(p) => p,
                Err(e) => {
                    events.push(LogEvent {
                        t: t_next,
                        kind: "numerical_failure".into(),
                        detail: e.to_string(),
                    });
                    outcome = Some(Outcome::Invalid);
                    break 'outer;
                }
            };
            peaks.update(&plant);
            let m = &plant.measurements;
            if m.tension_aircraft > cfg.g_star {
                events.push(LogEvent {
                    t: t_next,
                    kind: "rupture".into(),
                    detail: format!("{}", m.tension_aircraft),
                });
                outcome = Some(Outcome::Rupture);
                upset_time = Some(t_next);
                rows.push(make_row(t_next, &plant, &guidance, out.mu_measured, out.setpoints.mu, out.setpoints.alpha, y_hat, &peaks));
                break 'outer;
            }
            if m.degenerate_airflow || m.tether_collapsed {
                let reason = if m.degenerate_airflow { "degenerate airflow" } else { "tether node collapse" };
                events.push(LogEvent {
                    t: t_next,
                    kind: "numerical_failure".into(),
                    detail: reason.into(),
                });
                outcome = Some(Outcome::Invalid);
                break 'outer;
            }
            if guidance.cycle_complete {
                events.push(LogEvent {
                    t: t_next,
                    kind: "cycle_complete".into(),
                    detail: String::new(),
                });
                outcome = Some(Outcome::Completed);
                rows.push(make_row(t_next, &plant, &guidance, out.mu_measured, out.setpoints.mu, out.setpoints.alpha, y_hat, &peaks));
                break 'outer;
            }
        }
        let out = last_out.expect("at least one substep");
        rows.push(make_row((k + 1) as f64 * dt_s, &plant, &guidance, out.mu_measured, out.setpoints.mu, out.setpoints.alpha, y_hat, &peaks));
    }
    let outcome = match outcome {
        Some(o) => o,
        None => {
            events.push(LogEvent {
                t: rows.last().map(|r| r.t).unwrap_or(0.0),
                kind: "timeout".into(),
                detail: "cycle not completed within t_sim".into(),
            });
            Outcome::Incomplete
        }
    };
    Ok(RunLog {
        rows,
        events,
        outcome,
        upset_time,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row_with_force(t: f64, f: f64) -> LogRow {
        LogRow {
            t,
            f_t: f,
            f_t_peak: f,
            ..Default::default()
        }
    }

    fn log_of(forces: &[f64], outcome: Outcome) -> RunLog {
        RunLog {
            rows: forces.iter().enumerate().map(|(i, &f)| row_with_force(i as f64 * 0.1, f)).collect(),
            events: vec![],
            outcome,
            upset_time: None,
        }
    }

    const LF: LimitFunction = LimitFunction {
        g_star: 2000.0,
        invalid_penalty: 1000.0,
    };

    #[test]
    fn limit_of_constant_force() {
        let g = evaluate_limit(&log_of(&[1000.0; 20], Outcome::Completed), &LF).unwrap();
        assert_eq!(g.g, 1000.0);
    }

    #[test]
    fn limit_is_running_maximum() {
        let g = evaluate_limit(&log_of(&[500.0, 2100.0, 1000.0], Outcome::Rupture), &LF).unwrap();
        assert_eq!(g.g, 2100.0);
    }

    #[test]
    fn limit_of_empty_log_fails() {
        assert!(evaluate_limit(&log_of(&[], Outcome::Completed), &LF).is_err());
    }

    #[test]
    fn invalid_runs_get_penalty() {
        let g = evaluate_limit(&log_of(&[100.0], Outcome::Invalid), &LF).unwrap();
        assert!(g.invalid);
        assert_eq!(g.g, 3000.0);
    }

    #[test]
    fn power_examples() {
        let mut log = log_of(&[0.0; 10], Outcome::Completed);
        for r in &mut log.rows {
            r.f_ground = 1000.0;
            r.winch_speed = 2.0;
        }
        assert_eq!(average_cycle_power(&log).unwrap(), 2.0);
        for (i, r) in log.rows.iter_mut().enumerate() {
            r.winch_speed = if i < 5 { 2.0 } else { -2.0 };
        }
        assert_eq!(average_cycle_power(&log).unwrap(), 0.0);
        log.outcome = Outcome::Rupture;
        assert!(average_cycle_power(&log).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let log = log_of(&[1.5, 2.25, 1e-7], Outcome::Rupture);
        let text = log.to_csv("config_hash=abc seed=1");
        let back = RunLog::from_csv(&text, Path::new("x.csv")).unwrap();
        assert_eq!(back.rows, log.rows);
        assert_eq!(back.outcome, Outcome::Rupture);
    }
}
