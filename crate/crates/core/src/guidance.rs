//! Path geometry, pumping-cycle mode logic and the cascaded flight controller.
//!
//! Traction flight follows a figure-eight (Lemniscate) drawn on the unit sphere and
//! tilted about `-y_W` by the rotation angle `phi_r`. Retraction follows a straight line
//! back to a waypoint on the steep eight, and the transition rotates that eight down into
//! the power zone while the tether force set point ramps up.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frames::{elevation_w, m_ko, o_to_w, w_to_o};
use crate::plant::{AircraftParams, ActuatorParams, PlantMeasurements, PlantState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathShape {
    /// Latitude shape parameter (rad).
    pub a: f64,
    /// Longitude half width (rad).
    pub b: f64,
    /// Elevation of the traction eight (rad).
    pub phi_set: f64,
    /// Elevation of the eight when the transition starts (rad).
    pub phi_0: f64,
    /// Rotation filter bandwidth (1/s).
    pub omega_r: f64,
    /// Arc gap above which the rotation is frozen (rad).
    pub freeze_threshold: f64,
}

impl Default for PathShape {
    fn default() -> Self {
        Self {
            a: 0.7,
            b: 0.4,
            phi_set: 25f64.to_radians(),
            phi_0: 75f64.to_radians(),
            omega_r: 0.05,
            freeze_threshold: 1f64.to_radians(),
        }
    }
}

impl PathShape {
    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.b > 0.0) {
            return Err(Error::config("path shape a and b must be > 0"));
        }
        if !(0.0 < self.phi_set && self.phi_set < self.phi_0 && self.phi_0 < FRAC_PI_2) {
            return Err(Error::config("path elevations must satisfy 0 < phi_set < phi_0 < pi/2"));
        }
        if !(self.omega_r > 0.0) || !(self.freeze_threshold >= 0.0) {
            return Err(Error::config("rotation bandwidth must be > 0"));
        }
        Ok(())
    }
}

/// Longitude and latitude of the Lemniscate at parameter `s`.
pub fn lemniscate_point(s: f64, a: f64, b: f64) -> (f64, f64) {
    let (sin_s, cos_s) = s.sin_cos();
    let k = a / b * cos_s;
    let d = 1.0 + k * k;
    (b * sin_s / d, a * sin_s * cos_s / d)
}

/// Longitude/latitude and their first two derivatives in `s`.
fn lemniscate_derivatives(s: f64, a: f64, b: f64) -> ([f64; 3], [f64; 3]) {
    let (sin_s, cos_s) = s.sin_cos();
    let (sin_2s, cos_2s) = (2.0 * s).sin_cos();
    let k2 = (a / b).powi(2);
    let d = 1.0 + k2 * cos_s * cos_s;
    let d1 = -k2 * sin_2s;
    let d2 = -2.0 * k2 * cos_2s;
    let quotient = |n: f64, n1: f64, n2: f64| {
        let f = n / d;
        let f1 = (n1 * d - n * d1) / (d * d);
        let f2 = (n2 * d - n * d2) / (d * d) - 2.0 * d1 * (n1 * d - n * d1) / (d * d * d);
        [f, f1, f2]
    };
    (
        quotient(b * sin_s, b * cos_s, -b * sin_s),
        quotient(0.5 * a * sin_2s, a * cos_2s, -2.0 * a * sin_2s),
    )
}

/// Rotation from the path frame into W for tilt `phi_r` about `-y_W`.
pub fn path_rotation(phi_r: f64) -> Matrix3<f64> {
    let (s, c) = phi_r.sin_cos();
    Matrix3::new(c, 0.0, -s, 0.0, 1.0, 0.0, s, 0.0, c)
}

/// Point on the tilted path (unit vector in W).
pub fn path_point_w(s: f64, shape: &PathShape, phi_r: f64) -> Vector3<f64> {
    let (lam, phi) = lemniscate_point(s, shape.a, shape.b);
    path_rotation(phi_r) * spherical(lam, phi)
}

fn spherical(lam: f64, phi: f64) -> Vector3<f64> {
    Vector3::new(lam.cos() * phi.cos(), lam.sin() * phi.cos(), phi.sin())
}

/// Path point with its first and second derivative in `s`, all in W.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathFrame {
    pub point: Vector3<f64>,
    pub d1: Vector3<f64>,
    pub d2: Vector3<f64>,
}

impl PathFrame {
    pub fn tangent(&self) -> Vector3<f64> {
        self.d1.normalize()
    }

    /// Geodesic curvature on the unit sphere, positive when turning toward `point x tangent`.
    pub fn geodesic_curvature(&self) -> f64 {
        self.d1.cross(&self.d2).dot(&self.point) / self.d1.norm().powi(3)
    }
}

pub fn path_frame(s: f64, shape: &PathShape, phi_r: f64) -> PathFrame {
    let ([l, l1, l2], [f, f1, f2]) = lemniscate_derivatives(s, shape.a, shape.b);
    let (sl, cl) = l.sin_cos();
    let (sf, cf) = f.sin_cos();
    let p = Vector3::new(cl * cf, sl * cf, sf);
    let p_l = Vector3::new(-sl * cf, cl * cf, 0.0);
    let p_f = Vector3::new(-cl * sf, -sl * sf, cf);
    let p_ll = Vector3::new(-cl * cf, -sl * cf, 0.0);
    let p_lf = Vector3::new(sl * sf, -cl * sf, 0.0);
    let d1 = p_l * l1 + p_f * f1;
    let d2 = p_l * l2 + p_f * f2 + p_ll * (l1 * l1) + p_lf * (2.0 * l1 * f1) - p * (f1 * f1);
    let r = path_rotation(phi_r);
    PathFrame {
        point: r * p,
        d1: r * d1,
        d2: r * d2,
    }
}

/// Result of the closest-point search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosestPoint {
    pub s: f64,
    /// True when Newton failed from the warm start and the grid fallback was used.
    pub fallback: bool,
}

fn wrap_2pi(s: f64) -> f64 {
    let w = s.rem_euclid(TAU);
    if w >= TAU {
        0.0
    } else {
        w
    }
}

fn newton_closest(u: &Vector3<f64>, shape: &PathShape, phi_r: f64, s_init: f64) -> Option<f64> {
    let mut s = s_init;
    for _ in 0..20 {
        let f = path_frame(s, shape, phi_r);
        let grad = u.dot(&f.d1);
        let curv = u.dot(&f.d2);
        if !(curv < 0.0) {
            return None;
        }
        let step = grad / curv;
        s -= step;
        if step.abs() < 1e-10 {
            return Some(wrap_2pi(s));
        }
    }
    None
}

/// Closest point on the tilted path to the direction `u` (unit vector in W).
///
/// Newton iterations on the stationarity condition `u . p'(s) = 0`, warm started at
/// `s_init`; on failure a 64-point grid search seeds one more Newton polish.
pub fn closest_point_newton(u: &Vector3<f64>, shape: &PathShape, phi_r: f64, s_init: f64) -> ClosestPoint {
    if let Some(s) = newton_closest(u, shape, phi_r, s_init) {
        if (angle_diff(s, s_init)).abs() < FRAC_PI_2 {
            return ClosestPoint { s, fallback: false };
        }
    }
    let s_grid = grid_closest(u, shape, phi_r, 64);
    let s = newton_closest(u, shape, phi_r, s_grid).unwrap_or(s_grid);
    ClosestPoint { s, fallback: true }
}

/// Parameter of the best grid sample for direction `u`.
pub fn grid_closest(u: &Vector3<f64>, shape: &PathShape, phi_r: f64, n: usize) -> f64 {
    let mut best = (f64::NEG_INFINITY, 0.0);
    for i in 0..n {
        let s = TAU * i as f64 / n as f64;
        let score = u.dot(&path_point_w(s, shape, phi_r));
        if score > best.0 {
            best = (score, s);
        }
    }
    best.1
}

/// Signed difference `a - b` wrapped into `(-pi, pi]`.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    if d > PI {
        d - TAU
    } else {
        d
    }
}

/// One explicit-Euler step of the path rotation filter with the arc-gap freeze.
pub fn transition_filter_step(phi_r: f64, arc_gap: f64, shape: &PathShape, dt: f64) -> f64 {
    if arc_gap > shape.freeze_threshold {
        return phi_r;
    }
    (phi_r + dt * shape.omega_r * (shape.phi_set - phi_r)).clamp(shape.phi_set, shape.phi_0)
}

/// Elevation of the aircraft minus elevation of the target point, both in W.
pub fn arc_gap(aircraft_w: &Vector3<f64>, target_w: &Vector3<f64>) -> f64 {
    elevation_w(aircraft_w) - elevation_w(target_w)
}

/// True when moving forward from `s_prev` to `s_now` passes `point`.
pub fn crossed(s_prev: f64, s_now: f64, point: f64) -> bool {
    let advance = angle_diff(s_now, s_prev);
    if advance <= 0.0 {
        return false;
    }
    let to_point = (point - s_prev).rem_euclid(TAU);
    to_point > 0.0 && to_point <= advance
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TetherLengths {
    /// Unstretched length at the start of a run (m).
    pub initial: f64,
    /// Retraction is triggered at the next retraction point once this is reached (m).
    pub trigger: f64,
    /// Length that must never be exceeded (m).
    pub hard_max: f64,
    /// Distance of the retraction waypoint from the ground station (m).
    pub retraction_end: f64,
}

impl Default for TetherLengths {
    fn default() -> Self {
        Self {
            initial: 220.0,
            trigger: 330.0,
            hard_max: 380.0,
            retraction_end: 200.0,
        }
    }
}

/// Remembers the tether length at the last retraction-point crossing and whether the
/// trigger length has been reached at any time during traction.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HalfEightTracker {
    pub last_crossing_length: Option<f64>,
    pub increment: Option<f64>,
    pub trigger_reached: bool,
}

impl HalfEightTracker {
    pub fn observe_length(&mut self, length: f64, lengths: &TetherLengths) {
        self.trigger_reached |= length >= lengths.trigger;
    }

    pub fn record_crossing(&mut self, length: f64) {
        if let Some(prev) = self.last_crossing_length {
            self.increment = Some(length - prev);
        }
        self.last_crossing_length = Some(length);
    }
}

/// Retraction decision taken when the aircraft passes a retraction point.
pub fn retraction_trigger(tracker: &HalfEightTracker, at_crossing: bool, length: f64, lengths: &TetherLengths) -> bool {
    if !at_crossing {
        return false;
    }
    if length >= lengths.trigger || tracker.trigger_reached {
        return true;
    }
    match tracker.increment {
        Some(inc) => length + inc.max(0.0) > lengths.hard_max,
        None => false,
    }
}

/// Parameters of the flight-path inversion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InversionParams {
    pub mass: f64,
    pub gravity: f64,
    pub air_density: f64,
    pub wing_area: f64,
    pub cl0: f64,
    pub cl_alpha: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub mu_max: f64,
}

impl InversionParams {
    pub fn new(aircraft: &AircraftParams, gains: &ControllerGains) -> Self {
        Self {
            mass: aircraft.mass,
            gravity: aircraft.gravity,
            air_density: aircraft.air_density,
            wing_area: aircraft.wing_area,
            cl0: aircraft.aero.cl0,
            cl_alpha: aircraft.aero.cl_alpha,
            alpha_min: gains.alpha_min,
            alpha_max: gains.alpha_max,
            mu_max: gains.mu_max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttitudeSetpoints {
    pub mu: f64,
    pub alpha: f64,
    pub cl: f64,
    pub f_y: f64,
    pub f_z: f64,
    pub saturated: bool,
}

/// Bank and angle-of-attack commands from the pseudo-controls and the tether force set point.
#[allow(clippy::too_many_arguments)]
pub fn attitude_setpoints(
    nu_chi: f64,
    nu_gamma: f64,
    chi: f64,
    gamma: f64,
    v_k: f64,
    v_a: f64,
    position_o: &Vector3<f64>,
    force_setpoint: f64,
    p: &InversionParams,
) -> AttitudeSetpoints {
    let r_hat = position_o.normalize();
    let f_t = -(m_ko(chi, gamma) * r_hat) * force_setpoint;
    let f_y = p.mass * nu_chi * gamma.cos() * v_k - f_t.y;
    let f_z = p.mass * nu_gamma * v_k + gamma.cos() * p.mass * p.gravity + f_t.z;
    let mut mu = f_y.atan2(f_z);
    let cl = f_y.hypot(f_z) / (0.5 * p.air_density * v_a * v_a * p.wing_area);
    let alpha_raw = (cl - p.cl0) / p.cl_alpha;
    let alpha = alpha_raw.clamp(p.alpha_min, p.alpha_max);
    let mut saturated = alpha != alpha_raw;
    if mu.abs() > p.mu_max {
        mu = mu.clamp(-p.mu_max, p.mu_max);
        saturated = true;
    }
    AttitudeSetpoints {
        mu,
        alpha,
        cl,
        f_y,
        f_z,
        saturated,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerGains {
    /// Maximum heading offset commanded toward the path (rad).
    pub approach_angle: f64,
    /// Cross-track distance at which half the approach angle is used (m).
    pub approach_distance: f64,
    /// Heading error gain (1/s).
    pub heading_gain: f64,
    /// Lateral acceleration limit of the path loop (m/s^2).
    pub max_lateral_accel: f64,
    pub mu_bandwidth: f64,
    pub alpha_bandwidth: f64,
    pub mu_gain: f64,
    pub alpha_gain: f64,
    pub beta_gain: f64,
    pub max_mu_rate: f64,
    /// Rate loop gains for p, q, r (1/s).
    pub rate_gains: [f64; 3],
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub mu_max: f64,
}

impl Default for ControllerGains {
    fn default() -> Self {
        Self {
            approach_angle: 60f64.to_radians(),
            approach_distance: 20.0,
            heading_gain: 1.5,
            max_lateral_accel: 60.0,
            mu_bandwidth: 4.0,
            alpha_bandwidth: 5.0,
            mu_gain: 4.0,
            alpha_gain: 5.0,
            beta_gain: 2.0,
            max_mu_rate: 150f64.to_radians(),
            rate_gains: [12.0, 12.0, 8.0],
            alpha_min: -6f64.to_radians(),
            alpha_max: 14f64.to_radians(),
            mu_max: 100f64.to_radians(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForceSetpoints {
    pub traction: f64,
    pub retraction: f64,
    pub avoidance: f64,
    /// Re-arm factor: avoidance may end once the force is below `rearm_factor * avoidance`.
    pub rearm_factor: f64,
    /// Fraction of the traction set point that marks the avoidance as complete.
    pub completion_fraction: f64,
    /// Set point filter bandwidths (1/s).
    pub traction_bandwidth: f64,
    pub transition_bandwidth: f64,
    pub retraction_bandwidth: f64,
    pub avoidance_bandwidth: f64,
}

impl Default for ForceSetpoints {
    fn default() -> Self {
        Self {
            traction: 1600.0,
            retraction: 400.0,
            avoidance: 10.0,
            rearm_factor: 10.0,
            completion_fraction: 0.9,
            traction_bandwidth: 0.5,
            transition_bandwidth: 0.1,
            retraction_bandwidth: 1.0,
            avoidance_bandwidth: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    #[serde(default)]
    pub shape: PathShape,
    #[serde(default)]
    pub lengths: TetherLengths,
    #[serde(default)]
    pub forces: ForceSetpoints,
    #[serde(default)]
    pub gains: ControllerGains,
    /// The transition ends once `phi_r - phi_set` drops below this (rad).
    pub transition_exit_margin: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            shape: PathShape::default(),
            lengths: TetherLengths::default(),
            forces: ForceSetpoints::default(),
            gains: ControllerGains::default(),
            transition_exit_margin: 2f64.to_radians(),
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        let l = &self.lengths;
        if !(0.0 < l.retraction_end && l.initial > 0.0 && l.initial < l.trigger && l.trigger <= l.hard_max) {
            return Err(Error::config("tether lengths must satisfy 0 < initial < trigger <= hard_max"));
        }
        let f = &self.forces;
        if !(f.traction > 0.0 && f.retraction >= 0.0 && f.avoidance >= 0.0) {
            return Err(Error::config("force set points must be non-negative"));
        }
        let g = &self.gains;
        if !(g.alpha_min < g.alpha_max) || !(g.mu_max > 0.0) {
            return Err(Error::config("controller limits must be ordered"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Traction,
    Retraction,
    Transition,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Traction => "traction",
            Mode::Retraction => "retraction",
            Mode::Transition => "transition",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AvoidancePhase {
    #[default]
    Inactive,
    /// Set point driven toward the avoidance value.
    Reducing,
    /// Re-armed; set point returning to the mode value.
    Restoring,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AvoidanceEvent {
    Triggered,
    Rearmed,
    Completed,
}

/// Tether force set-point shaping including the avoidance sub-state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SetpointState {
    pub value: f64,
    pub phase: AvoidancePhase,
}

/// One update of the force set point; `y_hat = -1` requests avoidance.
pub fn avoidance_step(
    state: &SetpointState,
    y_hat: i8,
    measured_force: f64,
    mode_target: f64,
    mode_bandwidth: f64,
    forces: &ForceSetpoints,
    dt: f64,
) -> (SetpointState, Option<AvoidanceEvent>) {
    let mut phase = state.phase;
    let mut event = None;
    if y_hat < 0 {
        if phase == AvoidancePhase::Inactive {
            event = Some(AvoidanceEvent::Triggered);
        }
        phase = AvoidancePhase::Reducing;
    } else if phase == AvoidancePhase::Reducing && measured_force <= forces.rearm_factor * forces.avoidance {
        phase = AvoidancePhase::Restoring;
        event = Some(AvoidanceEvent::Rearmed);
    }
    let (target, bandwidth) = match phase {
        AvoidancePhase::Reducing => (forces.avoidance, forces.avoidance_bandwidth),
        AvoidancePhase::Restoring => (mode_target, mode_bandwidth),
        AvoidancePhase::Inactive => (mode_target, mode_bandwidth),
    };
    let gain = (bandwidth * dt).min(1.0);
    let value = (state.value + gain * (target - state.value)).max(0.0);
    if phase == AvoidancePhase::Restoring && value >= forces.completion_fraction * forces.traction {
        phase = AvoidancePhase::Inactive;
        event = Some(AvoidanceEvent::Completed);
    }
    (SetpointState { value, phase }, event)
}

/// Measured bank angle about the air velocity, zero with the lift vector pointing up.
pub fn measured_bank(state: &PlantState) -> f64 {
    let m = &state.measurements;
    let v_hat = m.air_velocity_o.normalize();
    let lift_b = Vector3::y().cross(&state.aircraft.attitude.inverse_transform_vector(&v_hat));
    let lift_o = state.aircraft.attitude * lift_b;
    let (y0, z0) = unbanked_axes(&v_hat);
    lift_o.dot(&y0).atan2(-lift_o.dot(&z0))
}

/// Horizontal right and downward axes perpendicular to a velocity direction (O frame).
pub fn unbanked_axes(v_hat: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let y = Vector3::z().cross(v_hat);
    let y = if y.norm() < 1e-9 { Vector3::y() } else { y.normalize() };
    (y, v_hat.cross(&y))
}

/// Reference-model and filter states of the cascade.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CascadeState {
    pub mu_ref: f64,
    pub alpha_ref: f64,
    pub initialized: bool,
}

/// Output of one cascade evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CascadeOutput {
    pub surface_commands_deg: [f64; 3],
    pub rate_command: Vector3<f64>,
    pub setpoints: AttitudeSetpoints,
    pub mu_measured: f64,
}

/// Attitude and rate loops: reference models on bank and angle of attack, body-rate
/// commands, then dynamic inversion of the moment model for the surface deflections.
#[allow(clippy::too_many_arguments)]
pub fn cascade_step(
    cascade: &mut CascadeState,
    plant: &PlantState,
    accel_cmd_o: &Vector3<f64>,
    force_setpoint: f64,
    aircraft: &AircraftParams,
    actuators: &ActuatorParams,
    gains: &ControllerGains,
    dt: f64,
) -> CascadeOutput {
    let m = &plant.measurements;
    let va = m.airspeed.max(1.0);
    let v_hat = m.air_velocity_o / va;
    let (chi_a, gamma_a) = crate::frames::course_and_path_angle(&m.air_velocity_o);
    let (y0, z0) = unbanked_axes(&v_hat);
    let a_perp = accel_cmd_o - v_hat * accel_cmd_o.dot(&v_hat);
    let nu_chi = a_perp.dot(&y0) / (va * gamma_a.cos().max(1e-3));
    let nu_gamma = -a_perp.dot(&z0) / va;
    let inv = InversionParams::new(aircraft, gains);
    let sp = attitude_setpoints(nu_chi, nu_gamma, chi_a, gamma_a, va, va, &plant.aircraft.position, force_setpoint, &inv);

    let mu_meas = measured_bank(plant);
    if !cascade.initialized {
        cascade.mu_ref = mu_meas;
        cascade.alpha_ref = m.alpha;
        cascade.initialized = true;
    }
    let mu_rate_ref = (gains.mu_bandwidth * angle_diff(sp.mu, cascade.mu_ref)).clamp(-gains.max_mu_rate, gains.max_mu_rate);
    cascade.mu_ref = angle_diff(cascade.mu_ref + mu_rate_ref * dt, 0.0);
    let alpha_rate_ref = gains.alpha_bandwidth * (sp.alpha - cascade.alpha_ref);
    cascade.alpha_ref += alpha_rate_ref * dt;

    let mu_dot = mu_rate_ref + gains.mu_gain * angle_diff(cascade.mu_ref, mu_meas);
    let alpha_dot = alpha_rate_ref + gains.alpha_gain * (cascade.alpha_ref - m.alpha);
    let beta_dot = -gains.beta_gain * m.beta;

    let q = &plant.aircraft.attitude;
    let omega_path_o = v_hat.cross(&a_perp) / va;
    let x_a_b = q.inverse_transform_vector(&v_hat);
    let rate_cmd = q.inverse_transform_vector(&omega_path_o) + x_a_b * mu_dot + Vector3::y() * alpha_dot
        - Vector3::z() * beta_dot;

    let surfaces = rate_inversion(&rate_cmd, plant, aircraft, actuators, gains);
    CascadeOutput {
        surface_commands_deg: surfaces,
        rate_command: rate_cmd,
        setpoints: sp,
        mu_measured: mu_meas,
    }
}

/// Surface deflections (deg) producing the moment that drives the body rates toward `rate_cmd`.
pub fn rate_inversion(
    rate_cmd: &Vector3<f64>,
    plant: &PlantState,
    aircraft: &AircraftParams,
    actuators: &ActuatorParams,
    gains: &ControllerGains,
) -> [f64; 3] {
    let m = &plant.measurements;
    let w = plant.aircraft.rates;
    let j = aircraft.inertia_matrix();
    let k = Vector3::from(gains.rate_gains);
    let omega_dot = k.component_mul(&(rate_cmd - w));
    let moment = j * omega_dot + w.cross(&(j * w));

    let c = &aircraft.aero;
    let va = m.airspeed.max(1.0);
    let qbar_s = 0.5 * aircraft.air_density * va * va * aircraft.wing_area;
    let (b, ch) = (aircraft.span, aircraft.chord);
    let p_hat = w.x * b / (2.0 * va);
    let q_hat = w.y * ch / (2.0 * va);
    let r_hat = w.z * b / (2.0 * va);
    let roll_rest = c.cl_beta * m.beta + c.cl_p * p_hat + c.cl_r * r_hat;
    let pitch_rest = c.cm0 + c.cm_alpha * m.alpha + c.cm_q * q_hat;
    let yaw_rest = c.cn_beta * m.beta + c.cn_p * p_hat + c.cn_r * r_hat;

    let need_roll = moment.x / (qbar_s * b) - roll_rest;
    let need_yaw = moment.z / (qbar_s * b) - yaw_rest;
    let lat = Matrix2::new(c.cl_da, c.cl_dr, c.cn_da, c.cn_dr);
    let [da, dr] = match lat.try_inverse() {
        Some(inv) => {
            let d = inv * Vector2::new(need_roll, need_yaw);
            [d.x, d.y]
        }
        None => [0.0, 0.0],
    };
    let de = (moment.y / (qbar_s * ch) - pitch_rest) / c.cm_de;
    let lim = actuators.deflection_limit;
    [
        da.to_degrees().clamp(-lim[0], lim[0]),
        de.to_degrees().clamp(-lim[1], lim[1]),
        dr.to_degrees().clamp(-lim[2], lim[2]),
    ]
}

/// Desired acceleration (O frame) for following a direction field.
///
/// `toward` is the unit direction the velocity should turn to; `feedforward` is added
/// perpendicular to the velocity.
fn heading_accel(v: &Vector3<f64>, toward: &Vector3<f64>, feedforward: &Vector3<f64>, gains: &ControllerGains) -> Vector3<f64> {
    let speed = v.norm();
    if speed < 1e-6 {
        return *feedforward;
    }
    let v_hat = v / speed;
    let axis = v_hat.cross(toward);
    let angle = axis.norm().atan2(v_hat.dot(toward));
    let lateral = toward - v_hat * v_hat.dot(toward);
    let dir = if lateral.norm() > 1e-9 {
        lateral.normalize()
    } else {
        // reversed heading: turn toward the feedforward side, else any perpendicular
        let ff = feedforward - v_hat * v_hat.dot(feedforward);
        if ff.norm() > 1e-9 {
            ff.normalize()
        } else {
            v_hat.cross(&Vector3::z()).normalize()
        }
    };
    let mut a = dir * (gains.heading_gain * speed * angle) + feedforward;
    let n = a.norm();
    if n > gains.max_lateral_accel {
        a *= gains.max_lateral_accel / n;
    }
    a
}

/// Events raised by one guidance update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GuidanceEvent {
    ModeChange { from: Mode, to: Mode },
    Avoidance(AvoidanceEvent),
    /// Avoidance cleared because retraction started.
    AvoidanceAborted,
    ClosestPointFallback,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceState {
    pub mode: Mode,
    pub s: f64,
    pub phi_r: f64,
    pub setpoint: SetpointState,
    pub tracker: HalfEightTracker,
    pub cascade: CascadeState,
    /// Retraction line start and end points (W frame).
    pub line: Option<(Vector3<f64>, Vector3<f64>)>,
    /// Path-following error (m): cross-track on the sphere or distance from the retraction line.
    pub path_error: f64,
    pub cycle_complete: bool,
}

/// Per-step guidance output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceOutput {
    pub surface_commands_deg: [f64; 3],
    pub force_setpoint: f64,
    pub accel_cmd_o: Vector3<f64>,
    pub setpoints: AttitudeSetpoints,
    pub mu_measured: f64,
}

pub struct GuidanceContext<'a> {
    pub config: &'a GuidanceConfig,
    pub aircraft: &'a AircraftParams,
    pub actuators: &'a ActuatorParams,
}

impl GuidanceState {
    /// Traction mode at path parameter `s` with the traction eight in place.
    pub fn traction_start(config: &GuidanceConfig, s: f64) -> Self {
        Self {
            mode: Mode::Traction,
            s,
            phi_r: config.shape.phi_set,
            setpoint: SetpointState {
                value: config.forces.traction,
                phase: AvoidancePhase::Inactive,
            },
            tracker: HalfEightTracker::default(),
            cascade: CascadeState::default(),
            line: None,
            path_error: 0.0,
            cycle_complete: false,
        }
    }

    fn mode_target(&self, forces: &ForceSetpoints) -> (f64, f64) {
        match self.mode {
            Mode::Traction => (forces.traction, forces.traction_bandwidth),
            Mode::Transition => (forces.traction, forces.transition_bandwidth),
            Mode::Retraction => (forces.retraction, forces.retraction_bandwidth),
        }
    }

    /// Updates only the tether force set point (avoidance logic), normally at the predictor rate.
    pub fn update_setpoint(&mut self, ctx: &GuidanceContext<'_>, y_hat: i8, measured_force: f64, dt: f64) -> Option<GuidanceEvent> {
        let forces = &ctx.config.forces;
        let (target, bw) = self.mode_target(forces);
        let y = if self.mode == Mode::Retraction { 1 } else { y_hat };
        let (next, event) = avoidance_step(&self.setpoint, y, measured_force, target, bw, forces, dt);
        self.setpoint = next;
        event.map(GuidanceEvent::Avoidance)
    }

    /// Path loop, mode logic and cascade at the control rate.
    pub fn step(&mut self, ctx: &GuidanceContext<'_>, plant: &PlantState, dt: f64, events: &mut Vec<GuidanceEvent>) -> GuidanceOutput {
        let cfg = ctx.config;
        let p_w = o_to_w(&plant.aircraft.position);
        let v_w = o_to_w(&plant.aircraft.velocity_o());
        let r = p_w.norm();
        let u = p_w / r;

        let accel_w = match self.mode {
            Mode::Traction | Mode::Transition => {
                let prev_s = self.s;
                let cp = closest_point_newton(&u, &cfg.shape, self.phi_r, self.s);
                if cp.fallback {
                    events.push(GuidanceEvent::ClosestPointFallback);
                }
                self.s = cp.s;
                let frame = path_frame(self.s, &cfg.shape, self.phi_r);

                if self.mode == Mode::Traction {
                    self.tracker.observe_length(plant.tether.length, &cfg.lengths);
                    let crossing = [FRAC_PI_2, 3.0 * FRAC_PI_2].iter().find(|&&pt| crossed(prev_s, self.s, pt)).copied();
                    if let Some(point) = crossing {
                        let length = plant.tether.length;
                        if retraction_trigger(&self.tracker, true, length, &cfg.lengths) {
                            self.start_retraction(cfg, &p_w, point, events);
                        }
                        self.tracker.record_crossing(length);
                    }
                } else {
                    let gap = arc_gap(&p_w, &frame.point);
                    self.phi_r = transition_filter_step(self.phi_r, gap, &cfg.shape, dt);
                    if self.phi_r - cfg.shape.phi_set < cfg.transition_exit_margin {
                        events.push(GuidanceEvent::ModeChange {
                            from: Mode::Transition,
                            to: Mode::Traction,
                        });
                        self.mode = Mode::Traction;
                        self.cycle_complete = true;
                    }
                }
                if self.mode == Mode::Retraction {
                    self.line_accel(&p_w, &v_w, &cfg.gains)
                } else {
                    self.sphere_accel(&frame, &p_w, &v_w, &cfg.gains)
                }
            }
            Mode::Retraction => {
                let accel = self.line_accel(&p_w, &v_w, &cfg.gains);
                let (a, b) = self.line.expect("retraction line set when retraction starts");
                let d = b - a;
                if (p_w - a).dot(&d) >= d.norm_squared() || plant.tether.length <= cfg.lengths.retraction_end {
                    self.start_transition(cfg, &u, events);
                }
                accel
            }
        };

        let accel_o = w_to_o(&accel_w);
        let out = cascade_step(
            &mut self.cascade,
            plant,
            &accel_o,
            self.setpoint.value,
            ctx.aircraft,
            ctx.actuators,
            &cfg.gains,
            dt,
        );
        GuidanceOutput {
            surface_commands_deg: out.surface_commands_deg,
            force_setpoint: self.setpoint.value,
            accel_cmd_o: accel_o,
            setpoints: out.setpoints,
            mu_measured: out.mu_measured,
        }
    }

    fn sphere_accel(&mut self, frame: &PathFrame, p_w: &Vector3<f64>, v_w: &Vector3<f64>, gains: &ControllerGains) -> Vector3<f64> {
        let r = p_w.norm();
        let u = p_w / r;
        let t = frame.point;
        let tangent = frame.tangent();
        let normal = t.cross(&tangent);
        let e = r * u.dot(&normal).clamp(-1.0, 1.0).asin();
        self.path_error = e;

        let v_t = v_w - u * u.dot(v_w);
        let speed = v_t.norm();
        // direction field on the tangent plane: along the path, bent toward it
        let offset = -gains.approach_angle * (2.0 / PI) * (e / gains.approach_distance).atan();
        let tangent_here = (tangent - u * u.dot(&tangent)).normalize();
        let normal_here = u.cross(&tangent_here);
        let toward = tangent_here * offset.cos() + normal_here * offset.sin();
        let ff = normal_here * (speed * speed * frame.geodesic_curvature() / r);
        let lateral = heading_accel(&v_t, &toward, &ff, gains);
        lateral - u * (speed * speed / r)
    }

    fn line_accel(&mut self, p_w: &Vector3<f64>, v_w: &Vector3<f64>, gains: &ControllerGains) -> Vector3<f64> {
        let (a, b) = self.line.expect("retraction line set when retraction starts");
        let d_hat = (b - a).normalize();
        let rel = p_w - a;
        let e_vec = rel - d_hat * rel.dot(&d_hat);
        let e = e_vec.norm();
        self.path_error = e;
        let offset = gains.approach_angle * (2.0 / PI) * (e / gains.approach_distance).atan();
        let toward = if e > 1e-9 {
            d_hat * offset.cos() - (e_vec / e) * offset.sin()
        } else {
            d_hat
        };
        heading_accel(v_w, &toward, &Vector3::zeros(), gains)
    }

    fn start_retraction(&mut self, cfg: &GuidanceConfig, p_w: &Vector3<f64>, point: f64, events: &mut Vec<GuidanceEvent>) {
        let waypoint = path_point_w(point, &cfg.shape, cfg.shape.phi_0) * cfg.lengths.retraction_end;
        self.line = Some((*p_w, waypoint));
        self.s = point;
        if self.setpoint.phase != AvoidancePhase::Inactive {
            self.setpoint.phase = AvoidancePhase::Inactive;
            events.push(GuidanceEvent::AvoidanceAborted);
        }
        events.push(GuidanceEvent::ModeChange {
            from: Mode::Traction,
            to: Mode::Retraction,
        });
        self.mode = Mode::Retraction;
    }

    fn start_transition(&mut self, cfg: &GuidanceConfig, u: &Vector3<f64>, events: &mut Vec<GuidanceEvent>) {
        self.phi_r = cfg.shape.phi_0;
        let s0 = grid_closest(u, &cfg.shape, self.phi_r, 64);
        self.s = newton_closest(u, &cfg.shape, self.phi_r, s0).unwrap_or(s0);
        self.line = None;
        events.push(GuidanceEvent::ModeChange {
            from: Mode::Retraction,
            to: Mode::Transition,
        });
        self.mode = Mode::Transition;
    }
}

/// Convenience used by trim and tests: measurements must be current.
pub fn is_degenerate(m: &PlantMeasurements) -> bool {
    m.degenerate_airflow || m.tether_collapsed
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn shape(a: f64, b: f64) -> PathShape {
        PathShape {
            a,
            b,
            ..Default::default()
        }
    }

    #[test]
    fn lemniscate_examples() {
        assert_eq!(lemniscate_point(0.0, 0.5, 0.3), (0.0, 0.0));
        let (l, f) = lemniscate_point(FRAC_PI_2, 0.5, 0.3);
        assert_relative_eq!(l, 0.3, epsilon = 1e-15);
        assert_relative_eq!(f, 0.0, epsilon = 1e-15);
        let (l, f) = lemniscate_point(PI / 4.0, 0.5, 0.5);
        assert_relative_eq!(l, 0.5 * (0.5f64).sqrt() / 1.5, epsilon = 1e-12);
        assert_relative_eq!(l, 0.2357, epsilon = 1e-4);
        assert_relative_eq!(f, 0.25 / 1.5, epsilon = 1e-12);
    }

    #[test]
    fn rotation_examples() {
        let sh = shape(0.6, 0.35);
        assert_relative_eq!(path_point_w(0.7, &sh, 0.0), spherical(lemniscate_point(0.7, 0.6, 0.35).0, lemniscate_point(0.7, 0.6, 0.35).1));
        let p = path_point_w(0.0, &sh, 30f64.to_radians());
        assert_relative_eq!(p, Vector3::new(30f64.to_radians().cos(), 0.0, 0.5), epsilon = 1e-12);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let sh = shape(0.7, 0.4);
        for &s in &[0.1, 0.9, 2.0, 3.5, 5.9] {
            let h = 1e-5;
            let f = path_frame(s, &sh, 0.4);
            let fp = path_frame(s + h, &sh, 0.4);
            let fm = path_frame(s - h, &sh, 0.4);
            assert_relative_eq!(f.point, path_point_w(s, &sh, 0.4), epsilon = 1e-14);
            assert_relative_eq!(f.d1, (fp.point - fm.point) / (2.0 * h), epsilon = 1e-8);
            assert_relative_eq!(f.d2, (fp.d1 - fm.d1) / (2.0 * h), epsilon = 1e-7);
        }
    }

    #[test]
    fn newton_on_path_point() {
        let sh = shape(0.6, 0.35);
        let u = path_point_w(1.0, &sh, 0.5);
        let cp = closest_point_newton(&u, &sh, 0.5, 0.9);
        assert_relative_eq!(cp.s, 1.0, epsilon = 1e-9);
        assert!(!cp.fallback);
    }

    #[test]
    fn newton_with_normal_perturbation_matches_fine_grid() {
        let sh = shape(0.6, 0.35);
        let f = path_frame(1.0, &sh, 0.5);
        let n = f.point.cross(&f.tangent());
        let u = (f.point + n * 1e-3).normalize();
        let cp = closest_point_newton(&u, &sh, 0.5, 0.95);
        // independent oracle: brute force at 1e-7 resolution around the estimate
        let mut best = (f64::NEG_INFINITY, 0.0);
        let mut s = 0.99;
        while s < 1.01 {
            let score = u.dot(&path_point_w(s, &sh, 0.5));
            if score > best.0 {
                best = (score, s);
            }
            s += 1e-7;
        }
        assert!((cp.s - best.1).abs() < 1e-6);
        assert!((cp.s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn newton_wraps_around() {
        let sh = shape(0.6, 0.35);
        let u = path_point_w(0.05, &sh, 0.3);
        let cp = closest_point_newton(&u, &sh, 0.3, 6.2);
        assert_relative_eq!(angle_diff(cp.s, 0.05), 0.0, epsilon = 1e-9);
        assert!((0.0..TAU).contains(&cp.s));
    }

    #[test]
    fn transition_filter_examples() {
        let sh = PathShape {
            phi_set: 25f64.to_radians(),
            phi_0: 75f64.to_radians(),
            omega_r: 0.05,
            ..Default::default()
        };
        let phi = 70f64.to_radians();
        assert_eq!(transition_filter_step(phi, 2f64.to_radians(), &sh, 0.1), phi);
        assert_relative_eq!(transition_filter_step(phi, 0.0, &sh, 0.1).to_degrees(), 69.775, epsilon = 1e-9);
        let mut p = sh.phi_0;
        for _ in 0..100_000 {
            p = transition_filter_step(p, 0.0, &sh, 0.1);
        }
        assert_relative_eq!(p, sh.phi_set, epsilon = 1e-9);
    }

    #[test]
    fn arc_gap_examples() {
        let at = |deg: f64| Vector3::new(deg.to_radians().cos(), 0.0, deg.to_radians().sin());
        assert_relative_eq!(arc_gap(&at(30.0), &at(30.0)), 0.0);
        assert_relative_eq!(arc_gap(&at(40.0), &at(30.0)).to_degrees(), 10.0, epsilon = 1e-10);
        assert_eq!(elevation_w(&Vector3::new(0.0, 0.0, 5.0)), FRAC_PI_2);
    }

    #[test]
    fn retraction_trigger_rules() {
        let lengths = TetherLengths::default();
        let mut tr = HalfEightTracker::default();
        assert!(!retraction_trigger(&tr, true, lengths.trigger - 1.0, &lengths));
        assert!(retraction_trigger(&tr, true, lengths.trigger, &lengths));
        assert!(!retraction_trigger(&tr, false, lengths.trigger, &lengths));
        tr.record_crossing(lengths.hard_max - 13.0);
        tr.record_crossing(lengths.hard_max - 5.0);
        assert_eq!(tr.increment, Some(8.0));
        let early = TetherLengths {
            trigger: lengths.hard_max,
            ..lengths
        };
        assert!(retraction_trigger(&tr, true, early.hard_max - 5.0, &early));
    }

    #[test]
    fn trigger_length_latches_until_crossing() {
        let lengths = TetherLengths::default();
        let mut tr = HalfEightTracker::default();
        tr.observe_length(lengths.trigger + 0.5, &lengths);
        assert!(!retraction_trigger(&tr, false, lengths.trigger + 0.5, &lengths));
        tr.observe_length(lengths.trigger - 4.0, &lengths);
        assert!(retraction_trigger(&tr, true, lengths.trigger - 4.0, &lengths));
    }

    #[test]
    fn crossing_detection() {
        assert!(crossed(1.5, 1.6, FRAC_PI_2));
        assert!(!crossed(1.6, 1.5, FRAC_PI_2));
        assert!(crossed(6.2, 0.1, 0.05));
        assert!(!crossed(0.1, 0.2, FRAC_PI_2));
    }

    fn inversion() -> InversionParams {
        InversionParams::new(&AircraftParams::default(), &ControllerGains::default())
    }

    #[test]
    fn level_flight_inversion() {
        let p = inversion();
        let va = 25.0;
        let sp = attitude_setpoints(0.0, 0.0, 0.3, 0.0, va, va, &Vector3::new(100.0, 0.0, -50.0), 0.0, &p);
        assert_relative_eq!(sp.f_y, 0.0);
        assert_relative_eq!(sp.f_z, p.mass * p.gravity);
        assert_relative_eq!(sp.mu, 0.0);
        assert_relative_eq!(sp.cl, p.mass * p.gravity / (0.5 * p.air_density * va * va * p.wing_area), epsilon = 1e-12);
    }

    #[test]
    fn downwind_tether_force_is_radial() {
        let p = inversion();
        let base = attitude_setpoints(0.0, 0.0, 0.0, 0.0, 25.0, 25.0, &Vector3::new(100.0, 0.0, 0.0), 0.0, &p);
        let with = attitude_setpoints(0.0, 0.0, 0.0, 0.0, 25.0, 25.0, &Vector3::new(100.0, 0.0, 0.0), 100.0, &p);
        assert_relative_eq!(with.f_z, base.f_z, epsilon = 1e-12);
        assert_relative_eq!(with.f_y, 0.0, epsilon = 1e-12);
        let f_t = -(m_ko(0.0, 0.0) * Vector3::x()) * 100.0;
        assert_relative_eq!(f_t, Vector3::new(-100.0, 0.0, 0.0));
    }

    #[test]
    fn positive_course_rate_banks_right() {
        let p = inversion();
        let sp = attitude_setpoints(0.2, 0.0, 0.0, 0.0, 25.0, 25.0, &Vector3::new(100.0, 0.0, -50.0), 0.0, &p);
        assert!(sp.mu > 0.0);
    }

    #[test]
    fn avoidance_setpoint_logic() {
        let f = ForceSetpoints {
            rearm_factor: 1.2,
            ..ForceSetpoints::default()
        };
        let mut st = SetpointState {
            value: f.traction,
            phase: AvoidancePhase::Inactive,
        };
        for _ in 0..100 {
            st = avoidance_step(&st, 1, 1500.0, f.traction, f.traction_bandwidth, &f, 0.1).0;
        }
        assert_eq!(st.value, f.traction);
        let (st2, ev) = avoidance_step(&st, -1, 1900.0, f.traction, f.traction_bandwidth, &f, 0.1);
        assert_eq!(ev, Some(AvoidanceEvent::Triggered));
        assert_eq!(st2.phase, AvoidancePhase::Reducing);
        let mut st3 = st2;
        for _ in 0..200 {
            st3 = avoidance_step(&st3, -1, 500.0, f.traction, f.traction_bandwidth, &f, 0.1).0;
        }
        assert_relative_eq!(st3.value, f.avoidance, epsilon = 1e-6);
        let (st4, ev) = avoidance_step(&st3, 1, 13.0, f.traction, f.traction_bandwidth, &f, 0.1);
        assert_eq!(ev, None);
        assert_eq!(st4.phase, AvoidancePhase::Reducing);
        let (mut st5, ev) = avoidance_step(&st4, 1, 11.0, f.traction, f.traction_bandwidth, &f, 0.1);
        assert_eq!(ev, Some(AvoidanceEvent::Rearmed));
        let mut completed = false;
        for _ in 0..1000 {
            let (n, ev) = avoidance_step(&st5, 1, 11.0, f.traction, f.traction_bandwidth, &f, 0.1);
            st5 = n;
            if ev == Some(AvoidanceEvent::Completed) {
                completed = true;
                assert!(st5.value >= 0.9 * f.traction);
                break;
            }
        }
        assert!(completed);
    }
}
