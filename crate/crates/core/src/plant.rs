//! Aircraft, actuator, tether and winch dynamics.
//!
//! The aircraft is a 6-DOF rigid body with a linear-coefficient aerodynamic model. The
//! tether is a chain of point masses joined by tension-only spring-damper segments; the
//! last segment ends at the aircraft center of gravity. Continuous states are advanced
//! with classical RK4, actuators and the winch with their own discrete laws.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Airspeeds at or below this value are treated as degenerate airflow (m/s).
pub const MIN_AIRSPEED: f64 = 0.5;
/// Segments shorter than this count as a collapsed tether node (m).
pub const MIN_SEGMENT_LENGTH: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AeroCoefficients {
    pub cl0: f64,
    pub cl_alpha: f64,
    pub cd0: f64,
    pub k_induced: f64,
    pub cy_beta: f64,
    pub cy_dr: f64,
    pub cl_beta: f64,
    pub cl_p: f64,
    pub cl_r: f64,
    pub cl_da: f64,
    pub cl_dr: f64,
    pub cm0: f64,
    pub cm_alpha: f64,
    pub cm_q: f64,
    pub cm_de: f64,
    pub cn_beta: f64,
    pub cn_p: f64,
    pub cn_r: f64,
    pub cn_da: f64,
    pub cn_dr: f64,
}

impl Default for AeroCoefficients {
    fn default() -> Self {
        Self {
            cl0: 0.5,
            cl_alpha: 5.0,
            cd0: 0.04,
            k_induced: 0.04,
            cy_beta: -0.3,
            cy_dr: 0.1,
            cl_beta: -0.05,
            cl_p: -0.5,
            cl_r: 0.1,
            cl_da: 0.3,
            cl_dr: 0.005,
            cm0: 0.05,
            cm_alpha: -0.8,
            cm_q: -12.0,
            cm_de: -1.0,
            cn_beta: 0.08,
            cn_p: -0.05,
            cn_r: -0.08,
            cn_da: -0.01,
            cn_dr: -0.06,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AircraftParams {
    pub mass: f64,
    /// Inertia tensor in body axes (kg m^2), row major.
    pub inertia: [[f64; 3]; 3],
    pub wing_area: f64,
    pub span: f64,
    pub chord: f64,
    pub air_density: f64,
    pub gravity: f64,
    pub aero: AeroCoefficients,
}

impl Default for AircraftParams {
    fn default() -> Self {
        Self {
            mass: 35.0,
            inertia: [[25.0, 0.0, -0.47], [0.0, 32.0, 0.0], [-0.47, 0.0, 56.0]],
            wing_area: 3.0,
            span: 5.5,
            chord: 0.55,
            air_density: 1.225,
            gravity: 9.81,
            aero: AeroCoefficients::default(),
        }
    }
}

impl AircraftParams {
    pub fn inertia_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.inertia[i][j])
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mass > 0.0) {
            return Err(Error::config("aircraft mass must be > 0"));
        }
        if !(self.wing_area > 0.0 && self.span > 0.0 && self.chord > 0.0) {
            return Err(Error::config("wing area, span and chord must be > 0"));
        }
        if !(self.air_density > 0.0) {
            return Err(Error::config("air density must be > 0"));
        }
        let j = self.inertia_matrix();
        if (j - j.transpose()).abs().max() > 1e-12 {
            return Err(Error::config("inertia tensor must be symmetric"));
        }
        if j.cholesky().is_none() {
            return Err(Error::config("inertia tensor must be positive definite"));
        }
        Ok(())
    }
}

/// Rigid-body state: position in O, kinematic velocity and body rates in B.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AircraftState {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    /// Rotation taking body components into O components.
    pub attitude: UnitQuaternion<f64>,
    pub rates: Vector3<f64>,
}

impl AircraftState {
    pub fn velocity_o(&self) -> Vector3<f64> {
        self.attitude * self.velocity
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|x| x.is_finite())
            && self.velocity.iter().all(|x| x.is_finite())
            && self.attitude.coords.iter().all(|x| x.is_finite())
            && self.rates.iter().all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AircraftDerivative {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub attitude: Quaternion<f64>,
    pub rates: Vector3<f64>,
}

/// Rigid-body equations of motion. Force and moment inputs are in body axes.
pub fn aircraft_derivatives(
    state: &AircraftState,
    params: &AircraftParams,
    force_b: &Vector3<f64>,
    moment_b: &Vector3<f64>,
) -> AircraftDerivative {
    let j = params.inertia_matrix();
    let j_inv = j.try_inverse().expect("inertia validated at load time");
    let w = state.rates;
    let omega_q = Quaternion::new(0.0, w.x, w.y, w.z);
    AircraftDerivative {
        position: state.attitude * state.velocity,
        velocity: -w.cross(&state.velocity) + force_b / params.mass,
        attitude: state.attitude.into_inner() * omega_q * 0.5,
        rates: -(j_inv * (w.cross(&(j * w)) - moment_b)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AeroOutput {
    pub force_b: Vector3<f64>,
    pub moment_b: Vector3<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub airspeed: f64,
    /// Air velocity (aircraft velocity minus wind) in body axes.
    pub air_velocity_b: Vector3<f64>,
    pub degenerate: bool,
}

/// Aerodynamic loads for the given wind (O frame) and surface deflections (rad, a/e/r).
pub fn aero_forces(
    state: &AircraftState,
    params: &AircraftParams,
    wind_o: &Vector3<f64>,
    deflections: &[f64; 3],
) -> AeroOutput {
    let va_b = state.velocity - state.attitude.inverse_transform_vector(wind_o);
    let airspeed = va_b.norm();
    if airspeed <= MIN_AIRSPEED || !airspeed.is_finite() {
        return AeroOutput {
            force_b: Vector3::zeros(),
            moment_b: Vector3::zeros(),
            alpha: 0.0,
            beta: 0.0,
            airspeed,
            air_velocity_b: va_b,
            degenerate: true,
        };
    }
    let c = &params.aero;
    let alpha = va_b.z.atan2(va_b.x);
    let beta = (va_b.y / airspeed).clamp(-1.0, 1.0).asin();
    let [da, de, dr] = *deflections;

    let qbar_s = 0.5 * params.air_density * airspeed * airspeed * params.wing_area;
    let cl = c.cl0 + c.cl_alpha * alpha;
    let cd = c.cd0 + c.k_induced * cl * cl;
    let cy = c.cy_beta * beta + c.cy_dr * dr;

    let v_hat = va_b / airspeed;
    let lift_dir = Vector3::y().cross(&v_hat).normalize();
    let side_dir = v_hat.cross(&lift_dir);
    let force_b = qbar_s * (-cd * v_hat + cy * side_dir + cl * lift_dir);

    let w = state.rates;
    let p_hat = w.x * params.span / (2.0 * airspeed);
    let q_hat = w.y * params.chord / (2.0 * airspeed);
    let r_hat = w.z * params.span / (2.0 * airspeed);
    let roll = c.cl_beta * beta + c.cl_p * p_hat + c.cl_r * r_hat + c.cl_da * da + c.cl_dr * dr;
    let pitch = c.cm0 + c.cm_alpha * alpha + c.cm_q * q_hat + c.cm_de * de;
    let yaw = c.cn_beta * beta + c.cn_p * p_hat + c.cn_r * r_hat + c.cn_da * da + c.cn_dr * dr;
    let moment_b = qbar_s
        * Vector3::new(params.span * roll, params.chord * pitch, params.span * yaw);

    AeroOutput {
        force_b,
        moment_b,
        alpha,
        beta,
        airspeed,
        air_velocity_b: va_b,
        degenerate: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActuatorParams {
    /// Bandwidths for aileron, elevator, rudder (rad/s).
    pub bandwidth: [f64; 3],
    /// Symmetric deflection limits (deg).
    pub deflection_limit: [f64; 3],
    /// Symmetric rate limits (deg/s).
    pub rate_limit: [f64; 3],
}

impl Default for ActuatorParams {
    fn default() -> Self {
        Self {
            bandwidth: [35.0; 3],
            deflection_limit: [20.0, 20.0, 30.0],
            rate_limit: [115.0; 3],
        }
    }
}

impl ActuatorParams {
    pub fn validate(&self) -> Result<()> {
        if self.bandwidth.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::config("actuator bandwidths must be > 0"));
        }
        if self.deflection_limit.iter().chain(&self.rate_limit).any(|l| !(*l > 0.0)) {
            return Err(Error::config("actuator limits must be > 0"));
        }
        Ok(())
    }
}

/// Surface deflections (deg) for aileron, elevator, rudder plus the rate of the last step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ActuatorBank {
    pub deflection: [f64; 3],
    pub rate: [f64; 3],
}

impl ActuatorBank {
    pub fn radians(&self) -> [f64; 3] {
        self.deflection.map(f64::to_radians)
    }
}

/// First-order lag toward the (clamped) command with rate and deflection saturation.
pub fn actuator_step(bank: &ActuatorBank, params: &ActuatorParams, commands_deg: &[f64; 3], dt: f64) -> ActuatorBank {
    let mut next = *bank;
    for i in 0..3 {
        let lim = params.deflection_limit[i];
        let cmd = commands_deg[i].clamp(-lim, lim);
        let max_move = params.rate_limit[i] * dt;
        let step = (params.bandwidth[i] * (cmd - bank.deflection[i]) * dt).clamp(-max_move, max_move);
        next.deflection[i] = (bank.deflection[i] + step).clamp(-lim, lim);
        next.rate[i] = (next.deflection[i] - bank.deflection[i]) / dt;
    }
    next
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TetherParams {
    /// Number of segments; the aircraft is the last of the `segments` nodes.
    pub segments: usize,
    /// Linear mass density (kg/m).
    pub linear_density: f64,
    pub diameter: f64,
    pub drag_coefficient: f64,
    /// Segment stiffness at `reference_length` (N/m).
    pub stiffness: f64,
    /// Segment damping at `reference_length` (N s/m).
    pub damping: f64,
    /// Unstretched length at which `stiffness` and `damping` apply (m).
    pub reference_length: f64,
}

impl Default for TetherParams {
    fn default() -> Self {
        Self {
            segments: 5,
            linear_density: 0.0046,
            diameter: 0.0025,
            drag_coefficient: 1.2,
            stiffness: 10243.0,
            damping: 7.8833,
            reference_length: 10.0,
        }
    }
}

impl TetherParams {
    pub fn validate(&self) -> Result<()> {
        if self.segments < 1 {
            return Err(Error::config("tether needs at least one segment"));
        }
        if !(self.stiffness > 0.0) || !(self.damping >= 0.0) {
            return Err(Error::config("tether stiffness must be > 0 and damping >= 0"));
        }
        if !(self.linear_density > 0.0 && self.diameter > 0.0 && self.drag_coefficient >= 0.0) {
            return Err(Error::config("tether density and diameter must be > 0"));
        }
        if !(self.reference_length > 0.0) {
            return Err(Error::config("tether reference length must be > 0"));
        }
        Ok(())
    }

    pub fn segment_stiffness(&self, segment_length: f64) -> f64 {
        self.stiffness * self.reference_length / segment_length
    }

    pub fn segment_damping(&self, segment_length: f64) -> f64 {
        self.damping * self.reference_length / segment_length
    }
}

/// Free tether nodes ordered from the ground station outwards (O frame).
#[derive(Debug, Clone, PartialEq)]
pub struct TetherState {
    pub positions: Vec<Vector3<f64>>,
    pub velocities: Vec<Vector3<f64>>,
    /// Unstretched length (m).
    pub length: f64,
}

impl TetherState {
    /// Nodes including the aircraft attachment node.
    pub fn node_count(&self) -> usize {
        self.positions.len() + 1
    }

    /// Straight tether from `anchor` to `attachment` with uniform node spacing and
    /// velocities interpolated linearly from zero at the anchor.
    pub fn straight(
        anchor: &Vector3<f64>,
        attachment: &Vector3<f64>,
        attachment_velocity: &Vector3<f64>,
        segments: usize,
        length: f64,
    ) -> Self {
        let positions = (1..segments)
            .map(|i| anchor + (attachment - anchor) * (i as f64 / segments as f64))
            .collect();
        let velocities = (1..segments)
            .map(|i| attachment_velocity * (i as f64 / segments as f64))
            .collect();
        Self {
            positions,
            velocities,
            length,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TetherLoads {
    /// Net force on each free node including gravity and drag (N, O frame).
    pub node_forces: Vec<Vector3<f64>>,
    /// Force the tether exerts on the aircraft (N, O frame).
    pub aircraft_force: Vector3<f64>,
    /// Tension of the segment attached to the aircraft (N).
    pub tension_aircraft: f64,
    /// Tension of the segment attached to the ground station (N).
    pub tension_ground: f64,
    pub collapsed: bool,
}

/// Environment quantities the tether needs besides its own state.
#[derive(Clone, Copy)]
pub struct TetherEnvironment<'a> {
    pub air_density: f64,
    pub gravity: f64,
    /// Wind in O as a function of altitude (m, positive up).
    pub wind_o: &'a dyn Fn(f64) -> Vector3<f64>,
}

pub fn tether_forces(
    tether: &TetherState,
    params: &TetherParams,
    env: &TetherEnvironment<'_>,
    anchor: &Vector3<f64>,
    attachment: &Vector3<f64>,
    attachment_velocity: &Vector3<f64>,
    length_rate: f64,
) -> TetherLoads {
    let n = params.segments;
    let seg_len = tether.length / n as f64;
    let seg_rate = length_rate / n as f64;
    let c = params.segment_stiffness(seg_len);
    let d = params.segment_damping(seg_len);
    let node_mass = params.linear_density * seg_len;

    let point = |i: usize| -> (Vector3<f64>, Vector3<f64>) {
        if i == 0 {
            (*anchor, Vector3::zeros())
        } else if i == n {
            (*attachment, *attachment_velocity)
        } else {
            (tether.positions[i - 1], tether.velocities[i - 1])
        }
    };

    let mut node_forces = vec![Vector3::new(0.0, 0.0, node_mass * env.gravity); n - 1];
    let mut aircraft_force = Vector3::zeros();
    let mut tension_aircraft = 0.0;
    let mut tension_ground = 0.0;
    let mut collapsed = seg_len < MIN_SEGMENT_LENGTH;

    for k in 0..n {
        let (p0, v0) = point(k);
        let (p1, v1) = point(k + 1);
        let delta = p1 - p0;
        let dist = delta.norm();
        if dist < MIN_SEGMENT_LENGTH {
            collapsed = true;
            continue;
        }
        let e = delta / dist;
        let rel_v = v1 - v0;
        let stretch = dist - seg_len;
        let tension = if stretch > 0.0 {
            (c * stretch + d * (rel_v.dot(&e) - seg_rate)).max(0.0)
        } else {
            0.0
        };
        if k == 0 {
            tension_ground = tension;
        }
        if k == n - 1 {
            tension_aircraft = tension;
        }

        // cross-flow drag on the segment, shared equally by its end points
        let mid_v = 0.5 * (v0 + v1);
        let mid_z = -0.5 * (p0.z + p1.z);
        let app = mid_v - (env.wind_o)(mid_z);
        let perp = app - e * app.dot(&e);
        let drag = -0.5 * env.air_density * params.drag_coefficient * params.diameter * dist * perp.norm() * perp;

        let pull = e * tension;
        if k >= 1 {
            node_forces[k - 1] += pull + 0.5 * drag;
        }
        if k + 1 < n {
            node_forces[k] += -pull + 0.5 * drag;
        } else {
            aircraft_force += -pull + 0.5 * drag;
        }
    }

    TetherLoads {
        node_forces,
        aircraft_force,
        tension_aircraft,
        tension_ground,
        collapsed,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WinchParams {
    pub inertia: f64,
    pub friction: f64,
    pub accel_min: f64,
    pub accel_max: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    pub kp: f64,
    pub ki: f64,
    pub drum_radius: f64,
}

impl Default for WinchParams {
    fn default() -> Self {
        Self {
            inertia: 0.08,
            friction: 0.6,
            accel_min: -5.0,
            accel_max: 5.0,
            speed_min: -15.0,
            speed_max: 20.0,
            kp: 0.5,
            ki: 0.5,
            drum_radius: 0.1,
        }
    }
}

impl WinchParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.inertia > 0.0 && self.friction >= 0.0 && self.drum_radius > 0.0) {
            return Err(Error::config("winch inertia and drum radius must be > 0"));
        }
        if !(self.accel_min < self.accel_max && self.speed_min < self.speed_max) {
            return Err(Error::config("winch limits must satisfy min < max"));
        }
        Ok(())
    }
}

/// Drum speed (reel-out positive), PI integrator state and last commanded acceleration.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct WinchState {
    pub speed: f64,
    pub integrator: f64,
    pub acceleration: f64,
}

impl WinchState {
    /// State holding `speed` in equilibrium at zero force error.
    pub fn steady(params: &WinchParams, speed: f64) -> Self {
        let r = params.drum_radius;
        let integrator = if params.ki > 0.0 {
            params.friction * speed / (r * r * params.ki)
        } else {
            0.0
        };
        Self {
            speed,
            integrator,
            acceleration: 0.0,
        }
    }
}

/// PI force loop producing a reference torque, drum torque balance, then saturation.
pub fn winch_step(winch: &WinchState, params: &WinchParams, force_ground: f64, force_set: f64, dt: f64) -> WinchState {
    let r = params.drum_radius;
    let error = force_ground - force_set;
    let torque_of = |integrator: f64| r * (params.kp * error + params.ki * integrator);
    let accel_of = |torque: f64| (r * torque - params.friction * winch.speed) / params.inertia;

    let trial_integrator = winch.integrator + error * dt;
    let raw = accel_of(torque_of(trial_integrator));
    let accel = raw.clamp(params.accel_min, params.accel_max);
    let unclamped_speed = winch.speed + accel * dt;
    let speed = unclamped_speed.clamp(params.speed_min, params.speed_max);

    let accel_saturated = raw != accel && error * raw > 0.0;
    let speed_saturated = speed != unclamped_speed && error * accel > 0.0;
    let integrator = if accel_saturated || speed_saturated {
        winch.integrator
    } else {
        trial_integrator
    };
    WinchState {
        speed,
        integrator,
        acceleration: (speed - winch.speed) / dt,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantParams {
    #[serde(default)]
    pub aircraft: AircraftParams,
    #[serde(default)]
    pub actuators: ActuatorParams,
    #[serde(default)]
    pub tether: TetherParams,
    #[serde(default)]
    pub winch: WinchParams,
}

impl PlantParams {
    pub fn validate(&self) -> Result<()> {
        self.aircraft.validate()?;
        self.actuators.validate()?;
        self.tether.validate()?;
        self.winch.validate()
    }
}

/// Quantities evaluated at the current plant state, used by guidance and logging.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PlantMeasurements {
    pub alpha: f64,
    pub beta: f64,
    pub airspeed: f64,
    /// Air velocity in O (m/s).
    pub air_velocity_o: Vector3<f64>,
    /// Wind at the aircraft in O (m/s).
    pub wind_o: Vector3<f64>,
    pub tension_aircraft: f64,
    pub tension_ground: f64,
    /// Kinematic acceleration of the aircraft in O (m/s^2).
    pub acceleration_o: Vector3<f64>,
    pub degenerate_airflow: bool,
    pub tether_collapsed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    pub aircraft: AircraftState,
    pub tether: TetherState,
    pub winch: WinchState,
    pub actuators: ActuatorBank,
    pub measurements: PlantMeasurements,
}

impl PlantState {
    pub fn is_finite(&self) -> bool {
        self.aircraft.is_finite()
            && self.tether.length.is_finite()
            && self
                .tether
                .positions
                .iter()
                .chain(&self.tether.velocities)
                .all(|v| v.iter().all(|x| x.is_finite()))
            && self.winch.speed.is_finite()
    }
}

/// Per-step inputs held constant over one integrator step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantInputs {
    pub surface_commands_deg: [f64; 3],
    pub tether_force_setpoint: f64,
}

#[derive(Clone)]
struct Continuous {
    aircraft: AircraftState,
    raw_attitude: Quaternion<f64>,
    positions: Vec<Vector3<f64>>,
    velocities: Vec<Vector3<f64>>,
    length: f64,
}

struct ContinuousDerivative {
    aircraft: AircraftDerivative,
    positions: Vec<Vector3<f64>>,
    velocities: Vec<Vector3<f64>>,
    length: f64,
}

impl Continuous {
    fn from_state(s: &PlantState) -> Self {
        Self {
            aircraft: s.aircraft,
            raw_attitude: s.aircraft.attitude.into_inner(),
            positions: s.tether.positions.clone(),
            velocities: s.tether.velocities.clone(),
            length: s.tether.length,
        }
    }

    fn offset(&self, d: &ContinuousDerivative, h: f64) -> Self {
        let raw = self.raw_attitude + d.aircraft.attitude * h;
        let aircraft = AircraftState {
            position: self.aircraft.position + d.aircraft.position * h,
            velocity: self.aircraft.velocity + d.aircraft.velocity * h,
            attitude: UnitQuaternion::new_normalize(raw),
            rates: self.aircraft.rates + d.aircraft.rates * h,
        };
        Self {
            aircraft,
            raw_attitude: raw,
            positions: self.positions.iter().zip(&d.positions).map(|(p, dp)| p + dp * h).collect(),
            velocities: self.velocities.iter().zip(&d.velocities).map(|(v, dv)| v + dv * h).collect(),
            length: self.length + d.length * h,
        }
    }
}

/// Time-parameterized wind source used by the integrator: `(t, altitude) -> wind in O`.
pub trait WindSource {
    fn wind_o(&self, t: f64, altitude: f64) -> Vector3<f64>;
}

impl WindSource for crate::windfield::WindField {
    fn wind_o(&self, t: f64, altitude: f64) -> Vector3<f64> {
        crate::frames::w_to_o(&self.at(t, altitude))
    }
}

fn evaluate(
    x: &Continuous,
    params: &PlantParams,
    deflections: &[f64; 3],
    reel_speed: f64,
    wind: &dyn WindSource,
    t: f64,
) -> (ContinuousDerivative, PlantMeasurements) {
    let ac = &x.aircraft;
    let altitude = -ac.position.z;
    let wind_o = wind.wind_o(t, altitude);
    let aero = aero_forces(ac, &params.aircraft, &wind_o, deflections);

    let tether_wind = |z: f64| wind.wind_o(t, z);
    let env = TetherEnvironment {
        air_density: params.aircraft.air_density,
        gravity: params.aircraft.gravity,
        wind_o: &tether_wind,
    };
    let tether = TetherState {
        positions: x.positions.clone(),
        velocities: x.velocities.clone(),
        length: x.length,
    };
    let v_o = ac.velocity_o();
    let loads = tether_forces(&tether, &params.tether, &env, &Vector3::zeros(), &ac.position, &v_o, reel_speed);

    let m = params.aircraft.mass;
    let gravity_b = ac
        .attitude
        .inverse_transform_vector(&Vector3::new(0.0, 0.0, m * params.aircraft.gravity));
    let tether_b = ac.attitude.inverse_transform_vector(&loads.aircraft_force);
    let force_b = aero.force_b + gravity_b + tether_b;
    let aircraft = aircraft_derivatives(ac, &params.aircraft, &force_b, &aero.moment_b);

    let node_mass = params.tether.linear_density * x.length / params.tether.segments as f64;
    let measurements = PlantMeasurements {
        alpha: aero.alpha,
        beta: aero.beta,
        airspeed: aero.airspeed,
        air_velocity_o: ac.attitude * aero.air_velocity_b,
        wind_o,
        tension_aircraft: loads.tension_aircraft,
        tension_ground: loads.tension_ground,
        acceleration_o: ac.attitude * (force_b / m),
        degenerate_airflow: aero.degenerate,
        tether_collapsed: loads.collapsed,
    };
    let derivative = ContinuousDerivative {
        aircraft,
        positions: x.velocities.clone(),
        velocities: loads.node_forces.iter().map(|f| f / node_mass).collect(),
        length: reel_speed,
    };
    (derivative, measurements)
}

/// Fills `measurements` for a freshly constructed state.
pub fn measure(state: &PlantState, params: &PlantParams, wind: &dyn WindSource, t: f64) -> PlantMeasurements {
    let x = Continuous::from_state(state);
    evaluate(&x, params, &state.actuators.radians(), state.winch.speed, wind, t).1
}

/// Advances the plant by one fixed step of length `dt` starting at time `t`.
///
/// The winch reacts to the ground tension measured at the start of the step, actuators
/// move toward their commands, then the continuous states are advanced with RK4.
pub fn integrate_step(
    state: &PlantState,
    params: &PlantParams,
    inputs: &PlantInputs,
    wind: &dyn WindSource,
    t: f64,
    dt: f64,
) -> Result<PlantState> {
    let winch = winch_step(
        &state.winch,
        &params.winch,
        state.measurements.tension_ground,
        inputs.tether_force_setpoint,
        dt,
    );
    let actuators = actuator_step(&state.actuators, &params.actuators, &inputs.surface_commands_deg, dt);
    let defl = actuators.radians();
    let v = winch.speed;

    let x0 = Continuous::from_state(state);
    let (k1, _) = evaluate(&x0, params, &defl, v, wind, t);
    let x1 = x0.offset(&k1, 0.5 * dt);
    let (k2, _) = evaluate(&x1, params, &defl, v, wind, t + 0.5 * dt);
    let x2 = x0.offset(&k2, 0.5 * dt);
    let (k3, _) = evaluate(&x2, params, &defl, v, wind, t + 0.5 * dt);
    let x3 = x0.offset(&k3, dt);
    let (k4, _) = evaluate(&x3, params, &defl, v, wind, t + dt);

    let combine = |a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>, d: &Vector3<f64>| (a + 2.0 * b + 2.0 * c + d) / 6.0;
    let ad = AircraftDerivative {
        position: combine(&k1.aircraft.position, &k2.aircraft.position, &k3.aircraft.position, &k4.aircraft.position),
        velocity: combine(&k1.aircraft.velocity, &k2.aircraft.velocity, &k3.aircraft.velocity, &k4.aircraft.velocity),
        attitude: (k1.aircraft.attitude + k2.aircraft.attitude * 2.0 + k3.aircraft.attitude * 2.0 + k4.aircraft.attitude) / 6.0,
        rates: combine(&k1.aircraft.rates, &k2.aircraft.rates, &k3.aircraft.rates, &k4.aircraft.rates),
    };
    let nodes = k1.positions.len();
    let avg = ContinuousDerivative {
        aircraft: ad,
        positions: (0..nodes)
            .map(|i| combine(&k1.positions[i], &k2.positions[i], &k3.positions[i], &k4.positions[i]))
            .collect(),
        velocities: (0..nodes)
            .map(|i| combine(&k1.velocities[i], &k2.velocities[i], &k3.velocities[i], &k4.velocities[i]))
            .collect(),
        length: v,
    };
    let xn = x0.offset(&avg, dt);

    let mut next = PlantState {
        aircraft: xn.aircraft,
        tether: TetherState {
            positions: xn.positions.clone(),
            velocities: xn.velocities.clone(),
            length: xn.length,
        },
        winch,
        actuators,
        measurements: PlantMeasurements::default(),
    };
    if !next.is_finite() {
        return Err(Error::Numerical(format!("non-finite plant state at t = {:.2} s", t + dt)));
    }
    if next.tether.length <= 0.0 {
        return Err(Error::Numerical("tether length reached zero".into()));
    }
    next.measurements = evaluate(&xn, params, &defl, v, wind, t + dt).1;
    Ok(next)
}
