//! Mean wind shear plus single-point Dryden turbulence.
//!
//! The turbulence generator is a bank of linear shaping filters (first order for the
//! longitudinal axis, second order for the lateral and vertical axes) discretized with
//! an exact zero-order hold at the noise sample rate. A [`NoiseSeedVector`] drives all
//! three axes, interleaved per time step as `[u0, v0, w0, u1, v1, w1, ...]`.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of turbulence channels carried by a noise vector (u, v, w).
pub const TURBULENCE_CHANNELS: usize = 3;

/// Power-law mean wind profile along the `x_W` axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShearProfile {
    /// Wind speed at the reference altitude (m/s).
    pub v_ref: f64,
    /// Reference altitude (m).
    pub z_ref: f64,
    pub exponent: f64,
    /// Altitudes below this are evaluated at `z_floor` (m).
    pub z_floor: f64,
}

impl Default for ShearProfile {
    fn default() -> Self {
        Self {
            v_ref: 10.0,
            z_ref: 100.0,
            exponent: 0.15,
            z_floor: 10.0,
        }
    }
}

impl ShearProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.v_ref >= 0.0 && self.v_ref.is_finite()) {
            return Err(Error::config(format!("shear v_ref must be >= 0, got {}", self.v_ref)));
        }
        if !(self.z_ref > 0.0) || !(self.z_floor > 0.0) {
            return Err(Error::config("shear z_ref and z_floor must be > 0"));
        }
        if !self.exponent.is_finite() {
            return Err(Error::config("shear exponent must be finite"));
        }
        Ok(())
    }

    /// Mean wind speed at altitude `z` (m).
    pub fn speed(&self, z: f64) -> Result<f64> {
        if !z.is_finite() {
            return Err(Error::domain(format!("altitude must be finite, got {z}")));
        }
        Ok(self.speed_unchecked(z))
    }

    #[inline]
    pub(crate) fn speed_unchecked(&self, z: f64) -> f64 {
        self.v_ref * (z.max(self.z_floor) / self.z_ref).powf(self.exponent)
    }
}

/// Wind vector in the W frame: shear along `x_W` plus the turbulence components.
pub fn wind_at(shear: &ShearProfile, gust: &Vector3<f64>, z: f64) -> Result<Vector3<f64>> {
    if !gust.iter().all(|g| g.is_finite()) {
        return Err(Error::domain("gust must be finite"));
    }
    Ok(Vector3::new(shear.speed(z)?, 0.0, 0.0) + gust)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DrydenParams {
    /// Scale lengths `[L_u, L_v, L_w]` (m).
    pub scale_lengths: [f64; 3],
    /// Intensities `[sigma_u, sigma_v, sigma_w]` (m/s).
    pub intensities: [f64; 3],
    /// Speed used to convert the spatial spectra into time (m/s).
    pub airspeed: f64,
}

impl Default for DrydenParams {
    fn default() -> Self {
        Self {
            scale_lengths: [280.0, 280.0, 130.0],
            intensities: [1.0, 1.0, 0.8],
            airspeed: 30.0,
        }
    }
}

impl DrydenParams {
    pub fn validate(&self) -> Result<()> {
        if self.scale_lengths.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return Err(Error::config("Dryden scale lengths must be > 0"));
        }
        if self.intensities.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::config("Dryden intensities must be >= 0"));
        }
        if !(self.airspeed > 0.0) {
            return Err(Error::config("Dryden conversion airspeed must be > 0"));
        }
        Ok(())
    }
}

/// Zero-order-hold coefficients of one first-order shaping filter `K / (1 + tau s)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FirstOrderZoh {
    pub phi: f64,
    pub gamma: f64,
    pub c: f64,
}

/// Zero-order-hold coefficients of `K (1 + sqrt(3) tau s) / (1 + tau s)^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SecondOrderZoh {
    pub phi: [[f64; 2]; 2],
    pub gamma: [f64; 2],
    pub c: [f64; 2],
}

impl FirstOrderZoh {
    fn new(sigma: f64, tau: f64, dt: f64) -> Self {
        let a = 1.0 / tau;
        let e = (-a * dt).exp();
        let gain = sigma * (2.0 * tau).sqrt();
        Self {
            phi: e,
            gamma: (1.0 - e) / a,
            c: gain * a,
        }
    }
}

impl SecondOrderZoh {
    fn new(sigma: f64, tau: f64, dt: f64) -> Self {
        let a = 1.0 / tau;
        let e = (-a * dt).exp();
        let gain = sigma * tau.sqrt();
        Self {
            phi: [[e * (1.0 + a * dt), e * dt], [-e * a * a * dt, e * (1.0 - a * dt)]],
            gamma: [(1.0 - e * (1.0 + a * dt)) / (a * a), dt * e],
            c: [gain * a * a, gain * a * a * 3f64.sqrt() * tau],
        }
    }
}

/// Discrete Dryden filter bank together with its current state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DrydenState {
    pub params: DrydenParams,
    pub dt: f64,
    pub u_filter: FirstOrderZoh,
    pub v_filter: SecondOrderZoh,
    pub w_filter: SecondOrderZoh,
    pub u: f64,
    pub v: [f64; 2],
    pub w: [f64; 2],
}

impl DrydenState {
    /// Zero initial state for the given parameters and sample period.
    pub fn new(params: DrydenParams, dt: f64) -> Result<Self> {
        params.validate()?;
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::config(format!("Dryden sample period must be > 0, got {dt}")));
        }
        let taus = params.scale_lengths.map(|l| l / params.airspeed);
        let [su, sv, sw] = params.intensities;
        Ok(Self {
            params,
            dt,
            u_filter: FirstOrderZoh::new(su, taus[0], dt),
            v_filter: SecondOrderZoh::new(sv, taus[1], dt),
            w_filter: SecondOrderZoh::new(sw, taus[2], dt),
            u: 0.0,
            v: [0.0; 2],
            w: [0.0; 2],
        })
    }

    pub fn output(&self) -> Vector3<f64> {
        Vector3::new(
            self.u_filter.c * self.u,
            self.v_filter.c[0] * self.v[0] + self.v_filter.c[1] * self.v[1],
            self.w_filter.c[0] * self.w[0] + self.w_filter.c[1] * self.w[1],
        )
    }

    /// Advances the filters by one sample period using one standard-normal draw per channel.
    pub fn step(&self, noise: &[f64]) -> Result<(DrydenState, Vector3<f64>)> {
        if noise.len() != TURBULENCE_CHANNELS {
            return Err(Error::config(format!(
                "Dryden step expects {TURBULENCE_CHANNELS} noise channels, got {}",
                noise.len()
            )));
        }
        if noise.iter().any(|n| !n.is_finite()) {
            return Err(Error::domain("noise sample must be finite"));
        }
        let next = self.advance([noise[0], noise[1], noise[2]]);
        Ok((next, next.output()))
    }

    fn advance(&self, noise: [f64; 3]) -> DrydenState {
        // unit-PSD white noise held over one period has variance 1/dt
        let scale = 1.0 / self.dt.sqrt();
        let mut next = *self;
        next.u = self.u_filter.phi * self.u + self.u_filter.gamma * noise[0] * scale;
        next.v = second_order_update(&self.v_filter, self.v, noise[1] * scale);
        next.w = second_order_update(&self.w_filter, self.w, noise[2] * scale);
        next
    }
}

fn second_order_update(f: &SecondOrderZoh, x: [f64; 2], input: f64) -> [f64; 2] {
    [
        f.phi[0][0] * x[0] + f.phi[0][1] * x[1] + f.gamma[0] * input,
        f.phi[1][0] * x[0] + f.phi[1][1] * x[1] + f.gamma[1] * input,
    ]
}

/// Ordered iid standard-normal samples driving one run's turbulence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSeedVector {
    pub samples: Vec<f64>,
    pub channels: usize,
    /// Sample rate of the noise (Hz).
    pub sample_rate: f64,
}

impl NoiseSeedVector {
    /// Number of entries for a run of `t_sim` seconds.
    pub fn dimension(t_sim: f64, sample_rate: f64, channels: usize) -> usize {
        channels * (t_sim * sample_rate - 1e-9).ceil().max(0.0) as usize
    }

    pub fn zeros(t_sim: f64, sample_rate: f64, channels: usize) -> Self {
        Self {
            samples: vec![0.0; Self::dimension(t_sim, sample_rate, channels)],
            channels,
            sample_rate,
        }
    }

    pub fn standard_normal<R: Rng + ?Sized>(
        rng: &mut R,
        t_sim: f64,
        sample_rate: f64,
        channels: usize,
    ) -> Self {
        let n = Self::dimension(t_sim, sample_rate, channels);
        Self {
            samples: (0..n).map(|_| rng.sample(StandardNormal)).collect(),
            channels,
            sample_rate,
        }
    }

    pub fn from_samples(samples: Vec<f64>, channels: usize, sample_rate: f64) -> Result<Self> {
        if channels == 0 || samples.len() % channels != 0 {
            return Err(Error::config(format!(
                "noise vector of length {} is not a multiple of {channels} channels",
                samples.len()
            )));
        }
        Ok(Self {
            samples,
            channels,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.samples.len() / self.channels
    }

    pub fn step_samples(&self, k: usize) -> &[f64] {
        &self.samples[k * self.channels..(k + 1) * self.channels]
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * factor).collect(),
            ..self.clone()
        }
    }
}

/// Gust time series sampled at the noise rate; `gusts[0]` is the (zero) initial output.
pub fn gust_series(params: &DrydenParams, noise: &NoiseSeedVector) -> Result<Vec<Vector3<f64>>> {
    if noise.channels != TURBULENCE_CHANNELS {
        return Err(Error::config(format!(
            "turbulence needs {TURBULENCE_CHANNELS} noise channels, got {}",
            noise.channels
        )));
    }
    let mut state = DrydenState::new(*params, 1.0 / noise.sample_rate)?;
    let mut out = Vec::with_capacity(noise.steps() + 1);
    out.push(state.output());
    for k in 0..noise.steps() {
        let (next, gust) = state.step(noise.step_samples(k))?;
        state = next;
        out.push(gust);
    }
    Ok(out)
}

/// Precomputed wind for one run: shear evaluated on demand plus the interpolated gust series.
#[derive(Debug, Clone)]
pub struct WindField {
    pub shear: ShearProfile,
    gusts: Vec<Vector3<f64>>,
    dt: f64,
}

impl WindField {
    pub fn new(shear: ShearProfile, gusts: Vec<Vector3<f64>>, dt: f64) -> Self {
        assert!(!gusts.is_empty(), "gust series must hold at least the initial sample");
        Self { shear, gusts, dt }
    }

    pub fn from_noise(shear: ShearProfile, dryden: &DrydenParams, noise: &NoiseSeedVector) -> Result<Self> {
        shear.validate()?;
        Ok(Self::new(shear, gust_series(dryden, noise)?, 1.0 / noise.sample_rate))
    }

    pub fn calm(shear: ShearProfile) -> Self {
        Self::new(shear, vec![Vector3::zeros()], 1.0)
    }

    pub fn gusts(&self) -> &[Vector3<f64>] {
        &self.gusts
    }

    /// Gust at time `t` (s), linearly interpolated and held after the last sample.
    pub fn gust(&self, t: f64) -> Vector3<f64> {
        let x = (t / self.dt).max(0.0);
        let k = x.floor() as usize;
        if k + 1 >= self.gusts.len() {
            return *self.gusts.last().unwrap();
        }
        let frac = x - k as f64;
        self.gusts[k] * (1.0 - frac) + self.gusts[k + 1] * frac
    }

    /// Wind in the W frame at time `t` and altitude `z`.
    #[inline]
    pub fn at(&self, t: f64, z: f64) -> Vector3<f64> {
        let mut w = self.gust(t);
        w.x += self.shear.speed_unchecked(z);
        w
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn shear_identity_at_reference() {
        let p = ShearProfile { v_ref: 10.0, z_ref: 100.0, exponent: 0.15, z_floor: 10.0 };
        assert_relative_eq!(p.speed(100.0).unwrap(), 10.0);
    }

    #[test]
    fn shear_square_root_law() {
        let p = ShearProfile { v_ref: 10.0, z_ref: 100.0, exponent: 0.5, z_floor: 10.0 };
        assert_relative_eq!(p.speed(400.0).unwrap(), 20.0, epsilon = 1e-12);
    }

    #[test]
    fn shear_clamps_below_floor() {
        let p = ShearProfile { v_ref: 10.0, z_ref: 100.0, exponent: 0.15, z_floor: 10.0 };
        let expected = 10.0 * 0.1f64.powf(0.15);
        assert_relative_eq!(p.speed(1.0).unwrap(), expected, epsilon = 1e-12);
        assert_relative_eq!(expected, 7.079, epsilon = 1e-3);
        assert_eq!(p.speed(-50.0).unwrap(), p.speed(10.0).unwrap());
    }

    #[test]
    fn shear_rejects_nan() {
        let p = ShearProfile::default();
        assert!(matches!(p.speed(f64::NAN), Err(Error::Domain(_))));
    }

    #[test]
    fn wind_superposition() {
        let p = ShearProfile { v_ref: 10.0, z_ref: 100.0, exponent: 0.15, z_floor: 10.0 };
        let w = wind_at(&p, &Vector3::zeros(), 100.0).unwrap();
        assert_relative_eq!(w, Vector3::new(10.0, 0.0, 0.0));
        let w = wind_at(&p, &Vector3::new(1.0, -2.0, 0.5), 100.0).unwrap();
        assert_relative_eq!(w, Vector3::new(11.0, -2.0, 0.5));
        let low = wind_at(&p, &Vector3::zeros(), 2.0).unwrap();
        assert_eq!(low.x, p.speed(p.z_floor).unwrap());
    }

    #[test]
    fn zero_noise_gives_zero_gust() {
        let mut s = DrydenState::new(DrydenParams::default(), 0.1).unwrap();
        for _ in 0..1000 {
            let (next, g) = s.step(&[0.0, 0.0, 0.0]).unwrap();
            assert_eq!(g, Vector3::zeros());
            s = next;
        }
    }

    #[test]
    fn free_response_decays() {
        let s = DrydenState::new(DrydenParams::default(), 0.1).unwrap();
        let (mut s, g0) = s.step(&[1.0, 1.0, 1.0]).unwrap();
        assert!(g0.norm() > 0.0);
        for _ in 0..5000 {
            s = s.step(&[0.0; 3]).unwrap().0;
        }
        assert!(s.output().norm() < 1e-6 * g0.norm());
    }

    #[test]
    fn channel_mismatch_is_config_error() {
        let s = DrydenState::new(DrydenParams::default(), 0.1).unwrap();
        assert!(matches!(s.step(&[0.0, 1.0]), Err(Error::Config(_))));
    }

    #[test]
    fn noise_dimension_rounds_up() {
        assert_eq!(NoiseSeedVector::dimension(300.0, 10.0, 3), 9000);
        assert_eq!(NoiseSeedVector::dimension(0.25, 10.0, 3), 9);
    }

    #[test]
    fn wind_field_interpolates_between_samples() {
        let gusts = vec![Vector3::zeros(), Vector3::new(1.0, 2.0, -1.0)];
        let wf = WindField::new(ShearProfile { v_ref: 0.0, ..Default::default() }, gusts, 0.1);
        assert_relative_eq!(wf.gust(0.05), Vector3::new(0.5, 1.0, -0.5), epsilon = 1e-12);
        assert_relative_eq!(wf.gust(10.0), Vector3::new(1.0, 2.0, -1.0));
    }
}
