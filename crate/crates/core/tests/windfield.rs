use awe_upset::windfield::{
    DrydenParams, DrydenState, NoiseSeedVector, ShearProfile, TURBULENCE_CHANNELS, WindField, gust_series, wind_at,
};
use nalgebra::{Matrix2, Vector2, Vector3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rustfft::FftPlanner;
use rustfft::num_complex::Complex;

const FS: f64 = 10.0;

fn long_noise(steps: usize, seed: u64) -> NoiseSeedVector {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    NoiseSeedVector::standard_normal(&mut rng, steps as f64 / FS, FS, TURBULENCE_CHANNELS)
}

fn variance(x: &[f64]) -> f64 {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64
}

/// Stationary state covariance of `x' = A x + b w` with unit-variance `w`, by fixed-point iteration.
fn lyapunov(a: &Matrix2<f64>, b: &Vector2<f64>) -> Matrix2<f64> {
    let q = b * b.transpose();
    let mut p = q;
    for _ in 0..200_000 {
        let next = a * p * a.transpose() + q;
        if (next - p).norm() < 1e-15 * next.norm() {
            return next;
        }
        p = next;
    }
    p
}

#[test]
fn stationary_variance_matches_discrete_lyapunov() {
    let params = DrydenParams::default();
    let noise = long_noise(1_000_000, 11);
    let gusts = gust_series(&params, &noise).unwrap();
    // drop the start-up transient (many correlation times)
    let burn = 5_000;
    let u: Vec<f64> = gusts[burn..].iter().map(|g| g.x).collect();
    let v: Vec<f64> = gusts[burn..].iter().map(|g| g.y).collect();

    let s = DrydenState::new(params, 1.0 / FS).unwrap();
    let scale = FS.sqrt();
    let fu = s.u_filter;
    let var_u = fu.c * fu.c * (fu.gamma * scale).powi(2) / (1.0 - fu.phi * fu.phi);
    let fv = s.v_filter;
    let a = Matrix2::new(fv.phi[0][0], fv.phi[0][1], fv.phi[1][0], fv.phi[1][1]);
    let b = Vector2::new(fv.gamma[0], fv.gamma[1]) * scale;
    let c = Vector2::new(fv.c[0], fv.c[1]);
    let var_v = (c.transpose() * lyapunov(&a, &b) * c)[(0, 0)];

    let su = variance(&u);
    let sv = variance(&v);
    assert!((su / var_u - 1.0).abs() < 0.05, "u: sample {su}, analytic {var_u}");
    assert!((sv / var_v - 1.0).abs() < 0.05, "v: sample {sv}, analytic {var_v}");
    // the discrete filters approximate the continuous intensities closely
    assert!((var_u / params.intensities[0].powi(2) - 1.0).abs() < 0.05);
    assert!((var_v / params.intensities[1].powi(2) - 1.0).abs() < 0.05);
}

#[test]
fn longitudinal_spectrum_follows_dryden_shape() {
    let params = DrydenParams::default();
    let noise = long_noise(1_000_000, 5);
    let u: Vec<f64> = gust_series(&params, &noise).unwrap()[5_000..].iter().map(|g| g.x).collect();

    // Welch estimate with rectangular segments, one-sided PSD in (m/s)^2/Hz
    let n = 8192;
    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut psd = vec![0.0; n / 2];
    let mut segments = 0;
    for chunk in u.chunks_exact(n) {
        let mean = chunk.iter().sum::<f64>() / n as f64;
        let mut buf: Vec<Complex<f64>> = chunk.iter().map(|x| Complex::new(x - mean, 0.0)).collect();
        fft.process(&mut buf);
        for k in 1..n / 2 {
            psd[k] += 2.0 * buf[k].norm_sqr() / (FS * n as f64);
        }
        segments += 1;
    }
    let tau = params.scale_lengths[0] / params.airspeed;
    let sigma = params.intensities[0];
    let analytic = |f: f64| 4.0 * sigma * sigma * tau / (1.0 + (2.0 * std::f64::consts::PI * f * tau).powi(2));

    // one decade centred on the corner frequency 1/(2 pi tau), bins averaged in groups of 3
    let f_c = 1.0 / (2.0 * std::f64::consts::PI * tau);
    let df = FS / n as f64;
    let lo = ((f_c / 10f64.sqrt()) / df).floor() as usize;
    let hi = ((f_c * 10f64.sqrt()) / df).ceil() as usize;
    for start in (lo..hi).step_by(3) {
        let bins = start..(start + 3).min(hi);
        let est = bins.clone().map(|k| psd[k]).sum::<f64>() / (segments * bins.len()) as f64;
        let f = bins.clone().map(|k| k as f64 * df).sum::<f64>() / bins.len() as f64;
        let ratio = est / analytic(f);
        assert!((0.5..2.0).contains(&ratio), "f = {f:.4} Hz: ratio {ratio:.3}");
    }
}

#[test]
fn shear_and_gust_superpose() {
    let shear = ShearProfile::default();
    let w = wind_at(&shear, &Vector3::new(1.0, -2.0, 0.5), shear.z_ref).unwrap();
    assert_eq!(w, Vector3::new(shear.v_ref + 1.0, -2.0, 0.5));
    assert_eq!(WindField::calm(shear).at(3.7, shear.z_ref), Vector3::new(shear.v_ref, 0.0, 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn equal_noise_gives_equal_wind(seed in any::<u64>()) {
        let params = DrydenParams::default();
        let a = gust_series(&params, &long_noise(600, seed)).unwrap();
        let b = gust_series(&params, &long_noise(600, seed)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn gusts_scale_linearly_with_noise(seed in any::<u64>(), factor in -5.0..5.0f64) {
        let params = DrydenParams::default();
        let noise = long_noise(600, seed);
        let base = gust_series(&params, &noise).unwrap();
        let scaled = gust_series(&params, &noise.scaled(factor)).unwrap();
        for (g, h) in base.iter().zip(&scaled) {
            prop_assert!((g * factor - h).norm() <= 1e-12 * (1.0 + g.norm() * factor.abs()));
        }
    }

    #[test]
    fn interpolated_wind_stays_between_samples(seed in any::<u64>(), t in 0.0..59.9f64) {
        let noise = long_noise(600, seed);
        let field = WindField::from_noise(ShearProfile::default(), &DrydenParams::default(), &noise).unwrap();
        let k = (t * FS).floor() as usize;
        let (a, b) = (field.gusts()[k], field.gusts()[k + 1]);
        let g = field.gust(t);
        for i in 0..3 {
            prop_assert!(g[i] >= a[i].min(b[i]) - 1e-12 && g[i] <= a[i].max(b[i]) + 1e-12);
        }
    }
}
