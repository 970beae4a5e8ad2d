//! Synthetic labeled data for exercising the training pipeline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::closedloop::{LOG_COLUMNS, LogRow, Outcome, RunLog};

/// Two unit-variance Gaussian classes. Upset samples (`-1`, a fraction `minority` of `n`) are
/// shifted by `separation` along the `informative` coordinates; all other coordinates are noise.
pub fn gaussian_classes(
    n: usize,
    dim: usize,
    informative: &[usize],
    separation: f64,
    minority: f64,
    seed: u64,
) -> (Vec<Vec<f64>>, Vec<i8>) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n_upset = (n as f64 * minority).round() as usize;
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let label: i8 = if i < n_upset { -1 } else { 1 };
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if label < 0 {
            for &k in informative {
                v[k] += separation;
            }
        }
        x.push(v);
        y.push(label);
    }
    (x, y)
}

/// Stand-in run log over the default predictor signals. Nominal runs carry smooth noise around
/// traction-phase levels. An upset run ends at `upset_time` and its tether force and path error
/// jump within the 0.4 s before the end of the upset window, a precursor that only that window sees.
pub fn synthetic_run_log(seed: u64, duration: f64, upset_time: Option<f64>, sample_rate: f64, reaction_shift: f64) -> RunLog {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let end = upset_time.unwrap_or(duration);
    let n = (end * sample_rate).floor() as usize + 1;
    let mut smooth = [0.0f64; 7];
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / sample_rate;
        for s in smooth.iter_mut() {
            *s = 0.9 * *s + 0.3 * rng.sample::<f64, _>(StandardNormal);
        }
        let mut r = LogRow::from_values(&vec![0.0; LOG_COLUMNS.len()]);
        r.t = t;
        r.wind_x = 10.0 + smooth[0];
        r.wind_y = smooth[1];
        r.wind_z = 0.5 * smooth[2];
        r.a_z_tau = 2.0 * smooth[3];
        r.f_t = 1600.0 + 40.0 * smooth[4];
        r.f_t_peak = r.f_t;
        r.alpha = 0.1 + 0.01 * smooth[5];
        r.e_p = 0.5 * smooth[6];
        if let Some(tu) = upset_time {
            let onset = tu - reaction_shift - 0.4;
            if t > onset {
                let k = (t - onset) / 0.4;
                r.f_t += 600.0 * k;
                r.f_t_peak = r.f_t;
                r.e_p += 3.0 * k;
            }
        }
        rows.push(r);
    }
    RunLog {
        rows,
        events: Vec::new(),
        outcome: if upset_time.is_some() { Outcome::Rupture } else { Outcome::Completed },
        upset_time,
    }
}
