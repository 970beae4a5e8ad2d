use awe_upset::losseval::{LossModelParams, downtime_grid, loss_rate, rank_predictors};
use proptest::prelude::*;

const WEEK: f64 = 7.0 * 24.0 * 60.0;

fn params(fn_c: f64, fp: f64, downtime: f64, e_misc: f64) -> LossModelParams {
    LossModelParams {
        e_misc,
        ..LossModelParams::reference(fn_c, fp, downtime)
    }
}

proptest! {
    #[test]
    fn loss_grows_with_every_cost_driver(
        fn_c in 0.0..1.0f64,
        fp in 0.0..0.01f64,
        downtime in 1.0..1e5f64,
        e_misc in 0.0..100.0f64,
        bump in 1.01..3.0f64,
    ) {
        let base = loss_rate(&params(fn_c, fp, downtime, e_misc)).unwrap();
        let tol = 1e-12 * base.max(1e-300);
        prop_assert!(loss_rate(&params((fn_c * bump).min(1.0), fp, downtime, e_misc)).unwrap() >= base - tol);
        prop_assert!(loss_rate(&params(fn_c, fp * bump, downtime, e_misc)).unwrap() >= base - tol);
        prop_assert!(loss_rate(&params(fn_c, fp, downtime * bump, e_misc)).unwrap() >= base - tol);
        prop_assert!(loss_rate(&params(fn_c, fp, downtime, e_misc * bump + 1.0)).unwrap() >= base - tol);
    }

    #[test]
    fn zero_miss_predictors_ignore_downtime(fp in 0.0..0.01f64, a in 1.0..1e5f64, b in 1.0..1e5f64) {
        let la = loss_rate(&params(0.0, fp, a, 0.0)).unwrap();
        let lb = loss_rate(&params(0.0, fp, b, 0.0)).unwrap();
        prop_assert_eq!(la, lb);
    }
}

#[test]
fn ranking_switches_as_downtime_grows() {
    // a false-trigger-prone but complete predictor beats doing nothing only at long downtimes
    let predictors = vec![
        ("none".to_string(), LossModelParams::reference(1.0, 0.0, WEEK)),
        ("eager".to_string(), LossModelParams::reference(0.0, 0.0048, WEEK)),
    ];
    let grid = downtime_grid(60.0, 1e6, 30);
    assert_eq!(grid[0], 60.0);
    assert_eq!(grid[29], 1e6);
    let ranked = rank_predictors(&predictors, &grid).unwrap();
    let first_at = |dt: f64| ranked.iter().find(|e| e.downtime == dt && e.rank == 1).unwrap().name.clone();
    assert_eq!(first_at(60.0), "none");
    assert_eq!(first_at(1e6), "eager");
}
