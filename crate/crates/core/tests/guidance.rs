use std::f64::consts::PI;

use awe_upset::guidance::{PathShape, lemniscate_point, path_frame, path_point_w, transition_filter_step};
use nalgebra::{Rotation3, Vector3};
use proptest::prelude::*;

/// Direct evaluation of the longitude/latitude formulas and the tilt about `-y_W`.
fn reference_point(s: f64, a: f64, b: f64, phi_r: f64) -> Vector3<f64> {
    let den = 1.0 + (a / b * s.cos()).powi(2);
    let lam = b * s.sin() / den;
    let phi = a * s.sin() * s.cos() / den;
    let p = Vector3::new(lam.cos() * phi.cos(), lam.sin() * phi.cos(), phi.sin());
    Rotation3::from_axis_angle(&-Vector3::y_axis(), phi_r) * p
}

fn shape(a: f64, b: f64) -> PathShape {
    PathShape { a, b, ..PathShape::default() }
}

proptest! {
    #[test]
    fn path_points_lie_on_the_unit_sphere(s in 0.0..2.0 * PI, phi_r in 0.0..1.5f64, a in 0.1..1.2f64, b in 0.1..1.2f64) {
        let p = path_point_w(s, &shape(a, b), phi_r);
        prop_assert!((p.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn path_matches_direct_evaluation(s in 0.0..2.0 * PI, phi_r in 0.0..1.5f64, a in 0.1..1.2f64, b in 0.1..1.2f64) {
        let p = path_point_w(s, &shape(a, b), phi_r);
        let q = reference_point(s, a, b, phi_r);
        prop_assert!((p - q).norm() < 1e-12);
        let f = path_frame(s, &shape(a, b), phi_r);
        prop_assert!((f.point - q).norm() < 1e-12);
    }

    #[test]
    fn lemniscate_symmetries(s in 0.0..2.0 * PI, a in 0.1..1.2f64, b in 0.1..1.2f64) {
        let (lam, phi) = lemniscate_point(s, a, b);
        let (lam_m, _) = lemniscate_point(2.0 * PI - s, a, b);
        let (_, phi_m) = lemniscate_point(PI - s, a, b);
        prop_assert!((lam_m + lam).abs() < 1e-12);
        prop_assert!((phi_m + phi).abs() < 1e-12);
    }

    #[test]
    fn joint_shape_scaling_scales_angles(s in 0.0..2.0 * PI, a in 0.1..1.2f64, b in 0.1..1.2f64, c in 0.1..3.0f64) {
        let (lam, phi) = lemniscate_point(s, a, b);
        let (lam_c, phi_c) = lemniscate_point(s, c * a, c * b);
        prop_assert!((lam_c - c * lam).abs() < 1e-12);
        prop_assert!((phi_c - c * phi).abs() < 1e-12);
    }

    #[test]
    fn path_rotation_is_monotone_and_bounded(gaps in proptest::collection::vec(-0.05..0.05f64, 1..2000)) {
        let sh = PathShape::default();
        let mut phi_r = sh.phi_0;
        for gap in gaps {
            let next = transition_filter_step(phi_r, gap, &sh, 0.01);
            prop_assert!(next <= phi_r);
            prop_assert!(next >= sh.phi_set && next <= sh.phi_0);
            if gap > sh.freeze_threshold {
                prop_assert_eq!(next, phi_r);
            }
            phi_r = next;
        }
    }
}
