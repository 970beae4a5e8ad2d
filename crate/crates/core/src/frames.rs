//! Reference frame helpers.
//!
//! O is North-East-Down with the ground station at the origin and the mean wind
//! blowing along `+x_O`. W shares `x_O` and flips the other two axes, so `z_W` points up.

use nalgebra::{Matrix3, Vector3};

#[inline]
pub fn o_to_w(v: &Vector3<f64>) -> Vector3<f64> {
    Vector3::new(v.x, -v.y, -v.z)
}

#[inline]
pub fn w_to_o(v: &Vector3<f64>) -> Vector3<f64> {
    Vector3::new(v.x, -v.y, -v.z)
}

/// Course and flight-path angle of a velocity given in O.
pub fn course_and_path_angle(v_o: &Vector3<f64>) -> (f64, f64) {
    let horizontal = v_o.x.hypot(v_o.y);
    (v_o.y.atan2(v_o.x), (-v_o.z).atan2(horizontal))
}

/// Rotation taking O-frame components into the path frame aligned with (course, path angle).
pub fn m_ko(chi: f64, gamma: f64) -> Matrix3<f64> {
    let (sc, cc) = chi.sin_cos();
    let (sg, cg) = gamma.sin_cos();
    Matrix3::new(
        cg * cc, cg * sc, -sg, //
        -sc, cc, 0.0, //
        sg * cc, sg * sc, cg,
    )
}

/// Elevation of a vector above the `x_W y_W` plane, `pi/2` straight up by continuity.
pub fn elevation_w(p: &Vector3<f64>) -> f64 {
    let horizontal = p.x.hypot(p.y);
    if horizontal == 0.0 {
        return if p.z >= 0.0 {
            std::f64::consts::FRAC_PI_2
        } else {
            -std::f64::consts::FRAC_PI_2
        };
    }
    p.z.atan2(horizontal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn m_ko_maps_velocity_to_x() {
        let (chi, gamma): (f64, f64) = (0.7, -0.3);
        let v = Vector3::new(gamma.cos() * chi.cos(), gamma.cos() * chi.sin(), -gamma.sin()) * 12.0;
        assert_relative_eq!(m_ko(chi, gamma) * v, Vector3::new(12.0, 0.0, 0.0), epsilon = 1e-12);
        let (c, g) = course_and_path_angle(&v);
        assert_relative_eq!(c, chi, epsilon = 1e-12);
        assert_relative_eq!(g, gamma, epsilon = 1e-12);
    }

    #[test]
    fn frame_flip_round_trips() {
        let v = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(w_to_o(&o_to_w(&v)), v);
    }
}
