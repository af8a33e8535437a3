//! Quaternion and activation helpers shared by the forward and backward passes.

use nalgebra::{Matrix3, Vector3};

pub type Vec2 = nalgebra::Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Rotation from a (w, x, y, z) quaternion; normalizes internally so callers
/// may hand in slightly drifted values.
pub fn quat_to_mat(q: [f64; 4]) -> Mat3 {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls a gradient w.r.t. the rotation matrix back to the raw quaternion,
/// including the normalization step inside `quat_to_mat`.
pub fn quat_to_mat_backward(q: [f64; 4], d_mat: &Mat3) -> [f64; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);

    // dR/d(unit quat), rows of R laid out as in quat_to_mat.
    let dw = Mat3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0;
    let dx = Mat3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0;
    let dy = Mat3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0;
    let dz = Mat3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0;

    let du = [
        dw.component_mul(d_mat).sum(),
        dx.component_mul(d_mat).sum(),
        dy.component_mul(d_mat).sum(),
        dz.component_mul(d_mat).sum(),
    ];
    // Through q_unit = q / |q|: dq = (du - q_unit * (q_unit . du)) / |q|.
    let unit = [w, x, y, z];
    let dot = (0..4).map(|i| unit[i] * du[i]).sum::<f64>();
    [
        (du[0] - unit[0] * dot) / n,
        (du[1] - unit[1] * dot) / n,
        (du[2] - unit[2] * dot) / n,
        (du[3] - unit[3] * dot) / n,
    ]
}

/// Rotation matrix → unit (w, x, y, z) quaternion, w kept non-negative.
pub fn mat_to_quat(r: &Mat3) -> [f64; 4] {
    let trace = r[(0, 0)] + r[(1, 1)] + r[(2, 2)];
    let q = if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        [
            0.25 * s,
            (r[(2, 1)] - r[(1, 2)]) / s,
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(1, 0)] - r[(0, 1)]) / s,
        ]
    } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
        let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
        [
            (r[(2, 1)] - r[(1, 2)]) / s,
            0.25 * s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
        ]
    } else if r[(1, 1)] > r[(2, 2)] {
        let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
        [
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            0.25 * s,
            (r[(1, 2)] + r[(2, 1)]) / s,
        ]
    } else {
        let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
        [
            (r[(1, 0)] - r[(0, 1)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
            (r[(1, 2)] + r[(2, 1)]) / s,
            0.25 * s,
        ]
    };
    let q = quat_normalize(q);
    if q[0] < 0.0 {
        [-q[0], -q[1], -q[2], -q[3]]
    } else {
        q
    }
}

pub fn quat_normalize(q: [f64; 4]) -> [f64; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if n <= 0.0 || !n.is_finite() {
        return [1.0, 0.0, 0.0, 0.0];
    }
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of `sigmoid`; input must lie strictly inside (0, 1).
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn identity_quat_gives_identity_matrix() {
        let r = quat_to_mat([1.0, 0.0, 0.0, 0.0]);
        assert_relative_eq!(r, Mat3::identity(), epsilon = 1e-15);
    }

    #[test]
    fn quarter_turn_about_z_maps_x_to_y() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let r = quat_to_mat([s, 0.0, 0.0, s]);
        let v = r * Vec3::new(1.0, 0.0, 0.0);
        assert_relative_eq!(v, Vec3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn unnormalized_input_is_normalized() {
        let r1 = quat_to_mat([0.3, -0.5, 0.1, 0.8]);
        let r2 = quat_to_mat([0.6, -1.0, 0.2, 1.6]);
        assert_relative_eq!(r1, r2, epsilon = 1e-12);
        assert_relative_eq!(r1.determinant(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(r1 * r1.transpose(), Mat3::identity(), epsilon = 1e-12);
    }

    #[test]
    fn matrix_backward_matches_finite_differences() {
        let q = [0.9, -0.3, 0.2, 0.6];
        // Probe with a fixed cotangent so the check covers all matrix entries.
        let cot = Mat3::new(0.3, -1.1, 0.7, 0.2, 0.9, -0.4, 1.3, 0.1, -0.6);
        let grad = quat_to_mat_backward(q, &cot);
        let h = 1e-6;
        for i in 0..4 {
            let mut qp = q;
            let mut qm = q;
            qp[i] += h;
            qm[i] -= h;
            let fd = (quat_to_mat(qp).component_mul(&cot).sum()
                - quat_to_mat(qm).component_mul(&cot).sum())
                / (2.0 * h);
            assert_relative_eq!(grad[i], fd, epsilon = 1e-7, max_relative = 1e-6);
        }
    }

    #[test]
    fn quat_matrix_round_trip() {
        for q in [
            [1.0, 0.0, 0.0, 0.0],
            [0.9, -0.3, 0.2, 0.6],
            [0.1, 0.99, 0.0, 0.05],
            [-0.5, 0.5, 0.5, 0.5],
        ] {
            let qn = quat_normalize(q);
            let back = mat_to_quat(&quat_to_mat(qn));
            // Same rotation up to global sign; mat_to_quat pins w ≥ 0.
            let sign = if qn[0] < 0.0 { -1.0 } else { 1.0 };
            for i in 0..4 {
                assert_relative_eq!(back[i], sign * qn[i], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn sigmoid_logit_round_trip() {
        for &p in &[1e-9, 0.005, 0.5, 0.95, 1.0 - 1e-9] {
            assert_relative_eq!(sigmoid(logit(p)), p, max_relative = 1e-9);
        }
        assert_relative_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }
}
