//! Small numeric helpers shared by the forward and adjoint paths.

use nalgebra::{Matrix3, Vector3};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// d/dx sigmoid(x), expressed in terms of y = sigmoid(x).
pub fn sigmoid_grad_from_value(y: f64) -> f64 {
    y * (1.0 - y)
}

pub fn logit(y: f64) -> f64 {
    let y = y.clamp(1e-9, 1.0 - 1e-9);
    (y / (1.0 - y)).ln()
}

pub fn quat_norm(q: &[f64; 4]) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

pub fn quat_normalize(q: &[f64; 4]) -> [f64; 4] {
    let n = quat_norm(q);
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// Adjoint of unit-normalization: given dL/dn for n = q/|q|, return dL/dq.
pub fn quat_normalize_backward(q: &[f64; 4], dn: &[f64; 4]) -> [f64; 4] {
    let norm = quat_norm(q);
    let n = quat_normalize(q);
    let dot = n[0] * dn[0] + n[1] * dn[1] + n[2] * dn[2] + n[3] * dn[3];
    [
        (dn[0] - n[0] * dot) / norm,
        (dn[1] - n[1] * dot) / norm,
        (dn[2] - n[2] * dot) / norm,
        (dn[3] - n[3] * dot) / norm,
    ]
}

/// Rotation matrix from a unit quaternion (w, x, y, z).
pub fn quat_to_rotation(n: &[f64; 4]) -> Matrix3<f64> {
    let (w, x, y, z) = (n[0], n[1], n[2], n[3]);
    Matrix3::new(
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

/// Adjoint of `quat_to_rotation`: given dL/dR, return dL/dn (unit quat).
pub fn quat_to_rotation_backward(n: &[f64; 4], d_rot: &Matrix3<f64>) -> [f64; 4] {
    let (w, x, y, z) = (n[0], n[1], n[2], n[3]);
    let dr_dw = Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0;
    let dr_dx = Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0;
    let dr_dy = Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0;
    let dr_dz = Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0;
    [
        d_rot.dot(&dr_dw),
        d_rot.dot(&dr_dx),
        d_rot.dot(&dr_dy),
        d_rot.dot(&dr_dz),
    ]
}

/// Largest eigenvalue of a symmetric 2x2 matrix.
pub fn sym2_max_eigenvalue(a: f64, b: f64, c: f64) -> f64 {
    // [[a, b], [b, c]]
    let mid = 0.5 * (a + c);
    let det = a * c - b * b;
    mid + (mid * mid - det).max(0.0).sqrt()
}

pub fn bounding_box(points: &[Vector3<f64>]) -> (Vector3<f64>, Vector3<f64>) {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for p in points {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn rotation_from_identity_quat() {
        let r = quat_to_rotation(&[1.0, 0.0, 0.0, 0.0]);
        assert_relative_eq!(r, Matrix3::identity(), epsilon = 1e-12);
    }

    #[test]
    fn rotation_is_orthonormal_for_random_quats() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let q: [f64; 4] = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let r = quat_to_rotation(&quat_normalize(&q));
            assert_relative_eq!(r.transpose() * r, Matrix3::identity(), epsilon = 1e-10);
        }
    }

    #[test]
    fn normalize_backward_matches_finite_differences() {
        let q = [0.4, -0.9, 0.2, 0.7];
        let weights = [0.3, -1.1, 0.5, 0.9];
        let f = |q: &[f64; 4]| {
            let n = quat_normalize(q);
            n.iter().zip(weights.iter()).map(|(a, b)| a * b).sum::<f64>()
        };
        let analytic = quat_normalize_backward(&q, &weights);
        let h = 1e-6;
        for k in 0..4 {
            let mut qp = q;
            let mut qm = q;
            qp[k] += h;
            qm[k] -= h;
            let fd = (f(&qp) - f(&qm)) / (2.0 * h);
            assert_relative_eq!(analytic[k], fd, epsilon = 1e-7);
        }
    }

    #[test]
    fn rotation_backward_matches_finite_differences() {
        let n = quat_normalize(&[0.8, 0.1, -0.5, 0.3]);
        // weight matrix for a scalar loss L = sum(W .* R)
        let w = Matrix3::new(0.2, -0.4, 1.0, 0.7, 0.3, -0.9, 0.1, 0.5, -0.2);
        let analytic = quat_to_rotation_backward(&n, &w);
        let h = 1e-6;
        for k in 0..4 {
            let mut np = n;
            let mut nm = n;
            np[k] += h;
            nm[k] -= h;
            let fd = (quat_to_rotation(&np).dot(&w) - quat_to_rotation(&nm).dot(&w)) / (2.0 * h);
            assert_relative_eq!(analytic[k], fd, epsilon = 1e-6);
        }
    }
}
