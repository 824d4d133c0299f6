//! Small fixed-size linear algebra shared by the geometry and rendering code.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Quaternion stored as `[w, x, y, z]`.
pub type Quat = [f64; 4];

pub const QUAT_IDENTITY: Quat = [1.0, 0.0, 0.0, 0.0];

pub fn quat_norm(q: &Quat) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

pub fn quat_normalize(q: &Quat) -> Quat {
    let n = quat_norm(q);
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// Hamilton product `a ⊗ b`.
pub fn quat_mul(a: &Quat, b: &Quat) -> Quat {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

/// Rotation matrix of a unit quaternion (no normalization applied).
pub fn quat_to_matrix(q: &Quat) -> Mat3 {
    let [w, x, y, z] = *q;
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

/// Pulls a gradient on the entries of `quat_to_matrix(q)` back to `q`,
/// treating the polynomial formula as-is (valid for unit `q`).
pub fn quat_to_matrix_backward(q: &Quat, g: &Mat3) -> Quat {
    let [w, x, y, z] = *q;
    let g = |r: usize, c: usize| g[(r, c)];
    let dw = 2.0
        * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2)
            + z * g(2, 0)
            + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let dy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
            - w * g(2, 0)
            + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let dz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));
    [dw, dx, dy, dz]
}

/// Gradient of `normalize(q)` pulled back to the raw `q`.
pub fn quat_normalize_backward(q: &Quat, g: &Quat) -> Quat {
    let n = quat_norm(q);
    let qn = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
    let d = qn[0] * g[0] + qn[1] * g[1] + qn[2] * g[2] + qn[3] * g[3];
    [
        (g[0] - qn[0] * d) / n,
        (g[1] - qn[1] * d) / n,
        (g[2] - qn[2] * d) / n,
        (g[3] - qn[3] * d) / n,
    ]
}

/// Quaternion of the rotation `exp([ω]×)` for an axis-angle vector `ω`.
pub fn axis_angle_to_quat(w: &Vec3) -> Quat {
    let theta = w.norm();
    let (c, f) = half_angle_terms(theta);
    [c, f * w.x, f * w.y, f * w.z]
}

// Returns (cos(θ/2), sin(θ/2)/θ) with a series near zero.
fn half_angle_terms(theta: f64) -> (f64, f64) {
    if theta < 1e-4 {
        let t2 = theta * theta;
        (1.0 - t2 / 8.0, 0.5 - t2 / 48.0)
    } else {
        ((0.5 * theta).cos(), (0.5 * theta).sin() / theta)
    }
}

/// Pulls a quaternion gradient back through [`axis_angle_to_quat`].
pub fn axis_angle_to_quat_backward(w: &Vec3, g: &Quat) -> Vec3 {
    let theta = w.norm();
    let (_, f) = half_angle_terms(theta);
    // d f / dθ divided by θ.
    let fp_over_theta = if theta < 1e-4 {
        -1.0 / 24.0 + theta * theta / 960.0
    } else {
        (0.5 * theta * (0.5 * theta).cos() - (0.5 * theta).sin()) / (theta * theta * theta)
    };
    let gv = Vec3::new(g[1], g[2], g[3]);
    // q_w = cos(θ/2): d/dω = -½ f ω
    // q_v = f ω: d/dω = f I + (f'/θ) ω ωᵀ
    gv * f + w * (fp_over_theta * w.dot(&gv)) - w * (0.5 * f * g[0])
}

/// Quaternion of a proper rotation matrix (Shepperd's method), `w ≥ 0`.
pub fn matrix_to_quat(m: &Mat3) -> Quat {
    let tr = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
    let q = if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        [
            0.25 * s,
            (m[(2, 1)] - m[(1, 2)]) / s,
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(1, 0)] - m[(0, 1)]) / s,
        ]
    } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
        let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
        [
            (m[(2, 1)] - m[(1, 2)]) / s,
            0.25 * s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
        ]
    } else if m[(1, 1)] > m[(2, 2)] {
        let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
        [
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            0.25 * s,
            (m[(1, 2)] + m[(2, 1)]) / s,
        ]
    } else {
        let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
        [
            (m[(1, 0)] - m[(0, 1)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
            (m[(1, 2)] + m[(2, 1)]) / s,
            0.25 * s,
        ]
    };
    let q = quat_normalize(&q);
    if q[0] < 0.0 {
        [-q[0], -q[1], -q[2], -q[3]]
    } else {
        q
    }
}

/// Rotation about `axis` (normalized internally) by `angle` radians.
pub fn rotation_about(axis: &Vec3, angle: f64) -> Mat3 {
    quat_to_matrix(&axis_angle_to_quat(&(axis.normalize() * angle)))
}

/// Checks `RᵀR = I` and `det R = +1` within `tol`.
pub fn is_proper_rotation(r: &Mat3, tol: f64) -> bool {
    let e = r.transpose() * r - Mat3::identity();
    e.iter().all(|v| v.abs() <= tol) && (r.determinant() - 1.0).abs() <= tol
}

/// Rigid transform `x ↦ R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn translation(t: Vec3) -> Self {
        Self::new(Mat3::identity(), t)
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.rotation.iter().chain(self.translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::invalid("non-finite rigid transform"));
        }
        if !is_proper_rotation(&self.rotation, 1e-6) {
            return Err(Error::invalid("rotation is not orthonormal with det +1"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_quat(rng: &mut ChaCha8Rng) -> Quat {
        quat_normalize(&[
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ])
    }

    #[test]
    fn quaternion_product_matches_matrix_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = rand_quat(&mut rng);
            let b = rand_quat(&mut rng);
            let lhs = quat_to_matrix(&quat_mul(&a, &b));
            let rhs = quat_to_matrix(&a) * quat_to_matrix(&b);
            assert!((lhs - rhs).abs().max() < 1e-12);
        }
    }

    #[test]
    fn matrix_quat_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let q = rand_quat(&mut rng);
            let m = quat_to_matrix(&q);
            let back = quat_to_matrix(&matrix_to_quat(&m));
            assert!((m - back).abs().max() < 1e-12);
        }
    }

    #[test]
    fn matrix_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = rand_quat(&mut rng);
        let g = Mat3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        let f = |q: &Quat| quat_to_matrix(q).component_mul(&g).sum();
        let an = quat_to_matrix_backward(&q, &g);
        for k in 0..4 {
            let h = 1e-6;
            let mut qp = q;
            let mut qm = q;
            qp[k] += h;
            qm[k] -= h;
            let fd = (f(&qp) - f(&qm)) / (2.0 * h);
            assert!((fd - an[k]).abs() < 1e-7, "{k}: {fd} vs {}", an[k]);
        }
    }

    #[test]
    fn axis_angle_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for scale in [0.0, 1e-6, 0.3, 2.0] {
            let w = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ) * scale;
            let g: Quat = [0.3, -0.7, 0.2, 0.9];
            let f = |w: &Vec3| {
                let q = axis_angle_to_quat(w);
                q.iter().zip(g.iter()).map(|(a, b)| a * b).sum::<f64>()
            };
            let an = axis_angle_to_quat_backward(&w, &g);
            for k in 0..3 {
                let h = 1e-6;
                let mut wp = w;
                let mut wm = w;
                wp[k] += h;
                wm[k] -= h;
                let fd = (f(&wp) - f(&wm)) / (2.0 * h);
                assert!((fd - an[k]).abs() < 1e-6, "scale {scale} k {k}: {fd} vs {}", an[k]);
            }
        }
    }

    #[test]
    fn rigid_compose_applies_right_first() {
        let a = RigidTransform::new(rotation_about(&Vec3::z(), 0.5), Vec3::new(1.0, 0.0, 0.0));
        let b = RigidTransform::new(rotation_about(&Vec3::x(), -0.2), Vec3::new(0.0, 2.0, 0.0));
        let p = Vec3::new(0.3, -0.4, 0.8);
        let lhs = a.compose(&b).apply(&p);
        let rhs = a.apply(&b.apply(&p));
        assert!((lhs - rhs).norm() < 1e-12);
    }
}
