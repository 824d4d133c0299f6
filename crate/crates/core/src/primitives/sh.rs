//! Real spherical harmonics up to degree 3 (16 coefficients per channel).

use crate::error::{Error, Result};
use crate::math::Vec3;

pub const SH_COEFFS: usize = 16;

/// 16 coefficients × RGB.
pub type ShCoeffs = [[f64; 3]; SH_COEFFS];

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
pub const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Basis values `Y_k(d)` for a unit direction.
pub fn sh_basis(d: &Vec3) -> [f64; SH_COEFFS] {
    let (x, y, z) = (d.x, d.y, d.z);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    [
        SH_C0,
        -SH_C1 * y,
        SH_C1 * z,
        -SH_C1 * x,
        SH_C2[0] * x * y,
        SH_C2[1] * y * z,
        SH_C2[2] * (2.0 * zz - xx - yy),
        SH_C2[3] * x * z,
        SH_C2[4] * (xx - yy),
        SH_C3[0] * y * (3.0 * xx - yy),
        SH_C3[1] * x * y * z,
        SH_C3[2] * y * (4.0 * zz - xx - yy),
        SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
        SH_C3[4] * x * (4.0 * zz - xx - yy),
        SH_C3[5] * z * (xx - yy),
        SH_C3[6] * x * (xx - 3.0 * yy),
    ]
}

/// Partial derivatives `∂Y_k/∂(x, y, z)` of the polynomial basis, treating the
/// components as independent.
pub fn sh_basis_grad(d: &Vec3) -> [[f64; 3]; SH_COEFFS] {
    let (x, y, z) = (d.x, d.y, d.z);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    [
        [0.0, 0.0, 0.0],
        [0.0, -SH_C1, 0.0],
        [0.0, 0.0, SH_C1],
        [-SH_C1, 0.0, 0.0],
        [SH_C2[0] * y, SH_C2[0] * x, 0.0],
        [0.0, SH_C2[1] * z, SH_C2[1] * y],
        [-2.0 * SH_C2[2] * x, -2.0 * SH_C2[2] * y, 4.0 * SH_C2[2] * z],
        [SH_C2[3] * z, 0.0, SH_C2[3] * x],
        [2.0 * SH_C2[4] * x, -2.0 * SH_C2[4] * y, 0.0],
        [
            SH_C3[0] * 6.0 * x * y,
            SH_C3[0] * (3.0 * xx - 3.0 * yy),
            0.0,
        ],
        [SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y],
        [
            SH_C3[2] * (-2.0 * x * y),
            SH_C3[2] * (4.0 * zz - xx - 3.0 * yy),
            SH_C3[2] * 8.0 * y * z,
        ],
        [
            SH_C3[3] * (-6.0 * x * z),
            SH_C3[3] * (-6.0 * y * z),
            SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
        ],
        [
            SH_C3[4] * (4.0 * zz - 3.0 * xx - yy),
            SH_C3[4] * (-2.0 * x * y),
            SH_C3[4] * 8.0 * x * z,
        ],
        [
            SH_C3[5] * 2.0 * x * z,
            SH_C3[5] * (-2.0 * y * z),
            SH_C3[5] * (xx - yy),
        ],
        [
            SH_C3[6] * (3.0 * xx - 3.0 * yy),
            SH_C3[6] * (-6.0 * x * y),
            0.0,
        ],
    ]
}

/// `0.5 + Σ h_k Y_k(dir)` per channel, without clamping.
pub fn eval_sh_raw(h: &ShCoeffs, dir: &Vec3) -> [f64; 3] {
    let y = sh_basis(dir);
    let mut c = [0.5; 3];
    for (k, yk) in y.iter().enumerate() {
        for ch in 0..3 {
            c[ch] += h[k][ch] * yk;
        }
    }
    c
}

/// Color of SH coefficients seen along the unit direction `dir` (before the
/// render-time clamp to nonnegative values).
pub fn eval_sh(h: &ShCoeffs, dir: &Vec3) -> Result<[f64; 3]> {
    if !dir.iter().all(|v| v.is_finite()) || (dir.norm() - 1.0).abs() > 1e-4 {
        return Err(Error::invalid(format!("SH direction is not unit length (|d| = {})", dir.norm())));
    }
    Ok(eval_sh_raw(h, dir))
}
