use serde::{Deserialize, Serialize};

use crate::geometry::{AtlasRegion, MorphableModel, Region};
use crate::math::{RigidTransform, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Resolution and basis sizes of the procedural head model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyModelSpec {
    /// Latitude rings minus one.
    pub lat_rows: usize,
    pub lon_cols: usize,
    pub id_dim: usize,
    pub expr_dim: usize,
    /// Rows (from the bottom) that belong to the face chart.
    pub face_rows: usize,
    /// RMS per-vertex displacement of one unit of an identity coefficient.
    pub id_scale: f64,
    pub expr_scale: f64,
}

impl Default for ToyModelSpec {
    fn default() -> Self {
        ToyModelSpec {
            lat_rows: 24,
            lon_cols: 48,
            id_dim: 8,
            expr_dim: 6,
            face_rows: 16,
            id_scale: 0.04,
            expr_scale: 0.03,
        }
    }
}

impl ToyModelSpec {
    /// Coarse model for unit tests.
    pub fn small() -> Self {
        ToyModelSpec {
            lat_rows: 10,
            lon_cols: 16,
            face_rows: 6,
            id_dim: 4,
            expr_dim: 3,
            ..Default::default()
        }
    }
}

pub const LAT_MIN: f64 = -80.0;
pub const LAT_MAX: f64 = 85.0;
pub const HEAD_RADII: [f64; 3] = [0.9, 1.1, 1.0];
pub const FACE_CHART: ([f64; 2], [f64; 2]) = ([0.005, 0.01], [0.995, 0.59]);
pub const HAIR_CHART: ([f64; 2], [f64; 2]) = ([0.005, 0.61], [0.995, 0.99]);

/// Latitude/longitude (radians) of every vertex of the lat-long mesh.
pub fn vertex_angles(spec: &ToyModelSpec) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity((spec.lat_rows + 1) * spec.lon_cols);
    for i in 0..=spec.lat_rows {
        let lat = (LAT_MIN + (LAT_MAX - LAT_MIN) * i as f64 / spec.lat_rows as f64).to_radians();
        for j in 0..spec.lon_cols {
            let lon = std::f64::consts::TAU * j as f64 / spec.lon_cols as f64;
            out.push((lat, lon));
        }
    }
    out
}

/// Whether latitude ring `i` lies on the scalp.
pub fn is_hair_row(spec: &ToyModelSpec, i: usize) -> bool {
    i > spec.face_rows
}

fn ellipsoid(lat: f64, lon: f64) -> (Vec3, Vec3) {
    let [rx, ry, rz] = HEAD_RADII;
    let p = Vec3::new(rx * lat.cos() * lon.sin(), ry * lat.sin(), rz * lat.cos() * lon.cos());
    let n = Vec3::new(p.x / (rx * rx), p.y / (ry * ry), p.z / (rz * rz)).normalize();
    (p, n)
}

/// Procedural lat-long head: smooth radial identity modes, localized
/// expression modes, a face chart below the hairline and a hair cap above
/// it, and a single neck joint carrying every vertex.
pub fn make_toy_model(spec: &ToyModelSpec, seed: u64) -> MorphableModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, cols) = (spec.lat_rows, spec.lon_cols);
    let angles = vertex_angles(spec);
    let v = angles.len();
    let mut mean_shape = Vec::with_capacity(v);
    let mut normals = Vec::with_capacity(v);
    for &(lat, lon) in &angles {
        let (p, n) = ellipsoid(lat, lon);
        mean_shape.push(p);
        normals.push(n);
    }

    let mut id_modes = Vec::with_capacity(spec.id_dim);
    for _ in 0..spec.id_dim {
        let terms: Vec<(f64, f64, f64, f64, f64)> = (0..4)
            .map(|_| {
                (
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(1..=3) as f64,
                    rng.gen_range(0..=2) as f64,
                    rng.gen_range(0.0..std::f64::consts::TAU),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        let mode: Vec<f64> = angles
            .iter()
            .zip(&normals)
            .flat_map(|(&(lat, lon), n)| {
                let amp: f64 = terms
                    .iter()
                    .map(|&(a, fl, fo, pl, po)| a * (fl * lat + pl).sin() * (fo * lon + po).cos())
                    .sum();
                [n.x * amp, n.y * amp, n.z * amp]
            })
            .collect();
        id_modes.push(mode);
    }

    // Localized bumps around the front of the face.
    let centers = [(-35.0, 0.0, Vec3::new(0.0, -1.0, 0.3)), (20.0, 0.0, Vec3::new(0.0, 1.0, 0.0)), (-15.0, 40.0, Vec3::new(0.3, 0.0, 0.3)), (-15.0, -40.0, Vec3::new(-0.3, 0.0, 0.3)), (-30.0, 0.0, Vec3::new(1.0, 0.0, 0.0)), (5.0, 0.0, Vec3::new(0.0, 0.0, 1.0))];
    let mut expr_modes = Vec::with_capacity(spec.expr_dim);
    for k in 0..spec.expr_dim {
        let (clat, clon, dir) = if k < centers.len() {
            centers[k]
        } else {
            (
                rng.gen_range(-50.0..25.0),
                rng.gen_range(-60.0..60.0),
                Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
            )
        };
        let (c, _) = ellipsoid(f64::to_radians(clat), f64::to_radians(clon));
        let width = 0.35 + 0.1 * rng.gen::<f64>();
        let mode: Vec<f64> = mean_shape
            .iter()
            .zip(&normals)
            .flat_map(|(p, n)| {
                let w = (-(p - c).norm_squared() / (2.0 * width * width)).exp();
                let d = (dir + n * 0.5) * w;
                [d.x, d.y, d.z]
            })
            .collect();
        expr_modes.push(mode);
    }
    let basis_id = interleave(orthogonalize(id_modes, spec.id_scale, v), v);
    let basis_expr = interleave(orthogonalize(expr_modes, spec.expr_scale, v), v);

    let mut faces = Vec::with_capacity(rows * cols * 2);
    let mut uv_coords = Vec::with_capacity(rows * cols * 2);
    let (fmin, fmax) = FACE_CHART;
    let (hmin, hmax) = HAIR_CHART;
    let row_v = |i: usize, hair: bool| {
        if hair {
            hmin[1] + (hmax[1] - hmin[1]) * (i - spec.face_rows) as f64 / (rows - spec.face_rows) as f64
        } else {
            fmin[1] + (fmax[1] - fmin[1]) * i as f64 / spec.face_rows as f64
        }
    };
    let col_u = |j: usize| fmin[0] + (fmax[0] - fmin[0]) * j as f64 / cols as f64;
    for i in 0..rows {
        // Quads between ring i and i + 1 belong to the chart of ring i + 1.
        let hair = is_hair_row(spec, i + 1);
        let (v0, v1) = (row_v(i, hair), row_v(i + 1, hair));
        for j in 0..cols {
            let jn = (j + 1) % cols;
            let a = (i * cols + j) as u32;
            let b = (i * cols + jn) as u32;
            let c = ((i + 1) * cols + jn) as u32;
            let d = ((i + 1) * cols + j) as u32;
            let (u0, u1) = (col_u(j), col_u(j + 1));
            // Counter-clockwise seen from outside.
            faces.push([a, b, c]);
            uv_coords.push([[u0, v0], [u1, v0], [u1, v1]]);
            faces.push([a, c, d]);
            uv_coords.push([[u0, v0], [u1, v1], [u0, v1]]);
        }
    }

    let regions = vec![
        AtlasRegion {
            region: Region::Face,
            uv_min: fmin,
            uv_max: fmax,
        },
        AtlasRegion {
            region: Region::Hair,
            uv_min: hmin,
            uv_max: hmax,
        },
    ];
    MorphableModel {
        mean_shape,
        basis_id,
        id_dim: spec.id_dim,
        basis_expr,
        expr_dim: spec.expr_dim,
        skin_weights: vec![1.0; v],
        joints: vec![RigidTransform::translation(Vec3::new(0.0, -1.0, 0.0))],
        faces,
        uv_coords,
        regions,
    }
}

// Gram–Schmidt over flattened modes, each rescaled to the given RMS
// per-vertex displacement.
fn orthogonalize(modes: Vec<Vec<f64>>, rms: f64, v: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(modes.len());
    for mut m in modes {
        for o in &out {
            let oo: f64 = o.iter().map(|x| x * x).sum();
            let dot: f64 = m.iter().zip(o).map(|(a, b)| a * b).sum();
            for (x, y) in m.iter_mut().zip(o) {
                *x -= dot / oo * y;
            }
        }
        let norm = m.iter().map(|x| x * x).sum::<f64>().sqrt();
        let target = rms * (v as f64).sqrt();
        m.iter_mut().for_each(|x| *x *= target / norm);
        out.push(m);
    }
    out
}

// Modes as `[k][v*3 + c]` to the `V × 3 × D` layout.
fn interleave(modes: Vec<Vec<f64>>, v: usize) -> Vec<f64> {
    let d = modes.len();
    let mut out = vec![0.0; v * 3 * d];
    for (k, m) in modes.iter().enumerate() {
        for i in 0..v * 3 {
            out[i * d + k] = m[i];
        }
    }
    out
}
