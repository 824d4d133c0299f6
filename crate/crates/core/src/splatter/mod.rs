//! Differentiable tile-based Gaussian splatting: projection, global depth
//! sort, front-to-back compositing and the analytic reverse pass.

mod camera;

pub use camera::Camera;

use nalgebra::{Matrix2, Matrix2x3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::imageio::Image;
use crate::math::{quat_normalize, quat_normalize_backward, quat_to_matrix, quat_to_matrix_backward, Mat3, Quat, Vec3};
use crate::primitives::sh::{sh_basis, sh_basis_grad, SH_COEFFS};
use crate::primitives::{sigmoid, GaussianGrads, GaussianSet};

/// Compositing constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSettings {
    pub tile_size: usize,
    pub alpha_cap: f64,
    pub alpha_min: f64,
    pub transmittance_min: f64,
    /// Added to the diagonal of every projected covariance (px²).
    pub cov_floor: f64,
    pub background: [f64; 3],
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            tile_size: 16,
            alpha_cap: 0.99,
            alpha_min: 1.0 / 255.0,
            transmittance_min: 1e-4,
            cov_floor: 0.3,
            background: [1.0; 3],
        }
    }
}

impl RenderSettings {
    pub fn validate(&self) -> Result<()> {
        if self.tile_size == 0 {
            return Err(Error::Config("tile_size must be positive".into()));
        }
        if !(self.alpha_cap > 0.0 && self.alpha_cap < 1.0) {
            return Err(Error::Config("alpha_cap must lie in (0, 1)".into()));
        }
        if !(self.alpha_min > 0.0 && self.alpha_min < self.alpha_cap) {
            return Err(Error::Config("alpha_min must lie in (0, alpha_cap)".into()));
        }
        if !(self.transmittance_min >= 0.0 && self.transmittance_min < 1.0) {
            return Err(Error::Config("transmittance_min must lie in [0, 1)".into()));
        }
        if !(self.cov_floor > 0.0) {
            return Err(Error::Config("cov_floor must be positive".into()));
        }
        Ok(())
    }
}

/// `Σ = R S Sᵀ Rᵀ` for the normalized quaternion `q` and scales `s`.
pub fn build_cov3d(q: &Quat, scale: &Vec3) -> Mat3 {
    let r = quat_to_matrix(&quat_normalize(q));
    let d = Mat3::from_diagonal(&scale.component_mul(scale));
    r * d * r.transpose()
}

/// `J W Σ Wᵀ Jᵀ + floor·I` for a world-space mean and covariance.
pub fn project_cov2d(cam: &Camera, mean: &Vec3, cov3: &Mat3, floor: f64) -> Matrix2<f64> {
    let t = cam.to_view(mean);
    let j = jacobian_matrix(cam, &t);
    let m = cam.rotation * cov3 * cam.rotation.transpose();
    j * m * j.transpose() + Matrix2::identity() * floor
}

fn jacobian_matrix(cam: &Camera, t: &Vec3) -> Matrix2x3<f64> {
    let j = cam.jacobian(t);
    Matrix2x3::new(j[0][0], j[0][1], j[0][2], j[1][0], j[1][1], j[1][2])
}

/// A Gaussian projected to the image plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Splat2D {
    /// Index into the source [`GaussianSet`].
    pub index: usize,
    pub mean: [f64; 2],
    /// Upper triangle `(a, b, c)` of the 2D covariance.
    pub cov: [f64; 3],
    /// Upper triangle of the inverse covariance.
    pub conic: [f64; 3],
    pub depth: f64,
    pub color: [f64; 3],
    pub clamped: [bool; 3],
    pub opacity: f64,
    /// Inclusive pixel bounds `[x0, x1, y0, y1]` outside which the splat's
    /// alpha is below the skip threshold.
    pub bbox: [usize; 4],
}

/// Projects Gaussian `i`; `None` when it is clipped or cannot reach any
/// pixel with alpha above the skip threshold.
pub fn project(g: &GaussianSet, i: usize, cam: &Camera, settings: &RenderSettings) -> Option<Splat2D> {
    let p = g.positions[i];
    let t = cam.to_view(&p);
    if !(t.z > cam.near && t.z < cam.far) {
        return None;
    }
    let opacity = sigmoid(g.opacity_logits[i]);
    if opacity < settings.alpha_min {
        return None;
    }
    let cov3 = build_cov3d(&g.rotations[i], &g.scale(i));
    let c2 = project_cov2d(cam, &p, &cov3, settings.cov_floor);
    let (a, b, c) = (c2[(0, 0)], c2[(0, 1)], c2[(1, 1)]);
    let det = a * c - b * b;
    assert!(det > 0.0, "projected covariance is singular despite the floor");
    let mean = cam.project_view(&t);
    // alpha >= alpha_min requires dᵀΣ⁻¹d <= k, whose extent along x is sqrt(k a).
    let k = 2.0 * (opacity / settings.alpha_min).ln();
    let rx = (k * a).sqrt() + 1e-6;
    let ry = (k * c).sqrt() + 1e-6;
    let x0 = (mean[0] - rx - 0.5).ceil().max(0.0);
    let x1 = (mean[0] + rx - 0.5).floor().min(cam.width as f64 - 1.0);
    let y0 = (mean[1] - ry - 0.5).ceil().max(0.0);
    let y1 = (mean[1] + ry - 0.5).floor().min(cam.height as f64 - 1.0);
    if !(x0 <= x1 && y0 <= y1) {
        return None;
    }
    let dir = (p - cam.center()).normalize();
    let raw = crate::primitives::sh::eval_sh_raw(&g.sh[i], &dir);
    let mut color = [0.0; 3];
    let mut clamped = [false; 3];
    for ch in 0..3 {
        clamped[ch] = raw[ch] < 0.0;
        color[ch] = raw[ch].max(0.0);
    }
    Some(Splat2D {
        index: i,
        mean,
        cov: [a, b, c],
        conic: [c / det, -b / det, a / det],
        depth: t.z,
        color,
        clamped,
        opacity,
        bbox: [x0 as usize, x1 as usize, y0 as usize, y1 as usize],
    })
}

impl Splat2D {
    /// `(alpha, gaussian falloff, capped)` at pixel center `(px, py)`.
    #[inline]
    pub fn alpha_at(&self, px: f64, py: f64, cap: f64) -> (f64, f64, bool) {
        let dx = px - self.mean[0];
        let dy = py - self.mean[1];
        let [qa, qb, qc] = self.conic;
        let power = -0.5 * (qa * dx * dx + 2.0 * qb * dx * dy + qc * dy * dy);
        let falloff = power.exp();
        let raw = self.opacity * falloff;
        if raw > cap {
            (cap, falloff, true)
        } else {
            (raw, falloff, false)
        }
    }
}

/// Projects, culls and depth-sorts a whole set (ties broken by index).
pub fn project_all(g: &GaussianSet, cam: &Camera, settings: &RenderSettings) -> Vec<Splat2D> {
    let projected = exec::map_range(g.len(), |i| project(g, i, cam, settings));
    let mut splats: Vec<Splat2D> = projected.into_iter().flatten().collect();
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    splats
}

/// Forward state kept for [`rasterize_backward`].
#[derive(Debug, Clone)]
pub struct RenderAux {
    pub camera: Camera,
    pub settings: RenderSettings,
    pub gaussian_count: usize,
    /// Depth-sorted visible splats.
    pub splats: Vec<Splat2D>,
    /// Per tile, indices into `splats` in depth order.
    pub tiles: Vec<Vec<u32>>,
    /// Per pixel, number of tile-list entries visited before compositing ended.
    pub last: Vec<u32>,
}

/// A rendered image with per-pixel compositing statistics.
#[derive(Debug, Clone)]
pub struct Render {
    pub image: Image,
    /// Accumulated alpha `Σ α_i T_i`.
    pub alpha: Vec<f64>,
    /// Terminal transmittance.
    pub transmittance: Vec<f64>,
    /// Number of splats composited at each pixel.
    pub contributors: Vec<u32>,
    pub aux: RenderAux,
}

struct TileLayout {
    tiles_x: usize,
    tiles_y: usize,
    size: usize,
}

impl TileLayout {
    fn new(cam: &Camera, size: usize) -> Self {
        TileLayout {
            tiles_x: cam.width.div_ceil(size),
            tiles_y: cam.height.div_ceil(size),
            size,
        }
    }

    fn count(&self) -> usize {
        self.tiles_x * self.tiles_y
    }

    fn pixels(&self, tile: usize, cam: &Camera) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let tx = tile % self.tiles_x;
        let ty = tile / self.tiles_x;
        let xs = tx * self.size..((tx + 1) * self.size).min(cam.width);
        let ys = ty * self.size..((ty + 1) * self.size).min(cam.height);
        (xs, ys)
    }
}

fn bin_tiles(splats: &[Splat2D], layout: &TileLayout) -> Vec<Vec<u32>> {
    let mut tiles = vec![Vec::new(); layout.count()];
    for (k, s) in splats.iter().enumerate() {
        let [x0, x1, y0, y1] = s.bbox;
        for ty in y0 / layout.size..=y1 / layout.size {
            for tx in x0 / layout.size..=x1 / layout.size {
                tiles[ty * layout.tiles_x + tx].push(k as u32);
            }
        }
    }
    tiles
}

struct TileOut {
    color: Vec<f64>,
    alpha: Vec<f64>,
    trans: Vec<f64>,
    count: Vec<u32>,
    last: Vec<u32>,
}

/// Renders `g` through `cam` over `settings.background`.
pub fn rasterize(g: &GaussianSet, cam: &Camera, settings: &RenderSettings) -> Result<Render> {
    cam.validate()?;
    settings.validate()?;
    let splats = project_all(g, cam, settings);
    let layout = TileLayout::new(cam, settings.tile_size);
    let tiles = bin_tiles(&splats, &layout);
    let outs = exec::map_range(layout.count(), |t| {
        let (xs, ys) = layout.pixels(t, cam);
        let n = xs.len() * ys.len();
        let mut out = TileOut {
            color: Vec::with_capacity(n * 3),
            alpha: Vec::with_capacity(n),
            trans: Vec::with_capacity(n),
            count: Vec::with_capacity(n),
            last: Vec::with_capacity(n),
        };
        for y in ys {
            for x in xs.clone() {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut c = [0.0; 3];
                let mut acc = 0.0;
                let mut trans = 1.0;
                let mut count = 0;
                let mut last = 0;
                for (e, &k) in tiles[t].iter().enumerate() {
                    let s = &splats[k as usize];
                    let (a, _, _) = s.alpha_at(px, py, settings.alpha_cap);
                    if a < settings.alpha_min {
                        continue;
                    }
                    let next = trans * (1.0 - a);
                    if next < settings.transmittance_min {
                        break;
                    }
                    for ch in 0..3 {
                        c[ch] += s.color[ch] * a * trans;
                    }
                    acc += a * trans;
                    trans = next;
                    count += 1;
                    last = e + 1;
                }
                for ch in 0..3 {
                    out.color.push(c[ch] + trans * settings.background[ch]);
                }
                out.alpha.push(acc);
                out.trans.push(trans);
                out.count.push(count);
                out.last.push(last as u32);
            }
        }
        out
    });
    let (w, h) = (cam.width, cam.height);
    let mut image = Image::new(w, h, 3);
    let mut alpha = vec![0.0; w * h];
    let mut transmittance = vec![0.0; w * h];
    let mut contributors = vec![0; w * h];
    let mut last = vec![0; w * h];
    for (t, out) in outs.into_iter().enumerate() {
        let (xs, ys) = layout.pixels(t, cam);
        let mut k = 0;
        for y in ys {
            for x in xs.clone() {
                let p = y * w + x;
                image.data[p * 3..p * 3 + 3].copy_from_slice(&out.color[k * 3..k * 3 + 3]);
                alpha[p] = out.alpha[k];
                transmittance[p] = out.trans[k];
                contributors[p] = out.count[k];
                last[p] = out.last[k];
                k += 1;
            }
        }
    }
    Ok(Render {
        image,
        alpha,
        transmittance,
        contributors,
        aux: RenderAux {
            camera: *cam,
            settings: *settings,
            gaussian_count: g.len(),
            splats,
            tiles,
            last,
        },
    })
}

#[derive(Debug, Clone, Copy, Default)]
struct Grad2D {
    mean: [f64; 2],
    conic: [f64; 3],
    color: [f64; 3],
    opacity: f64,
}

impl Grad2D {
    fn add(&mut self, o: &Grad2D) {
        for k in 0..2 {
            self.mean[k] += o.mean[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
    }
}

/// Gradients of `⟨upstream, image⟩` with respect to every pre-activation
/// parameter of `g`. `aux` must come from rendering the same `g` and camera.
pub fn rasterize_backward(g: &GaussianSet, aux: &RenderAux, upstream: &[f64]) -> Result<GaussianGrads> {
    let cam = &aux.camera;
    let settings = &aux.settings;
    if aux.gaussian_count != g.len() {
        return Err(Error::InvalidState(format!(
            "render buffers were produced for {} gaussians, got {}",
            aux.gaussian_count,
            g.len()
        )));
    }
    if upstream.len() != cam.width * cam.height * 3 || aux.last.len() != cam.width * cam.height {
        return Err(Error::InvalidState("upstream gradient does not match the render size".into()));
    }
    let layout = TileLayout::new(cam, settings.tile_size);
    if aux.tiles.len() != layout.count() {
        return Err(Error::InvalidState("tile lists do not match the camera".into()));
    }
    let splats = &aux.splats;
    let tile_grads = exec::map_range(layout.count(), |t| {
        let list = &aux.tiles[t];
        let mut grads = vec![Grad2D::default(); list.len()];
        if list.is_empty() {
            return grads;
        }
        let (xs, ys) = layout.pixels(t, cam);
        let mut visited: Vec<(usize, f64, f64, f64, bool)> = Vec::new();
        for y in ys {
            for x in xs.clone() {
                let p = y * cam.width + x;
                let up = &upstream[p * 3..p * 3 + 3];
                if up.iter().all(|u| *u == 0.0) {
                    continue;
                }
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                visited.clear();
                let mut trans = 1.0;
                for (e, &k) in list[..aux.last[p] as usize].iter().enumerate() {
                    let (a, falloff, capped) = splats[k as usize].alpha_at(px, py, settings.alpha_cap);
                    if a < settings.alpha_min {
                        continue;
                    }
                    visited.push((e, a, trans, falloff, capped));
                    trans *= 1.0 - a;
                }
                // rest = color seen behind the current splat, per unit transmittance.
                let mut rest = settings.background;
                for &(e, a, t_before, falloff, capped) in visited.iter().rev() {
                    let s = &splats[list[e] as usize];
                    let gr = &mut grads[e];
                    let mut g_alpha = 0.0;
                    for ch in 0..3 {
                        gr.color[ch] += a * t_before * up[ch];
                        g_alpha += (s.color[ch] - rest[ch]) * t_before * up[ch];
                        rest[ch] = s.color[ch] * a + (1.0 - a) * rest[ch];
                    }
                    if capped {
                        continue;
                    }
                    gr.opacity += g_alpha * falloff;
                    let g_power = g_alpha * a;
                    let dx = px - s.mean[0];
                    let dy = py - s.mean[1];
                    let [qa, qb, qc] = s.conic;
                    gr.mean[0] += g_power * (qa * dx + qb * dy);
                    gr.mean[1] += g_power * (qb * dx + qc * dy);
                    gr.conic[0] += -0.5 * g_power * dx * dx;
                    gr.conic[1] += -g_power * dx * dy;
                    gr.conic[2] += -0.5 * g_power * dy * dy;
                }
            }
        }
        grads
    });
    let mut per_splat = vec![Grad2D::default(); splats.len()];
    for (t, grads) in tile_grads.iter().enumerate() {
        for (e, gr) in grads.iter().enumerate() {
            per_splat[aux.tiles[t][e] as usize].add(gr);
        }
    }
    let center = cam.center();
    let per_gaussian = exec::map_range(splats.len(), |k| splat_backward(g, &splats[k], &per_splat[k], cam, &center));
    let mut out = GaussianGrads::zeros(g.len());
    for (s, gr) in splats.iter().zip(per_gaussian) {
        let i = s.index;
        out.positions[i] = gr.position;
        out.rotations[i] = gr.rotation;
        out.rotation_matrices[i] = gr.rotation_matrix;
        out.log_scales[i] = gr.log_scale;
        out.opacity_logits[i] = gr.opacity_logit;
        out.sh[i] = gr.sh;
    }
    Ok(out)
}

struct Grad3D {
    position: Vec3,
    rotation: Quat,
    rotation_matrix: Mat3,
    log_scale: Vec3,
    opacity_logit: f64,
    sh: [[f64; 3]; SH_COEFFS],
}

fn splat_backward(g: &GaussianSet, s: &Splat2D, gr: &Grad2D, cam: &Camera, center: &Vec3) -> Grad3D {
    let i = s.index;
    let p = g.positions[i];
    let t = cam.to_view(&p);
    let w = &cam.rotation;

    // Conic → 2D covariance: dΣ⁻¹ = −Σ⁻¹ dΣ Σ⁻¹.
    let q = Matrix2::new(s.conic[0], s.conic[1], s.conic[1], s.conic[2]);
    let g_q = Matrix2::new(gr.conic[0], 0.5 * gr.conic[1], 0.5 * gr.conic[1], gr.conic[2]);
    let g_c2 = -(q * g_q * q);

    // Σ' = J M Jᵀ + floor, M = W Σ Wᵀ.
    let q_raw = g.rotations[i];
    let q_unit = quat_normalize(&q_raw);
    let r = quat_to_matrix(&q_unit);
    let scale = g.scale(i);
    let d = Mat3::from_diagonal(&scale.component_mul(&scale));
    let cov3 = r * d * r.transpose();
    let m = w * cov3 * w.transpose();
    let j = jacobian_matrix(cam, &t);
    let g_m = j.transpose() * g_c2 * j;
    let g_j = 2.0 * g_c2 * j * m;
    let g_cov3 = w.transpose() * g_m * w;

    // Σ = R D Rᵀ.
    let g_r = 2.0 * g_cov3 * r * d;
    let rgr = r.transpose() * g_cov3 * r;
    let log_scale = Vec3::new(
        2.0 * d[(0, 0)] * rgr[(0, 0)],
        2.0 * d[(1, 1)] * rgr[(1, 1)],
        2.0 * d[(2, 2)] * rgr[(2, 2)],
    );
    let rotation = quat_normalize_backward(&q_raw, &quat_to_matrix_backward(&q_unit, &g_r));

    // Mean and Jacobian depend on the view-space position.
    let (fx, fy) = (cam.fx, cam.fy);
    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    let [gu, gv] = gr.mean;
    let g_t = Vec3::new(
        gu * fx * iz - g_j[(0, 2)] * fx * iz2,
        gv * fy * iz - g_j[(1, 2)] * fy * iz2,
        -gu * fx * t.x * iz2 - gv * fy * t.y * iz2 - g_j[(0, 0)] * fx * iz2 - g_j[(1, 1)] * fy * iz2
            + 2.0 * g_j[(0, 2)] * fx * t.x * iz2 * iz
            + 2.0 * g_j[(1, 2)] * fy * t.y * iz2 * iz,
    );
    let mut position = w.transpose() * g_t;

    // View-dependent color.
    let v = p - center;
    let vn = v.norm();
    let dir = v / vn;
    let basis = sh_basis(&dir);
    let basis_grad = sh_basis_grad(&dir);
    let h = &g.sh[i];
    let mut sh = [[0.0; 3]; SH_COEFFS];
    let mut g_dir = Vec3::zeros();
    for ch in 0..3 {
        if s.clamped[ch] {
            continue;
        }
        let gc = gr.color[ch];
        for k in 0..SH_COEFFS {
            sh[k][ch] = basis[k] * gc;
            g_dir += Vec3::from(basis_grad[k]) * (h[k][ch] * gc);
        }
    }
    position += (g_dir - dir * dir.dot(&g_dir)) / vn;

    Grad3D {
        position,
        rotation,
        rotation_matrix: g_r,
        log_scale,
        opacity_logit: gr.opacity * s.opacity * (1.0 - s.opacity),
        sh,
    }
}
