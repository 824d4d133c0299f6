//! Gaussian primitives: container, per-part initialization from position
//! maps, corrective offsets and placement in world space.

pub mod sh;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, MorphableModel, Pose, Region};
use crate::math::{
    axis_angle_to_quat, axis_angle_to_quat_backward, matrix_to_quat, quat_mul, quat_normalize,
    quat_to_matrix, quat_to_matrix_backward, Mat3, Quat, Vec3,
};
use crate::uvmap::{BilinearTaps, SampleGrid, UvMap};

pub use sh::{eval_sh, ShCoeffs, SH_COEFFS};

/// Opacity of freshly initialized primitives.
pub const INIT_OPACITY: f64 = 0.7;
/// Smallest nearest-neighbour distance used for the initial scale.
pub const MIN_SCALE: f64 = 1e-3;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `n` Gaussians in pre-activation form: log-scales and opacity logits.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianSet {
    pub positions: Vec<Vec3>,
    pub rotations: Vec<Quat>,
    pub log_scales: Vec<Vec3>,
    pub opacity_logits: Vec<f64>,
    pub sh: Vec<ShCoeffs>,
}

impl GaussianSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn scale(&self, i: usize) -> Vec3 {
        self.log_scales[i].map(f64::exp)
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits[i])
    }

    pub fn push(&mut self, pos: Vec3, rot: Quat, log_scale: Vec3, logit: f64, sh: ShCoeffs) {
        self.positions.push(pos);
        self.rotations.push(rot);
        self.log_scales.push(log_scale);
        self.opacity_logits.push(logit);
        self.sh.push(sh);
    }

    pub fn extend(&mut self, other: &GaussianSet) {
        self.positions.extend_from_slice(&other.positions);
        self.rotations.extend_from_slice(&other.rotations);
        self.log_scales.extend_from_slice(&other.log_scales);
        self.opacity_logits.extend_from_slice(&other.opacity_logits);
        self.sh.extend_from_slice(&other.sh);
    }

    /// Reorders primitives: output `i` is input `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> GaussianSet {
        GaussianSet {
            positions: order.iter().map(|&i| self.positions[i]).collect(),
            rotations: order.iter().map(|&i| self.rotations[i]).collect(),
            log_scales: order.iter().map(|&i| self.log_scales[i]).collect(),
            opacity_logits: order.iter().map(|&i| self.opacity_logits[i]).collect(),
            sh: order.iter().map(|&i| self.sh[i]).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.rotations.len() != n
            || self.log_scales.len() != n
            || self.opacity_logits.len() != n
            || self.sh.len() != n
        {
            return Err(Error::invalid("gaussian set arrays have different lengths"));
        }
        for q in &self.rotations {
            let norm = crate::math::quat_norm(q);
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("rotation quaternion has norm {norm}")));
            }
        }
        Ok(())
    }
}

/// Gradients with respect to every pre-activation parameter of a
/// [`GaussianSet`]. `rotation_matrices` holds the same rotation gradient
/// expressed on the entries of `R(q)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianGrads {
    pub positions: Vec<Vec3>,
    pub rotations: Vec<Quat>,
    pub rotation_matrices: Vec<Mat3>,
    pub log_scales: Vec<Vec3>,
    pub opacity_logits: Vec<f64>,
    pub sh: Vec<ShCoeffs>,
}

impl GaussianGrads {
    pub fn zeros(n: usize) -> Self {
        GaussianGrads {
            positions: vec![Vec3::zeros(); n],
            rotations: vec![[0.0; 4]; n],
            rotation_matrices: vec![Mat3::zeros(); n],
            log_scales: vec![Vec3::zeros(); n],
            opacity_logits: vec![0.0; n],
            sh: vec![[[0.0; 3]; SH_COEFFS]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Adds `scale * other` in place.
    pub fn add_scaled(&mut self, other: &GaussianGrads, scale: f64) {
        for i in 0..self.len() {
            self.positions[i] += other.positions[i] * scale;
            for k in 0..4 {
                self.rotations[i][k] += other.rotations[i][k] * scale;
            }
            self.rotation_matrices[i] += other.rotation_matrices[i] * scale;
            self.log_scales[i] += other.log_scales[i] * scale;
            self.opacity_logits[i] += other.opacity_logits[i] * scale;
            for k in 0..SH_COEFFS {
                for c in 0..3 {
                    self.sh[i][k][c] += other.sh[i][k][c] * scale;
                }
            }
        }
    }

    pub fn slice(&self, start: usize, len: usize) -> GaussianGrads {
        let r = start..start + len;
        GaussianGrads {
            positions: self.positions[r.clone()].to_vec(),
            rotations: self.rotations[r.clone()].to_vec(),
            rotation_matrices: self.rotation_matrices[r.clone()].to_vec(),
            log_scales: self.log_scales[r.clone()].to_vec(),
            opacity_logits: self.opacity_logits[r.clone()].to_vec(),
            sh: self.sh[r].to_vec(),
        }
    }
}

/// Local surface frame at one sample and the derivatives it came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TangentFrame {
    pub rotation: Mat3,
    pub tangent: Vec3,
    pub bitangent: Vec3,
    pub degenerate: bool,
    taps: [BilinearTaps; 4],
    spans: [f64; 2],
}

/// Rotation `[T̂ B̂ N̂]` built from the UV derivatives of a position map,
/// re-orthogonalized by Gram–Schmidt. Derivatives are central differences
/// of bilinear samples one texel apart.
pub fn tangent_frame(position_map: &UvMap, u: f64, v: f64) -> Result<TangentFrame> {
    if position_map.channels != 3 {
        return Err(Error::invalid("tangent frames need a 3-channel position map"));
    }
    let (w, h) = (position_map.width, position_map.height);
    let du = 1.0 / w as f64;
    let dv = 1.0 / h as f64;
    let (up, um) = ((u + du).min(1.0), (u - du).max(0.0));
    let (vp, vm) = ((v + dv).min(1.0), (v - dv).max(0.0));
    let taps = [
        BilinearTaps::new(w, h, up, v)?,
        BilinearTaps::new(w, h, um, v)?,
        BilinearTaps::new(w, h, u, vp)?,
        BilinearTaps::new(w, h, u, vm)?,
    ];
    let mut s = [[0.0; 3]; 4];
    for (t, out) in taps.iter().zip(s.iter_mut()) {
        t.gather(&position_map.data, 3, out);
    }
    let spans = [up - um, vp - vm];
    let tangent = (Vec3::from(s[0]) - Vec3::from(s[1])) / spans[0];
    let bitangent = (Vec3::from(s[2]) - Vec3::from(s[3])) / spans[1];
    let (rotation, degenerate) = match gram_schmidt(&tangent, &bitangent) {
        Some(r) => (r, false),
        None => (Mat3::identity(), true),
    };
    Ok(TangentFrame {
        rotation,
        tangent,
        bitangent,
        degenerate,
        taps,
        spans,
    })
}

fn gram_schmidt(t: &Vec3, b: &Vec3) -> Option<Mat3> {
    let tn = t.norm();
    if tn < 1e-9 || t.cross(b).norm() < 1e-9 {
        return None;
    }
    let th = t / tn;
    let bp = b - th * b.dot(&th);
    let bh = bp / bp.norm();
    let nh = th.cross(&bh);
    Some(Mat3::from_columns(&[th, bh, nh]))
}

impl TangentFrame {
    /// Pulls a gradient on the rotation matrix back to the position map.
    pub fn backward(&self, grad_rotation: &Mat3, map_grad: &mut [f64]) {
        if self.degenerate {
            return;
        }
        let (gt, gb) = gram_schmidt_backward(&self.tangent, &self.bitangent, grad_rotation);
        let gt = gt / self.spans[0];
        let gb = gb / self.spans[1];
        self.taps[0].scatter(map_grad, 3, gt.as_slice());
        self.taps[1].scatter(map_grad, 3, (-gt).as_slice());
        self.taps[2].scatter(map_grad, 3, gb.as_slice());
        self.taps[3].scatter(map_grad, 3, (-gb).as_slice());
    }
}

fn gram_schmidt_backward(t: &Vec3, b: &Vec3, g: &Mat3) -> (Vec3, Vec3) {
    let tn = t.norm();
    let th = t / tn;
    let bp = b - th * b.dot(&th);
    let bpn = bp.norm();
    let bh = bp / bpn;
    let mut g_th: Vec3 = g.column(0).into();
    let mut g_bh: Vec3 = g.column(1).into();
    let g_nh: Vec3 = g.column(2).into();
    // n̂ = t̂ × b̂
    g_th += bh.cross(&g_nh);
    g_bh += g_nh.cross(&th);
    // b̂ = b'/|b'|
    let g_bp = (g_bh - bh * bh.dot(&g_bh)) / bpn;
    // b' = b − (b·t̂) t̂
    let bt = b.dot(&th);
    let g_b = g_bp - th * th.dot(&g_bp);
    g_th -= g_bp * bt + b * th.dot(&g_bp);
    // t̂ = t/|t|
    let g_t = (g_th - th * th.dot(&g_th)) / tn;
    (g_t, g_b)
}

/// Initial parameters of one head region, sampled from a position map.
#[derive(Debug, Clone, PartialEq)]
pub struct PartParams {
    pub region: Region,
    pub positions: Vec<Vec3>,
    pub frames: Vec<TangentFrame>,
    pub log_scales: Vec<f64>,
    pub opacity_logit: f64,
    /// `n × F` features sampled from the feature map, filled by the prior.
    pub features: Vec<f64>,
    taps: Vec<BilinearTaps>,
    nearest: Vec<Option<usize>>,
}

impl PartParams {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn rotation(&self, i: usize) -> &Mat3 {
        &self.frames[i].rotation
    }

    pub fn degenerate_frames(&self) -> usize {
        self.frames.iter().filter(|f| f.degenerate).count()
    }

    /// Nearest other sample of each sample, `None` when the distance was
    /// clamped to [`MIN_SCALE`].
    pub fn nearest(&self) -> &[Option<usize>] {
        &self.nearest
    }
}

/// Samples positions, nearest-neighbour scales, tangent-frame rotations and
/// the fixed initial opacity for every point of `grid`.
pub fn init_part(position_map: &UvMap, grid: &SampleGrid) -> Result<PartParams> {
    if grid.is_empty() {
        return Err(Error::invalid("empty sample grid"));
    }
    if position_map.channels != 3 {
        return Err(Error::invalid("position map must have 3 channels"));
    }
    let mut taps = Vec::with_capacity(grid.len());
    let mut positions = Vec::with_capacity(grid.len());
    let mut frames = Vec::with_capacity(grid.len());
    for &[u, v] in &grid.coords {
        let t = BilinearTaps::new(position_map.width, position_map.height, u, v)?;
        let mut p = [0.0; 3];
        t.gather(&position_map.data, 3, &mut p);
        taps.push(t);
        positions.push(Vec3::from(p));
        frames.push(tangent_frame(position_map, u, v)?);
    }
    let nn = nearest_neighbours(&positions);
    let mut nearest = Vec::with_capacity(nn.len());
    let mut log_scales = Vec::with_capacity(nn.len());
    for (j, d) in nn {
        if d < MIN_SCALE || j.is_none() {
            nearest.push(None);
            log_scales.push(MIN_SCALE.ln());
        } else {
            nearest.push(j);
            log_scales.push(d.ln());
        }
    }
    Ok(PartParams {
        region: grid.region,
        positions,
        frames,
        log_scales,
        opacity_logit: logit(INIT_OPACITY),
        features: Vec::new(),
        taps,
        nearest,
    })
}

/// Brute-force nearest other point of each point and its distance.
pub fn nearest_neighbours(points: &[Vec3]) -> Vec<(Option<usize>, f64)> {
    crate::exec::map_range(points.len(), |i| {
        let mut best = None;
        let mut best_d = f64::INFINITY;
        for (j, q) in points.iter().enumerate() {
            if j == i {
                continue;
            }
            let d = (points[i] - q).norm_squared();
            if d < best_d {
                best_d = d;
                best = Some(j);
            }
        }
        (best, best_d.sqrt())
    })
}

/// Corrective offsets regressed for one part.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PartOffsets {
    pub d_position: Vec<Vec3>,
    /// Axis-angle rotation offsets.
    pub d_rotation: Vec<Vec3>,
    pub d_log_scale: Vec<Vec3>,
    pub d_opacity: Vec<f64>,
    pub sh: Vec<ShCoeffs>,
}

impl PartOffsets {
    pub fn zeros(n: usize) -> Self {
        PartOffsets {
            d_position: vec![Vec3::zeros(); n],
            d_rotation: vec![Vec3::zeros(); n],
            d_log_scale: vec![Vec3::zeros(); n],
            d_opacity: vec![0.0; n],
            sh: vec![[[0.0; 3]; SH_COEFFS]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.d_position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d_position.is_empty()
    }
}

/// Applies additive offsets to a part: positions, log-scales and opacity
/// logits are shifted, rotations are composed as `q(δθ) ⊗ q_base`.
pub fn apply_offsets(part: &PartParams, offsets: &PartOffsets) -> Result<GaussianSet> {
    let n = part.len();
    if offsets.len() != n
        || offsets.d_rotation.len() != n
        || offsets.d_log_scale.len() != n
        || offsets.d_opacity.len() != n
        || offsets.sh.len() != n
    {
        return Err(Error::invalid("offset arrays do not match the part size"));
    }
    let mut out = GaussianSet::default();
    for i in 0..n {
        let base = matrix_to_quat(part.rotation(i));
        let q = quat_normalize(&quat_mul(&axis_angle_to_quat(&offsets.d_rotation[i]), &base));
        let ls = Vec3::repeat(part.log_scales[i]) + offsets.d_log_scale[i];
        out.push(
            part.positions[i] + offsets.d_position[i],
            q,
            ls,
            part.opacity_logit + offsets.d_opacity[i],
            offsets.sh[i],
        );
    }
    Ok(out)
}

/// Gradients of one part's offsets plus the gradient on its position map.
#[derive(Debug, Clone, PartialEq)]
pub struct PartBackward {
    pub offsets: PartOffsets,
    pub position_map: Vec<f64>,
}

/// Adjoint of `apply_offsets(init_part(map, grid), offsets)` given the
/// gradients of the resulting primitives.
pub fn part_backward(
    part: &PartParams,
    offsets: &PartOffsets,
    grads: &GaussianGrads,
    map_len: usize,
) -> PartBackward {
    let n = part.len();
    let mut out = PartOffsets::zeros(n);
    let mut map_grad = vec![0.0; map_len];
    let mut pos_grad = grads.positions.clone();
    for i in 0..n {
        out.d_position[i] = grads.positions[i];
        out.d_log_scale[i] = grads.log_scales[i];
        out.d_opacity[i] = grads.opacity_logits[i];
        out.sh[i] = grads.sh[i];
        // R(q) = R(δθ) R_base
        let q_delta = axis_angle_to_quat(&offsets.d_rotation[i]);
        let r_delta = quat_to_matrix(&q_delta);
        let g = &grads.rotation_matrices[i];
        let g_base = r_delta.transpose() * g;
        let g_delta = g * part.rotation(i).transpose();
        let gq = quat_to_matrix_backward(&q_delta, &g_delta);
        out.d_rotation[i] = axis_angle_to_quat_backward(&offsets.d_rotation[i], &gq);
        part.frames[i].backward(&g_base, &mut map_grad);
        // Isotropic base scale: log ‖φ_i − φ_j‖.
        if let Some(j) = part.nearest[i] {
            let g_ls = grads.log_scales[i].sum();
            let d = part.positions[i] - part.positions[j];
            let gd = d * (g_ls / d.norm_squared());
            pos_grad[i] += gd;
            pos_grad[j] -= gd;
        }
    }
    for i in 0..n {
        part.taps[i].scatter(&mut map_grad, 3, pos_grad[i].as_slice());
    }
    PartBackward {
        offsets: out,
        position_map: map_grad,
    }
}

/// How primitives are carried from model space into world space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorldMode {
    /// Whole head moves with the global transform composed with the neck.
    #[default]
    GlobalRigid,
    /// Per-primitive skinning with the weights of the nearest mesh vertex.
    NearestVertexLbs,
}

/// Per-primitive affine placement `p ↦ A p + b` and orientation change `R`.
#[derive(Debug, Clone)]
pub struct Placement {
    linear: Vec<Mat3>,
    offset: Vec<Vec3>,
    rotation: Vec<Mat3>,
}

/// Places model-space primitives in world space.
pub fn to_world(
    g: &GaussianSet,
    model: &MorphableModel,
    pose: &Pose,
    mode: WorldMode,
) -> Result<(GaussianSet, Placement)> {
    pose.validate()?;
    let n = g.len();
    let placement = match mode {
        WorldMode::GlobalRigid => {
            let t = pose.rigid_head(&model.joints);
            Placement {
                linear: vec![t.rotation; n],
                offset: vec![t.translation; n],
                rotation: vec![t.rotation; n],
            }
        }
        WorldMode::NearestVertexLbs => {
            if pose.joints.len() != model.joint_count() {
                return Err(Error::invalid("pose joint count does not match the model"));
            }
            let world = geometry::joint_world_transforms(model, pose);
            let mut p = Placement {
                linear: Vec::with_capacity(n),
                offset: Vec::with_capacity(n),
                rotation: Vec::with_capacity(n),
            };
            for pos in &g.positions {
                let v = model.nearest_vertex(pos);
                let w = model.vertex_weights(v);
                let (a, b) = geometry::blend(&world, w);
                let dominant = w
                    .iter()
                    .enumerate()
                    .fold(0, |best, (j, x)| if *x > w[best] { j } else { best });
                p.linear.push(pose.global.rotation * a);
                p.offset.push(pose.global.rotation * b + pose.global.translation);
                p.rotation.push(pose.global.rotation * world[dominant].rotation);
            }
            p
        }
    };
    Ok((placement.apply(g), placement))
}

impl Placement {
    pub fn apply(&self, g: &GaussianSet) -> GaussianSet {
        let mut out = g.clone();
        for i in 0..g.len() {
            out.positions[i] = self.linear[i] * g.positions[i] + self.offset[i];
            let rq = matrix_to_quat(&self.rotation[i]);
            out.rotations[i] = quat_normalize(&quat_mul(&rq, &g.rotations[i]));
        }
        out
    }

    /// Pulls world-space gradients back to model space (in place).
    pub fn backward(&self, grads: &mut GaussianGrads) {
        for i in 0..grads.len() {
            grads.positions[i] = self.linear[i].transpose() * grads.positions[i];
            grads.rotation_matrices[i] = self.rotation[i].transpose() * grads.rotation_matrices[i];
            // Model-space quaternion gradient of R_world = R_place R(q).
            let rq = matrix_to_quat(&self.rotation[i]);
            let conj = [rq[0], -rq[1], -rq[2], -rq[3]];
            let g = grads.rotations[i];
            // q_world = rq ⊗ q is linear in q; its adjoint is conj(rq) ⊗ g.
            grads.rotations[i] = quat_mul(&conj, &g);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{is_proper_rotation, rotation_about, RigidTransform};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn linear_map(w: usize, h: usize, f: impl Fn(f64, f64) -> [f64; 3]) -> UvMap {
        let mut data = Vec::with_capacity(w * h * 3);
        for r in 0..h {
            for c in 0..w {
                let u = (c as f64 + 0.5) / w as f64;
                let v = (r as f64 + 0.5) / h as f64;
                data.extend_from_slice(&f(u, v));
            }
        }
        UvMap::from_data(w, h, 3, data).unwrap()
    }

    #[test]
    fn planar_map_gives_identity_frame() {
        let map = linear_map(16, 16, |u, v| [u, v, 0.0]);
        let f = tangent_frame(&map, 0.5, 0.4).unwrap();
        assert!((f.rotation - Mat3::identity()).abs().max() < 1e-9);
    }

    #[test]
    fn rotated_plane_gives_quarter_turn() {
        let map = linear_map(16, 16, |u, v| [v, -u, 0.0]);
        let f = tangent_frame(&map, 0.5, 0.5).unwrap();
        let expect = rotation_about(&Vec3::z(), -std::f64::consts::FRAC_PI_2);
        assert!((f.rotation - expect).abs().max() < 1e-9, "{}", f.rotation);
    }

    #[test]
    fn degenerate_map_falls_back_to_identity() {
        let map = linear_map(8, 8, |_, _| [1.0, 2.0, 3.0]);
        let f = tangent_frame(&map, 0.5, 0.5).unwrap();
        assert!(f.degenerate);
        assert_eq!(f.rotation, Mat3::identity());
    }

    #[test]
    fn frames_are_proper_rotations_on_curved_maps() {
        let map = linear_map(32, 32, |u, v| {
            let (a, b) = (u * 5.0, v * 2.5);
            [a.cos() * b.sin(), a.sin() * b.sin(), b.cos() + 0.3 * u]
        });
        for i in 0..20 {
            let u = 0.05 + 0.045 * i as f64;
            let f = tangent_frame(&map, u, 0.37).unwrap();
            assert!(is_proper_rotation(&f.rotation, 1e-5));
        }
    }

    #[test]
    fn two_samples_share_their_distance_as_scale() {
        let map = linear_map(8, 8, |u, v| [2.0 * u, 3.0 * v, 0.0]);
        let grid = SampleGrid::new(Region::Face, 2, 1, vec![[0.25, 0.5], [0.75, 0.5]]).unwrap();
        let part = init_part(&map, &grid).unwrap();
        let d = (part.positions[0] - part.positions[1]).norm();
        assert!((d - 1.0).abs() < 1e-12);
        for ls in &part.log_scales {
            assert!((ls.exp() - d).abs() < 1e-12);
        }
        assert!((sigmoid(part.opacity_logit) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn single_sample_uses_minimum_scale() {
        let map = linear_map(8, 8, |u, v| [u, v, 0.0]);
        let grid = SampleGrid::new(Region::Hair, 1, 1, vec![[0.5, 0.5]]).unwrap();
        let part = init_part(&map, &grid).unwrap();
        assert!((part.log_scales[0].exp() - MIN_SCALE).abs() < 1e-15);
    }

    #[test]
    fn flat_grid_scale_equals_spacing() {
        // 8x8 samples at texel centers of a 16x16 map spanning [0,1]^2.
        let map = linear_map(16, 16, |u, v| [u, v, 0.0]);
        let mut coords = Vec::new();
        for r in 0..8 {
            for c in 0..8 {
                coords.push([(2.0 * c as f64 + 1.0) / 16.0, (2.0 * r as f64 + 1.0) / 16.0]);
            }
        }
        let grid = SampleGrid::new(Region::Face, 8, 8, coords).unwrap();
        let part = init_part(&map, &grid).unwrap();
        for ls in &part.log_scales {
            assert!((ls.exp() - 0.125).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_offsets_keep_base_parameters() {
        let map = linear_map(16, 16, |u, v| [u, v, 0.1 * u * v]);
        let grid = SampleGrid::new(Region::Face, 3, 1, vec![[0.3, 0.3], [0.5, 0.6], [0.7, 0.4]]).unwrap();
        let part = init_part(&map, &grid).unwrap();
        let g = apply_offsets(&part, &PartOffsets::zeros(3)).unwrap();
        for i in 0..3 {
            assert_eq!(g.positions[i], part.positions[i]);
            assert!((g.opacity(i) - 0.7).abs() < 1e-12);
            assert!((g.scale(i) - Vec3::repeat(part.log_scales[i].exp())).norm() < 1e-12);
            assert!((quat_to_matrix(&g.rotations[i]) - part.rotation(i)).abs().max() < 1e-12);
        }
        let mut off = PartOffsets::zeros(3);
        off.d_position = vec![Vec3::x(); 3];
        let g2 = apply_offsets(&part, &off).unwrap();
        for i in 0..3 {
            assert_eq!(g2.positions[i], part.positions[i] + Vec3::x());
        }
    }

    #[test]
    fn random_offsets_match_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let map = linear_map(16, 16, |u, v| [u, v.sin(), 0.2 * u * v]);
        let grid = SampleGrid::new(Region::Face, 2, 2, vec![[0.2, 0.3], [0.6, 0.3], [0.2, 0.7], [0.6, 0.7]]).unwrap();
        let part = init_part(&map, &grid).unwrap();
        let mut off = PartOffsets::zeros(4);
        for i in 0..4 {
            off.d_position[i] = Vec3::new(rng.gen(), rng.gen(), rng.gen());
            off.d_rotation[i] = Vec3::new(rng.gen(), rng.gen(), rng.gen()) * 0.5;
            off.d_log_scale[i] = Vec3::new(rng.gen(), rng.gen(), rng.gen());
            off.d_opacity[i] = rng.gen_range(-1.0..1.0);
        }
        let g = apply_offsets(&part, &off).unwrap();
        for i in 0..4 {
            for k in 0..3 {
                assert!((g.positions[i][k] - (part.positions[i][k] + off.d_position[i][k])).abs() < 1e-12);
                let s = (part.log_scales[i] + off.d_log_scale[i][k]).exp();
                assert!((g.scale(i)[k] - s).abs() < 1e-6 * s);
            }
            let o = 1.0 / (1.0 + (-(logit(0.7) + off.d_opacity[i])).exp());
            assert!((g.opacity(i) - o).abs() < 1e-6);
            let r = rotation_about(&off.d_rotation[i], off.d_rotation[i].norm()) * part.rotation(i);
            assert!((quat_to_matrix(&g.rotations[i]) - r).abs().max() < 1e-6);
        }
    }

    #[test]
    fn to_world_identity_and_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let mut g = GaussianSet::default();
        for _ in 0..5 {
            g.push(
                Vec3::new(rng.gen(), rng.gen(), rng.gen()),
                quat_normalize(&[rng.gen(), rng.gen(), rng.gen(), rng.gen()]),
                Vec3::new(-2.0, -2.0, -2.0),
                0.0,
                [[0.0; 3]; 16],
            );
        }
        let model = crate::synthgen::make_toy_model(&crate::synthgen::ToyModelSpec::small(), 1);
        let (same, _) = to_world(&g, &model, &Pose::identity(model.joint_count()), WorldMode::GlobalRigid).unwrap();
        for i in 0..5 {
            assert!((same.positions[i] - g.positions[i]).norm() < 1e-12);
            for k in 0..4 {
                assert!((same.rotations[i][k] - g.rotations[i][k]).abs() < 1e-12);
            }
        }
        let mut pose = Pose::identity(model.joint_count());
        pose.global = RigidTransform::translation(Vec3::new(1.0, 2.0, 3.0));
        let (moved, _) = to_world(&g, &model, &pose, WorldMode::GlobalRigid).unwrap();
        for i in 0..5 {
            assert!((moved.positions[i] - g.positions[i] - Vec3::new(1.0, 2.0, 3.0)).norm() < 1e-12);
            for k in 0..4 {
                assert!((moved.rotations[i][k] - g.rotations[i][k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn part_backward_matches_finite_differences() {
        // Scalar loss = Σ weights · (all primitive parameters).
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let map = linear_map(12, 12, |u, v| [u + 0.3 * v * v, v + 0.1 * u, 0.4 * u * v]);
        let grid = SampleGrid::new(Region::Face, 3, 2, vec![[0.3, 0.3], [0.5, 0.35], [0.7, 0.3], [0.3, 0.6], [0.52, 0.62], [0.71, 0.6]]).unwrap();
        let mut off = PartOffsets::zeros(6);
        for i in 0..6 {
            off.d_rotation[i] = Vec3::new(rng.gen(), rng.gen(), rng.gen()) * 0.3;
        }
        let wp: Vec<Vec3> = (0..6).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect();
        let wr: Vec<Mat3> = (0..6).map(|_| Mat3::from_fn(|_, _| rng.gen_range(-1.0..1.0))).collect();
        let ws: Vec<Vec3> = (0..6).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect();
        let loss = |m: &UvMap, o: &PartOffsets| {
            let part = init_part(m, &grid).unwrap();
            let g = apply_offsets(&part, o).unwrap();
            let mut l = 0.0;
            for i in 0..6 {
                l += g.positions[i].dot(&wp[i]);
                l += quat_to_matrix(&g.rotations[i]).component_mul(&wr[i]).sum();
                l += g.log_scales[i].dot(&ws[i]);
            }
            l
        };
        let part = init_part(&map, &grid).unwrap();
        let mut grads = GaussianGrads::zeros(6);
        grads.positions = wp.clone();
        grads.rotation_matrices = wr.clone();
        grads.log_scales = ws.clone();
        let back = part_backward(&part, &off, &grads, map.data.len());
        let h = 1e-6;
        for idx in 0..map.data.len() {
            let mut p = map.clone();
            let mut m = map.clone();
            p.data[idx] += h;
            m.data[idx] -= h;
            let fd = (loss(&p, &off) - loss(&m, &off)) / (2.0 * h);
            let an = back.position_map[idx];
            assert!((fd - an).abs() <= 1e-5 * fd.abs().max(1.0), "map[{idx}]: fd {fd} an {an}");
        }
        for i in 0..6 {
            for k in 0..3 {
                let mut p = off.clone();
                let mut m = off.clone();
                p.d_rotation[i][k] += h;
                m.d_rotation[i][k] -= h;
                let fd = (loss(&map, &p) - loss(&map, &m)) / (2.0 * h);
                let an = back.offsets.d_rotation[i][k];
                assert!((fd - an).abs() <= 1e-5 * fd.abs().max(1.0), "rot[{i}][{k}]: fd {fd} an {an}");
            }
        }
    }
}
