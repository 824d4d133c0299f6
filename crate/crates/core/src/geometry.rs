//! Linear morphable mesh model, skinning and expression-space utilities.

use serde::{Deserialize, Serialize};

use crate::container::TensorContainer;
use crate::error::{Error, Result};
use crate::math::{Mat3, RigidTransform, Vec3};

/// Head region of the UV atlas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Face,
    Hair,
}

impl Region {
    pub const ALL: [Region; 2] = [Region::Face, Region::Hair];

    pub fn name(self) -> &'static str {
        match self {
            Region::Face => "face",
            Region::Hair => "hair",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Region::Face => 0,
            Region::Hair => 1,
        }
    }

    pub fn parse(s: &str) -> Result<Region> {
        match s {
            "face" => Ok(Region::Face),
            "hair" => Ok(Region::Hair),
            other => Err(Error::invalid(format!("unknown region tag `{other}`"))),
        }
    }
}

/// Axis-aligned chart of one region inside the UV square.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtlasRegion {
    pub region: Region,
    pub uv_min: [f64; 2],
    pub uv_max: [f64; 2],
}

/// Mean shape, identity/expression bases, skinning and UV atlas of a
/// linear head model.
#[derive(Debug, Clone, PartialEq)]
pub struct MorphableModel {
    pub mean_shape: Vec<Vec3>,
    /// `V × 3 × D_id`, row-major.
    pub basis_id: Vec<f64>,
    pub id_dim: usize,
    /// `V × 3 × D_expr`, row-major.
    pub basis_expr: Vec<f64>,
    pub expr_dim: usize,
    /// `V × J`, row-major.
    pub skin_weights: Vec<f64>,
    /// Rest transform of each joint (joint frame to model frame).
    pub joints: Vec<RigidTransform>,
    pub faces: Vec<[u32; 3]>,
    /// Per-corner UV coordinates, one triple per face.
    pub uv_coords: Vec<[[f64; 2]; 3]>,
    pub regions: Vec<AtlasRegion>,
}

/// Skeletal pose: one local transform per joint plus a global rigid motion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub joints: Vec<RigidTransform>,
    pub global: RigidTransform,
}

impl Pose {
    pub fn identity(joint_count: usize) -> Self {
        Pose {
            joints: vec![RigidTransform::identity(); joint_count],
            global: RigidTransform::identity(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for j in &self.joints {
            j.validate()?;
        }
        self.global.validate()
    }

    /// Head transform used when the whole head moves rigidly: the global
    /// motion applied after the first joint's motion about its rest frame.
    pub fn rigid_head(&self, model_joints: &[RigidTransform]) -> RigidTransform {
        match (self.joints.first(), model_joints.first()) {
            (Some(local), Some(rest)) => self.global.compose(&joint_world(rest, local)),
            _ => self.global,
        }
    }
}

/// Identity, expression and pose coefficients of one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub delta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub pose: Pose,
}

impl Coefficients {
    pub fn validate(&self) -> Result<()> {
        if !self.delta.iter().chain(self.gamma.iter()).all(|v| v.is_finite()) {
            return Err(Error::invalid("non-finite coefficients"));
        }
        self.pose.validate()
    }
}

// G · P · G⁻¹ for rest transform G and local motion P.
fn joint_world(rest: &RigidTransform, local: &RigidTransform) -> RigidTransform {
    let inv = RigidTransform::new(
        rest.rotation.transpose(),
        -(rest.rotation.transpose() * rest.translation),
    );
    rest.compose(local).compose(&inv)
}

impl MorphableModel {
    pub fn vertex_count(&self) -> usize {
        self.mean_shape.len()
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    pub fn region(&self, r: Region) -> Option<&AtlasRegion> {
        self.regions.iter().find(|a| a.region == r)
    }

    /// Checks the structural invariants of the model.
    pub fn validate(&self) -> Result<()> {
        let v = self.vertex_count();
        let j = self.joint_count();
        if self.basis_id.len() != v * 3 * self.id_dim {
            return Err(Error::invalid("identity basis has wrong size"));
        }
        if self.basis_expr.len() != v * 3 * self.expr_dim {
            return Err(Error::invalid("expression basis has wrong size"));
        }
        if self.skin_weights.len() != v * j {
            return Err(Error::invalid("skin weights have wrong size"));
        }
        for (i, row) in self.skin_weights.chunks(j.max(1)).enumerate().take(v) {
            if j == 0 {
                break;
            }
            let sum: f64 = row.iter().sum();
            if row.iter().any(|w| *w < 0.0) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("skin weights of vertex {i} are not convex")));
            }
        }
        if self.faces.iter().flatten().any(|&i| i as usize >= v) {
            return Err(Error::invalid("face index out of range"));
        }
        if self.uv_coords.len() != self.faces.len() {
            return Err(Error::invalid("uv_coords must have one triple per face"));
        }
        if self
            .uv_coords
            .iter()
            .flatten()
            .flatten()
            .any(|c| !(0.0..=1.0).contains(c))
        {
            return Err(Error::invalid("uv coordinate outside [0,1]"));
        }
        Ok(())
    }

    /// `S̄ + δ B_id + γ B_expr`. No pose is applied.
    pub fn morph(&self, coeffs: &Coefficients) -> Result<Vec<Vec3>> {
        if coeffs.delta.len() != self.id_dim || coeffs.gamma.len() != self.expr_dim {
            return Err(Error::invalid(format!(
                "coefficient lengths ({}, {}) do not match basis dims ({}, {})",
                coeffs.delta.len(),
                coeffs.gamma.len(),
                self.id_dim,
                self.expr_dim
            )));
        }
        let mut out = self.mean_shape.clone();
        add_basis(&mut out, &self.basis_id, self.id_dim, &coeffs.delta);
        add_basis(&mut out, &self.basis_expr, self.expr_dim, &coeffs.gamma);
        Ok(out)
    }

    /// Neutral identity shape `S̄ + δ B_id`.
    pub fn identity_shape(&self, delta: &[f64]) -> Result<Vec<Vec3>> {
        if delta.len() != self.id_dim {
            return Err(Error::invalid("identity coefficient length mismatch"));
        }
        let mut out = self.mean_shape.clone();
        add_basis(&mut out, &self.basis_id, self.id_dim, delta);
        Ok(out)
    }

    /// Per-vertex expression offsets `γ B_expr`.
    pub fn expression_offsets(&self, gamma: &[f64]) -> Result<Vec<Vec3>> {
        if gamma.len() != self.expr_dim {
            return Err(Error::invalid("expression coefficient length mismatch"));
        }
        let mut out = vec![Vec3::zeros(); self.vertex_count()];
        add_basis(&mut out, &self.basis_expr, self.expr_dim, gamma);
        Ok(out)
    }

    /// Linear blend skinning followed by the global rigid transform.
    pub fn apply_lbs(&self, positions: &[Vec3], pose: &Pose) -> Result<Vec<Vec3>> {
        if pose.joints.len() != self.joint_count() {
            return Err(Error::invalid(format!(
                "pose has {} joints, model has {}",
                pose.joints.len(),
                self.joint_count()
            )));
        }
        if positions.len() != self.vertex_count() {
            return Err(Error::invalid("position count does not match the model"));
        }
        pose.validate()?;
        let world: Vec<RigidTransform> = self
            .joints
            .iter()
            .zip(&pose.joints)
            .map(|(rest, local)| joint_world(rest, local))
            .collect();
        let j = self.joint_count();
        Ok(positions
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let blended = if j == 0 {
                    *p
                } else {
                    let w = &self.skin_weights[i * j..(i + 1) * j];
                    let (rot, trans) = blend(&world, w);
                    rot * p + trans
                };
                pose.global.apply(&blended)
            })
            .collect())
    }

    /// Skinning weights of the vertex nearest to `p` (brute force).
    pub fn nearest_vertex(&self, p: &Vec3) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, v) in self.mean_shape.iter().enumerate() {
            let d = (v - p).norm_squared();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    pub fn vertex_weights(&self, v: usize) -> &[f64] {
        let j = self.joint_count();
        &self.skin_weights[v * j..(v + 1) * j]
    }

    /// Area-weighted vertex normals of a deformed mesh.
    pub fn vertex_normals(&self, positions: &[Vec3]) -> Vec<Vec3> {
        let mut n = vec![Vec3::zeros(); positions.len()];
        for f in &self.faces {
            let [a, b, c] = f.map(|i| i as usize);
            let fn_ = (positions[b] - positions[a]).cross(&(positions[c] - positions[a]));
            n[a] += fn_;
            n[b] += fn_;
            n[c] += fn_;
        }
        n.into_iter()
            .map(|v| {
                let l = v.norm();
                if l > 0.0 {
                    v / l
                } else {
                    v
                }
            })
            .collect()
    }
}

/// Weighted blend of joint transforms as an affine map `(A, b)`.
pub fn blend(world: &[RigidTransform], weights: &[f64]) -> (Mat3, Vec3) {
    let mut rot = Mat3::zeros();
    let mut trans = Vec3::zeros();
    for (t, &w) in world.iter().zip(weights) {
        rot += t.rotation * w;
        trans += t.translation * w;
    }
    (rot, trans)
}

/// World transforms `G_j P_j G_j⁻¹` for every joint of `pose`.
pub fn joint_world_transforms(model: &MorphableModel, pose: &Pose) -> Vec<RigidTransform> {
    model
        .joints
        .iter()
        .zip(&pose.joints)
        .map(|(rest, local)| joint_world(rest, local))
        .collect()
}

fn add_basis(out: &mut [Vec3], basis: &[f64], dim: usize, coeffs: &[f64]) {
    if dim == 0 {
        return;
    }
    for (v, p) in out.iter_mut().enumerate() {
        for c in 0..3 {
            let row = &basis[(v * 3 + c) * dim..(v * 3 + c + 1) * dim];
            p[c] += row.iter().zip(coeffs).map(|(b, k)| b * k).sum::<f64>();
        }
    }
}

/// Euclidean distance between two expression vectors.
pub fn expression_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Greedy farthest point sampling starting at `seed_index`.
///
/// Each new index maximizes the distance to the nearest already-selected
/// point; ties go to the lowest index. The first `m` outputs do not depend on
/// `k`.
pub fn farthest_point_sample(points: &[Vec<f64>], k: usize, seed_index: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Ok(Vec::new());
    }
    if points.is_empty() {
        return Err(Error::invalid("farthest point sampling over an empty set"));
    }
    if k > points.len() {
        return Err(Error::invalid(format!(
            "cannot select {k} of {} points",
            points.len()
        )));
    }
    if seed_index >= points.len() {
        return Err(Error::invalid("seed index out of range"));
    }
    let mut selected = vec![seed_index];
    let mut taken = vec![false; points.len()];
    taken[seed_index] = true;
    let mut min_d: Vec<f64> = points
        .iter()
        .map(|p| expression_distance(p, &points[seed_index]))
        .collect();
    while selected.len() < k {
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, &d) in min_d.iter().enumerate() {
            if !taken[i] && d > best_d {
                best_d = d;
                best = i;
            }
        }
        taken[best] = true;
        selected.push(best);
        for (i, p) in points.iter().enumerate() {
            let d = expression_distance(p, &points[best]);
            if d < min_d[i] {
                min_d[i] = d;
            }
        }
    }
    Ok(selected)
}

impl MorphableModel {
    /// Rounds every stored value to the nearest `f32`, making the model
    /// exactly representable in a tensor container.
    pub fn round_to_f32(&mut self) {
        let r = crate::container::round_f32;
        self.mean_shape.iter_mut().for_each(|p| p.iter_mut().for_each(|v| *v = r(*v)));
        self.basis_id.iter_mut().chain(self.basis_expr.iter_mut()).for_each(|v| *v = r(*v));
        self.skin_weights.iter_mut().for_each(|v| *v = r(*v));
        for j in &mut self.joints {
            j.rotation.iter_mut().chain(j.translation.iter_mut()).for_each(|v| *v = r(*v));
        }
        self.uv_coords.iter_mut().flatten().flatten().for_each(|v| *v = r(*v));
        for a in &mut self.regions {
            a.uv_min.iter_mut().chain(a.uv_max.iter_mut()).for_each(|v| *v = r(*v));
        }
    }

    pub fn save_into(&self, c: &mut TensorContainer) -> Result<()> {
        let v = self.vertex_count();
        let flat: Vec<f64> = self.mean_shape.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
        c.insert_f64("mesh.mean_shape", &[v, 3], &flat)?;
        c.insert_f64("mesh.basis_id", &[v, 3, self.id_dim], &self.basis_id)?;
        c.insert_f64("mesh.basis_expr", &[v, 3, self.expr_dim], &self.basis_expr)?;
        c.insert_f64("mesh.skin_weights", &[v, self.joint_count()], &self.skin_weights)?;
        let joints: Vec<f64> = self
            .joints
            .iter()
            .flat_map(|j| j.rotation.iter().chain(j.translation.iter()).copied().collect::<Vec<_>>())
            .collect();
        c.insert_f64("mesh.joints", &[self.joint_count(), 12], &joints)?;
        let faces: Vec<i64> = self.faces.iter().flatten().map(|i| *i as i64).collect();
        c.insert_i64("mesh.faces", &[self.faces.len(), 3], &faces)?;
        let uv: Vec<f64> = self.uv_coords.iter().flatten().flatten().copied().collect();
        c.insert_f64("mesh.uv", &[self.faces.len(), 3, 2], &uv)?;
        let regions = serde_json::to_string(&self.regions).map_err(|e| Error::InvalidState(e.to_string()))?;
        c.insert_str("mesh.regions", &regions)
    }

    pub fn load_from(c: &TensorContainer) -> Result<MorphableModel> {
        let dims = |name: &str| -> Result<Vec<usize>> { Ok(c.get(name)?.dims.iter().map(|d| *d as usize).collect()) };
        let md = dims("mesh.mean_shape")?;
        let v = md[0];
        let mean = c.f64s("mesh.mean_shape", Some(&[v, 3]))?;
        let id_dim = *dims("mesh.basis_id")?.get(2).ok_or_else(|| Error::Data("bad identity basis".into()))?;
        let expr_dim = *dims("mesh.basis_expr")?.get(2).ok_or_else(|| Error::Data("bad expression basis".into()))?;
        let j = *dims("mesh.joints")?.first().ok_or_else(|| Error::Data("bad joints".into()))?;
        let f = *dims("mesh.faces")?.first().ok_or_else(|| Error::Data("bad faces".into()))?;
        let joints = c
            .f64s("mesh.joints", Some(&[j, 12]))?
            .chunks(12)
            .map(|x| RigidTransform::new(Mat3::from_column_slice(&x[..9]), Vec3::new(x[9], x[10], x[11])))
            .collect();
        let faces = c
            .i64s("mesh.faces", Some(&[f, 3]))?
            .chunks(3)
            .map(|x| [x[0] as u32, x[1] as u32, x[2] as u32])
            .collect();
        let uv_coords = c
            .f64s("mesh.uv", Some(&[f, 3, 2]))?
            .chunks(6)
            .map(|x| [[x[0], x[1]], [x[2], x[3]], [x[4], x[5]]])
            .collect();
        let regions = serde_json::from_str(&c.string("mesh.regions")?).map_err(|e| Error::Data(format!("mesh regions: {e}")))?;
        let m = MorphableModel {
            mean_shape: mean.chunks(3).map(|p| Vec3::new(p[0], p[1], p[2])).collect(),
            basis_id: c.f64s("mesh.basis_id", Some(&[v, 3, id_dim]))?,
            id_dim,
            basis_expr: c.f64s("mesh.basis_expr", Some(&[v, 3, expr_dim]))?,
            expr_dim,
            skin_weights: c.f64s("mesh.skin_weights", Some(&[v, j]))?,
            joints,
            faces,
            uv_coords,
            regions,
        };
        m.validate()?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::rotation_about;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_model(rng: &mut ChaCha8Rng, v: usize, d_id: usize, d_expr: usize, j: usize) -> MorphableModel {
        let mut skin = Vec::with_capacity(v * j);
        for _ in 0..v {
            let raw: Vec<f64> = (0..j).map(|_| rng.gen_range(0.0..1.0)).collect();
            let s: f64 = raw.iter().sum();
            skin.extend(raw.iter().map(|x| x / s));
        }
        MorphableModel {
            mean_shape: (0..v)
                .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect(),
            basis_id: (0..v * 3 * d_id).map(|_| rng.gen_range(-0.1..0.1)).collect(),
            id_dim: d_id,
            basis_expr: (0..v * 3 * d_expr).map(|_| rng.gen_range(-0.1..0.1)).collect(),
            expr_dim: d_expr,
            skin_weights: skin,
            joints: (0..j)
                .map(|_| RigidTransform::translation(Vec3::new(0.0, rng.gen_range(-1.0..0.0), 0.0)))
                .collect(),
            faces: vec![[0, 1, 2]],
            uv_coords: vec![[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]],
            regions: vec![],
        }
    }

    fn coeffs(rng: &mut ChaCha8Rng, m: &MorphableModel) -> Coefficients {
        Coefficients {
            delta: (0..m.id_dim).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            gamma: (0..m.expr_dim).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            pose: Pose::identity(m.joint_count()),
        }
    }

    #[test]
    fn zero_coefficients_give_mean_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_model(&mut rng, 10, 4, 3, 1);
        let c = Coefficients {
            delta: vec![0.0; 4],
            gamma: vec![0.0; 3],
            pose: Pose::identity(1),
        };
        assert_eq!(m.morph(&c).unwrap(), m.mean_shape);
    }

    #[test]
    fn one_hot_identity_adds_basis_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random_model(&mut rng, 10, 4, 3, 1);
        let mut c = Coefficients {
            delta: vec![0.0; 4],
            gamma: vec![0.0; 3],
            pose: Pose::identity(1),
        };
        c.delta[2] = 1.0;
        let out = m.morph(&c).unwrap();
        for v in 0..10 {
            for k in 0..3 {
                let expect = m.mean_shape[v][k] + m.basis_id[(v * 3 + k) * 4 + 2];
                assert_eq!(out[v][k], expect);
            }
        }
    }

    #[test]
    fn morph_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_model(&mut rng, 25, 6, 5, 1);
        let c = coeffs(&mut rng, &m);
        let out = m.morph(&c).unwrap();
        for v in 0..25 {
            for k in 0..3 {
                let mut x = m.mean_shape[v][k];
                for d in 0..6 {
                    x += c.delta[d] * m.basis_id[v * 18 + k * 6 + d];
                }
                for d in 0..5 {
                    x += c.gamma[d] * m.basis_expr[v * 15 + k * 5 + d];
                }
                assert!((out[v][k] - x).abs() <= 1e-6 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn morph_rejects_wrong_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random_model(&mut rng, 5, 2, 2, 1);
        let c = Coefficients {
            delta: vec![0.0; 3],
            gamma: vec![0.0; 2],
            pose: Pose::identity(1),
        };
        assert!(matches!(m.morph(&c), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn lbs_identity_pose_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_model(&mut rng, 12, 1, 1, 2);
        let out = m.apply_lbs(&m.mean_shape, &Pose::identity(2)).unwrap();
        for (a, b) in out.iter().zip(&m.mean_shape) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn lbs_pure_translation_on_joint_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut m = random_model(&mut rng, 8, 1, 1, 2);
        for v in 0..8 {
            m.skin_weights[v * 2] = 1.0;
            m.skin_weights[v * 2 + 1] = 0.0;
        }
        let t = Vec3::new(0.5, -1.0, 2.0);
        let mut pose = Pose::identity(2);
        pose.joints[0] = RigidTransform::translation(t);
        let out = m.apply_lbs(&m.mean_shape, &pose).unwrap();
        for (a, b) in out.iter().zip(&m.mean_shape) {
            assert!((a - (b + t)).norm() < 1e-12);
        }
    }

    #[test]
    fn lbs_two_joint_blend_matches_explicit_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = random_model(&mut rng, 20, 1, 1, 2);
        let mut pose = Pose::identity(2);
        pose.joints[0] = RigidTransform::new(rotation_about(&Vec3::new(0.2, 1.0, 0.1), 0.4), Vec3::new(0.1, 0.0, 0.0));
        pose.joints[1] = RigidTransform::new(rotation_about(&Vec3::new(1.0, 0.0, 0.3), -0.7), Vec3::new(0.0, 0.2, -0.1));
        pose.global = RigidTransform::new(rotation_about(&Vec3::y(), 0.3), Vec3::new(0.0, 0.0, 1.0));
        let out = m.apply_lbs(&m.mean_shape, &pose).unwrap();
        for (i, p) in m.mean_shape.iter().enumerate() {
            // Rotate each joint about its pivot, then blend the two results.
            let mut acc = Vec3::zeros();
            for j in 0..2 {
                let pivot = m.joints[j].translation;
                let local = pose.joints[j];
                let moved = local.rotation * (p - pivot) + pivot + local.translation;
                acc += moved * m.skin_weights[i * 2 + j];
            }
            let expect = pose.global.rotation * acc + pose.global.translation;
            assert!((out[i] - expect).norm() < 1e-6);
        }
    }

    #[test]
    fn lbs_rejects_improper_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = random_model(&mut rng, 4, 1, 1, 1);
        let mut pose = Pose::identity(1);
        pose.joints[0].rotation[(0, 0)] = 2.0;
        assert!(matches!(m.apply_lbs(&m.mean_shape, &pose), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn expression_distance_examples() {
        assert_eq!(expression_distance(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((expression_distance(&[1.0, 0.0], &[0.0, 1.0]) - 2f64.sqrt()).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let a: Vec<f64> = (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut s = 0.0;
            for i in 0..7 {
                s += (a[i] - b[i]).powi(2);
            }
            assert!((expression_distance(&a, &b) - s.sqrt()).abs() < 1e-12);
            assert_eq!(expression_distance(&a, &b), expression_distance(&b, &a));
        }
    }

    #[test]
    fn fps_small_examples() {
        let pts = vec![vec![0.0], vec![1.0], vec![10.0]];
        assert_eq!(farthest_point_sample(&pts, 1, 0).unwrap(), vec![0]);
        assert_eq!(farthest_point_sample(&pts, 2, 0).unwrap(), vec![0, 2]);
        assert!(farthest_point_sample(&pts, 0, 0).unwrap().is_empty());
        assert!(farthest_point_sample(&pts, 4, 0).is_err());
    }
}
