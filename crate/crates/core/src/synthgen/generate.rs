use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{is_hair_row, make_toy_model, vertex_angles, ToyModelSpec};
use crate::container::{round_f32, TensorContainer};
use crate::error::{Error, Result};
use crate::exec;
use crate::geometry::{Coefficients, MorphableModel, Pose};
use crate::imageio::{save_png, Image};
use crate::math::{axis_angle_to_quat, quat_to_matrix, RigidTransform, Vec3, QUAT_IDENTITY};
use crate::primitives::{logit, GaussianSet};
use crate::primitives::sh::SH_COEFFS;
use crate::splatter::{rasterize, Camera, RenderSettings};
use crate::uvmap::{rasterize_uv, UvMap};

/// Version of the `index.json` schema.
pub const INDEX_FORMAT: u32 = 1;

const Y00: f64 = 0.282_094_791_773_878_14;

/// Color ranges of the procedural textures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Palette {
    pub skin_min: [f64; 3],
    pub skin_max: [f64; 3],
    pub hair_min: [f64; 3],
    pub hair_max: [f64; 3],
    /// Relative amplitude of the smooth skin pattern and hair streaks.
    pub pattern: f64,
}

impl Default for Palette {
    fn default() -> Self {
        Palette {
            skin_min: [0.45, 0.3, 0.2],
            skin_max: [0.95, 0.8, 0.7],
            hair_min: [0.05, 0.03, 0.02],
            hair_max: [0.6, 0.45, 0.3],
            pattern: 0.15,
        }
    }
}

/// Size and appearance knobs of the toy dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySpec {
    pub identities: usize,
    pub expressions: usize,
    pub cameras: usize,
    pub image_size: usize,
    pub map_size: usize,
    pub seed: u64,
    pub model: ToyModelSpec,
    pub palette: Palette,
    /// Standard deviation of identity and expression coefficients.
    pub id_sigma: f64,
    pub expr_sigma: f64,
    /// Maximum neck rotation per axis, degrees.
    pub pose_degrees: f64,
    /// Maximum global translation per axis, model units.
    pub pose_translation: f64,
    pub camera_distance: f64,
    /// Focal length as a multiple of the image size.
    pub focal_factor: f64,
    /// Ground-truth Gaussian radius as a fraction of the mean mesh edge.
    pub gaussian_scale: f64,
    pub gaussian_opacity: f64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            identities: 32,
            expressions: 8,
            cameras: 6,
            image_size: 128,
            map_size: 64,
            seed: 7,
            model: ToyModelSpec::default(),
            palette: Palette::default(),
            id_sigma: 1.0,
            expr_sigma: 1.0,
            pose_degrees: 8.0,
            pose_translation: 0.05,
            camera_distance: 4.5,
            focal_factor: 1.1,
            gaussian_scale: 0.7,
            gaussian_opacity: 0.95,
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        if self.identities == 0 || self.expressions == 0 || self.cameras == 0 {
            return Err(Error::Config("toy dataset counts must be >= 1".into()));
        }
        if self.image_size < 16 || self.map_size < 8 {
            return Err(Error::Config("image_size must be >= 16 and map_size >= 8".into()));
        }
        if self.model.face_rows == 0 || self.model.face_rows >= self.model.lat_rows || self.model.lon_cols < 3 {
            return Err(Error::Config("toy model needs face rows below the top ring and >= 3 columns".into()));
        }
        if !(self.camera_distance > 1.5) || !(self.focal_factor > 0.0) {
            return Err(Error::Config("camera_distance must exceed 1.5 and focal_factor be positive".into()));
        }
        if !(self.gaussian_scale > 0.0) || !(self.gaussian_opacity > 0.0 && self.gaussian_opacity < 1.0) {
            return Err(Error::Config("gaussian_scale must be > 0 and gaussian_opacity in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn build_model(&self) -> MorphableModel {
        let mut m = make_toy_model(&self.model, self.seed);
        m.round_to_f32();
        m
    }

    pub fn render_settings(&self) -> RenderSettings {
        RenderSettings::default()
    }
}

// Independent stream per (domain, index) so samples do not depend on
// generation order.
fn stream(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(domain << 40 | index);
    rng
}

fn unit_normal(rng: &mut impl Rng) -> f64 {
    // Uniform with unit variance.
    rng.gen_range(-1.0..1.0) * 3f64.sqrt()
}

/// Identity coefficients and per-vertex albedo of one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyIdentity {
    pub delta: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|k| a[k] + (b[k] - a[k]) * t[k])
}

/// Draws identity `index`: shape coefficients plus a procedural texture
/// (skin pattern, eyes, mouth, streaked hair).
pub fn sample_identity(spec: &ToySpec, model: &MorphableModel, index: usize) -> ToyIdentity {
    let mut rng = stream(spec.seed, 1, index as u64);
    let delta = (0..model.id_dim).map(|_| round_f32(unit_normal(&mut rng) * spec.id_sigma)).collect();
    let p = &spec.palette;
    let t = |rng: &mut ChaCha8Rng| [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
    let mut tone = t(&mut rng);
    tone = [tone[0], 0.6 * tone[0] + 0.4 * tone[1], 0.6 * tone[0] + 0.4 * tone[2]];
    let skin = lerp3(p.skin_min, p.skin_max, tone);
    let hair = lerp3(p.hair_min, p.hair_max, t(&mut rng));
    let eye = [0.1, 0.15, 0.25].map(|c| c * rng.gen_range(0.5..2.0));
    let lip = [0.75, 0.3, 0.3].map(|c: f64| (c * rng.gen_range(0.8..1.1)).min(1.0));
    let (f1, f2) = (rng.gen_range(1..=3) as f64, rng.gen_range(1.0..4.0));
    let (p1, p2) = (rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3));
    let streaks = rng.gen_range(6.0..14.0_f64).round();
    let eye_lat = rng.gen_range(0.1..0.25);
    let eye_lon = rng.gen_range(0.3..0.45);
    let mouth_lat = rng.gen_range(-0.45..-0.3);

    let cols = spec.model.lon_cols;
    let colors = vertex_angles(&spec.model)
        .iter()
        .enumerate()
        .map(|(v, &(lat, lon))| {
            let lon_s = lon.sin().atan2(lon.cos());
            let ring = v / cols;
            let c = if is_hair_row(&spec.model, ring) {
                let s = 1.0 + p.pattern * (streaks * lon + p1).sin() * (2.0 * lat).cos();
                hair.map(|h| h * s)
            } else {
                let s = 1.0 + p.pattern * (f1 * lon + p1).sin() * (f2 * lat + p2).sin();
                let mut c = skin.map(|k| k * s);
                let blob = |lat0: f64, lon0: f64, sl: f64, sw: f64| {
                    (-((lat - lat0) / sl).powi(2) / 2.0 - ((lon_s - lon0) / sw).powi(2) / 2.0).exp()
                };
                let we = blob(eye_lat, eye_lon, 0.07, 0.09) + blob(eye_lat, -eye_lon, 0.07, 0.09);
                let wm = blob(mouth_lat, 0.0, 0.06, 0.22);
                for k in 0..3 {
                    c[k] = c[k] * (1.0 - we.min(1.0)) + eye[k] * we.min(1.0);
                    c[k] = c[k] * (1.0 - wm.min(1.0)) + lip[k] * wm.min(1.0);
                }
                c
            };
            c.map(|x| round_f32(x.clamp(0.0, 1.0)))
        })
        .collect();
    ToyIdentity { delta, colors }
}

/// Pose from neck axis-angle and global translation (`[w; t]`).
pub fn pose_from_params(params: &[f64; 6], joint_count: usize) -> Pose {
    let w = Vec3::new(params[0], params[1], params[2]);
    let r = quat_to_matrix(&axis_angle_to_quat(&w));
    let mut pose = Pose::identity(joint_count);
    if let Some(j) = pose.joints.first_mut() {
        *j = RigidTransform::new(r, Vec3::zeros());
    } else {
        pose.global.rotation = r;
    }
    pose.global.translation = Vec3::new(params[3], params[4], params[5]);
    pose
}

/// Expression coefficients and pose parameters of sample `(identity, expression)`.
pub fn sample_expression(spec: &ToySpec, model: &MorphableModel, identity: usize, expression: usize) -> (Vec<f64>, [f64; 6]) {
    let mut rng = stream(spec.seed, 2, (identity as u64) << 16 | expression as u64);
    let gamma = (0..model.expr_dim).map(|_| round_f32(unit_normal(&mut rng) * spec.expr_sigma)).collect();
    let a = spec.pose_degrees.to_radians();
    let t = spec.pose_translation;
    let mut pose = [0.0; 6];
    for (k, p) in pose.iter_mut().enumerate() {
        let lim = if k < 3 { a } else { t };
        *p = if lim > 0.0 { round_f32(rng.gen_range(-lim..=lim)) } else { 0.0 };
    }
    (gamma, pose)
}

/// Front ring plus upper-hemisphere cameras looking at the head center.
pub fn toy_cameras(spec: &ToySpec) -> Result<Vec<Camera>> {
    let n = spec.cameras;
    let ring = n.div_ceil(2);
    let upper = n - ring;
    let spread = |count: usize, half: f64| -> Vec<f64> {
        if count == 1 {
            vec![0.0]
        } else {
            (0..count).map(|i| -half + 2.0 * half * i as f64 / (count - 1) as f64).collect()
        }
    };
    let mut views: Vec<(f64, f64)> = spread(ring, 50.0).into_iter().map(|az| (az, 0.0)).collect();
    if upper > 0 {
        views.extend(spread(upper, 40.0).into_iter().map(|az| (az, 35.0)));
    }
    let d = spec.camera_distance;
    let s = spec.image_size;
    views
        .into_iter()
        .map(|(az, el)| {
            let (az, el) = (f64::to_radians(az), f64::to_radians(el));
            let eye = Vec3::new(d * el.cos() * az.sin(), d * el.sin(), d * el.cos() * az.cos());
            Camera::look_at(eye, Vec3::zeros(), Vec3::new(0.0, 1.0, 0.0), spec.focal_factor * s as f64, s, s)
        })
        .collect()
}

/// Mean edge length of the mean shape.
pub fn mean_edge_length(model: &MorphableModel) -> f64 {
    let mut sum = 0.0;
    let mut n = 0;
    for f in &model.faces {
        for k in 0..3 {
            let (a, b) = (f[k] as usize, f[(k + 1) % 3] as usize);
            sum += (model.mean_shape[a] - model.mean_shape[b]).norm();
            n += 1;
        }
    }
    sum / n.max(1) as f64
}

/// Ground-truth primitives: one isotropic DC-colored Gaussian per posed vertex.
pub fn ground_truth_gaussians(spec: &ToySpec, model: &MorphableModel, id: &ToyIdentity, coeffs: &Coefficients) -> Result<GaussianSet> {
    let verts = model.apply_lbs(&model.morph(coeffs)?, &coeffs.pose)?;
    let ls = (spec.gaussian_scale * mean_edge_length(model)).ln();
    let mut g = GaussianSet::default();
    for (p, c) in verts.iter().zip(&id.colors) {
        let mut sh = [[0.0; 3]; SH_COEFFS];
        sh[0] = c.map(|x| (x - 0.5) / Y00);
        g.push(*p, QUAT_IDENTITY, Vec3::repeat(ls), logit(spec.gaussian_opacity), sh);
    }
    Ok(g)
}

/// Renders one ground-truth frame: RGB image and alpha mask, both quantized
/// to 8 bits.
pub fn render_frame(spec: &ToySpec, model: &MorphableModel, id: &ToyIdentity, coeffs: &Coefficients, cam: &Camera) -> Result<(Image, Image)> {
    let g = ground_truth_gaussians(spec, model, id, coeffs)?;
    let r = rasterize(&g, cam, &spec.render_settings())?;
    let mask = Image::from_data(r.image.width, r.image.height, 1, r.alpha.clone())?;
    Ok((r.image.quantized(), mask.quantized()))
}

/// Texture, neutral-position and validity maps of an identity.
pub fn identity_maps(model: &MorphableModel, id: &ToyIdentity, size: usize) -> Result<(UvMap, UvMap)> {
    let colors: Vec<f64> = id.colors.iter().flatten().copied().collect();
    let (tex, _) = rasterize_uv(model, &colors, 3, size, size)?;
    let shape: Vec<f64> = model.identity_shape(&id.delta)?.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
    let (verts, _) = rasterize_uv(model, &shape, 3, size, size)?;
    Ok((round_map(tex), round_map(verts)))
}

/// Expression offset map `R_uv(γ B_expr)`.
pub fn expression_map(model: &MorphableModel, gamma: &[f64], size: usize) -> Result<UvMap> {
    let off: Vec<f64> = model.expression_offsets(gamma)?.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
    Ok(round_map(rasterize_uv(model, &off, 3, size, size)?.0))
}

fn round_map(mut m: UvMap) -> UvMap {
    m.data.iter_mut().for_each(|v| *v = round_f32(*v));
    m
}

/// Writes a UV map as `name` (`H × W × C`) plus `name.valid`.
pub fn put_map(c: &mut TensorContainer, name: &str, m: &UvMap) -> Result<()> {
    c.insert_f64(name, &[m.height, m.width, m.channels], &m.data)?;
    let valid: Vec<u8> = m.valid.iter().map(|v| *v as u8).collect();
    c.insert_u8(&format!("{name}.valid"), &[m.height, m.width], &valid)
}

pub fn get_map(c: &TensorContainer, name: &str) -> Result<UvMap> {
    let e = c.get(name)?;
    if e.dims.len() != 3 {
        return Err(Error::Data(format!("map `{name}` must have rank 3")));
    }
    let [h, w, ch] = [e.dims[0] as usize, e.dims[1] as usize, e.dims[2] as usize];
    let mut m = UvMap::from_data(w, h, ch, c.f64s(name, None)?)?;
    m.valid = c.u8s(&format!("{name}.valid"), Some(&[h, w]))?.iter().map(|v| *v != 0).collect();
    Ok(m)
}

/// One identity and its texture/position maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityRecord {
    pub id: usize,
    pub maps: String,
}

/// One rendered frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub identity: usize,
    pub expression: usize,
    pub camera: usize,
    pub image: String,
    pub mask: String,
    pub maps: String,
    pub expr_maps: String,
    /// Key prefix of this frame's entries in the coefficient container.
    pub coeffs: String,
}

/// Contents of `index.json`. Paths are relative to the dataset root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub format: u32,
    pub spec: ToySpec,
    pub model: String,
    pub coeffs: String,
    pub cameras: Vec<Camera>,
    pub identities: Vec<IdentityRecord>,
    pub samples: Vec<SampleRecord>,
}

impl DatasetIndex {
    pub fn load(root: &Path) -> Result<DatasetIndex> {
        let path = root.join("index.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let idx: DatasetIndex = serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if idx.format != INDEX_FORMAT {
            return Err(Error::Data(format!("index format {} is not supported (expected {INDEX_FORMAT})", idx.format)));
        }
        Ok(idx)
    }
}

fn id_dir(i: usize) -> String {
    format!("id_{i:03}")
}

fn coeff_key(i: usize, e: usize) -> String {
    format!("id_{i:03}.expr_{e:02}")
}

/// Stores `delta`, `gamma` and pose parameters of every frame.
fn coeff_entries(c: &mut TensorContainer, i: usize, e: usize, delta: &[f64], gamma: &[f64], pose: &[f64; 6]) -> Result<()> {
    let key = coeff_key(i, e);
    if e == 0 {
        c.insert_f64(&format!("{}.delta", id_dir(i)), &[delta.len()], delta)?;
    }
    c.insert_f64(&format!("{key}.gamma"), &[gamma.len()], gamma)?;
    c.insert_f64(&format!("{key}.pose"), &[6], pose)
}

/// Reads the coefficients of frame `key` (see [`SampleRecord::coeffs`]).
pub fn read_coefficients(c: &TensorContainer, key: &str, joint_count: usize) -> Result<Coefficients> {
    let id = key.split('.').next().unwrap_or(key);
    let delta = c.f64s(&format!("{id}.delta"), None)?;
    let gamma = c.f64s(&format!("{key}.gamma"), None)?;
    let p = c.f64s(&format!("{key}.pose"), Some(&[6]))?;
    let pose = pose_from_params(&[p[0], p[1], p[2], p[3], p[4], p[5]], joint_count);
    Ok(Coefficients { delta, gamma, pose })
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Generates the whole dataset under `out`. The result is a pure function
/// of `spec`.
pub fn generate(spec: &ToySpec, out: &Path) -> Result<DatasetIndex> {
    spec.validate()?;
    create_dir(out)?;
    create_dir(&out.join("maps"))?;
    let model = spec.build_model();
    let cameras = toy_cameras(spec)?;
    let mut mc = TensorContainer::new();
    model.save_into(&mut mc)?;
    mc.write(&out.join("model.bin"))?;

    let identities: Vec<ToyIdentity> = exec::map_range(spec.identities, |i| sample_identity(spec, &model, i));
    let mut coeffs = TensorContainer::new();
    let mut id_records = Vec::new();
    for (i, id) in identities.iter().enumerate() {
        let (tex, verts) = identity_maps(&model, id, spec.map_size)?;
        let mut c = TensorContainer::new();
        put_map(&mut c, "tex", &tex)?;
        put_map(&mut c, "verts", &verts)?;
        let colors: Vec<f64> = id.colors.iter().flatten().copied().collect();
        c.insert_f64("colors", &[id.colors.len(), 3], &colors)?;
        let rel = format!("maps/{}.bin", id_dir(i));
        c.write(&out.join(&rel))?;
        id_records.push(IdentityRecord { id: i, maps: rel });
    }

    let frames: Vec<(usize, usize)> = (0..spec.identities)
        .flat_map(|i| (0..spec.expressions).map(move |e| (i, e)))
        .collect();
    let per_frame: Vec<Result<Vec<SampleRecord>>> = exec::map_range(frames.len(), |f| {
        let (i, e) = frames[f];
        let id = &identities[i];
        let (gamma, pose_params) = sample_expression(spec, &model, i, e);
        let co = Coefficients {
            delta: id.delta.clone(),
            gamma: gamma.clone(),
            pose: pose_from_params(&pose_params, model.joint_count()),
        };
        let dir = format!("{}/expr_{e:02}", id_dir(i));
        create_dir(&out.join(&dir))?;
        let mut ec = TensorContainer::new();
        put_map(&mut ec, "expr", &expression_map(&model, &gamma, spec.map_size)?)?;
        let expr_rel = format!("maps/{}_expr_{e:02}.bin", id_dir(i));
        ec.write(&out.join(&expr_rel))?;
        let mut recs = Vec::new();
        for (k, cam) in cameras.iter().enumerate() {
            let (img, mask) = render_frame(spec, &model, id, &co, cam)?;
            let image = format!("{dir}/cam_{k}.png");
            let mask_rel = format!("{dir}/mask_{k}.png");
            save_png(&out.join(&image), &img)?;
            save_png(&out.join(&mask_rel), &mask)?;
            recs.push(SampleRecord {
                identity: i,
                expression: e,
                camera: k,
                image,
                mask: mask_rel,
                maps: id_records[i].maps.clone(),
                expr_maps: expr_rel.clone(),
                coeffs: coeff_key(i, e),
            });
        }
        Ok(recs)
    });
    let mut samples = Vec::new();
    for r in per_frame {
        samples.extend(r?);
    }
    for &(i, e) in &frames {
        let (gamma, pose) = sample_expression(spec, &model, i, e);
        coeff_entries(&mut coeffs, i, e, &identities[i].delta, &gamma, &pose)?;
    }
    coeffs.write(&out.join("coeffs.bin"))?;
    let index = DatasetIndex {
        format: INDEX_FORMAT,
        spec: spec.clone(),
        model: "model.bin".into(),
        coeffs: "coeffs.bin".into(),
        cameras,
        identities: id_records,
        samples,
    };
    let json = serde_json::to_string_pretty(&index).map_err(|e| Error::InvalidState(e.to_string()))?;
    let path = out.join("index.json");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(index)
}

/// Seeded split of sample indices into `(train, test)`; `fraction` of the
/// samples (rounded) go to test.
pub fn holdout_split(index: &DatasetIndex, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid("holdout fraction must lie in [0, 1]"));
    }
    let n = index.samples.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let n_test = (fraction * n as f64).round() as usize;
    let mut test = order[..n_test].to_vec();
    let mut train = order[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((train, test))
}
