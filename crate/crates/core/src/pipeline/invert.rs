use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::avatar::{expression_input, PersonalizedModel};
use super::config::InversionConfig;
use super::objective::{Objective, ViewTarget};
use super::optim::Adam;
use crate::container::round_f32;
use crate::error::{Error, Result};
use crate::geometry::{Coefficients, MorphableModel, Pose};
use crate::imageio::{load_png, Image};
use crate::nn::Tensor;
use crate::objectives::RandomExtractor;
use crate::prior::{Group, IdSource, PriorModel};
use crate::splatter::{Camera, RenderSettings};
use crate::synthgen::Dataset;
use crate::uvmap::rasterize_uv;

/// One input image with its camera and tracked coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct InversionFrame {
    pub image: Image,
    /// Foreground matte; only used to pick texels for the initial texture.
    pub mask: Option<Image>,
    pub camera: Camera,
    pub gamma: Vec<f64>,
    pub pose: Pose,
}

/// One manifest entry. Paths are relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image: String,
    #[serde(default)]
    pub mask: Option<String>,
    pub camera: Camera,
    pub gamma: Vec<f64>,
    pub pose: Pose,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let json = serde_json::to_string_pretty(entries).map_err(|e| Error::InvalidState(e.to_string()))?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// Loads the images of manifest entries.
pub fn load_frames(manifest: &Path, entries: &[ManifestEntry]) -> Result<Vec<InversionFrame>> {
    let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    entries
        .iter()
        .map(|e| {
            Ok(InversionFrame {
                image: load_png(&base.join(&e.image), false)?,
                mask: match &e.mask {
                    Some(m) => Some(load_png(&base.join(m), true)?),
                    None => None,
                },
                camera: e.camera.clone(),
                gamma: e.gamma.clone(),
                pose: e.pose.clone(),
            })
        })
        .collect()
}

/// Manifest entries for dataset samples, with paths relative to `manifest_dir`.
pub fn manifest_from_dataset(ds: &Dataset, samples: &[usize], manifest_dir: &Path) -> Result<Vec<ManifestEntry>> {
    let rel = relative_path(&ds.root, manifest_dir);
    samples
        .iter()
        .map(|&i| {
            let s = ds.sample(i);
            let co = ds.coefficients(i);
            Ok(ManifestEntry {
                image: join_rel(&rel, &s.image),
                mask: Some(join_rel(&rel, &s.mask)),
                camera: ds.camera(i).clone(),
                gamma: co.gamma.clone(),
                pose: co.pose.clone(),
            })
        })
        .collect()
}

fn join_rel(base: &Path, file: &str) -> String {
    base.join(file).to_string_lossy().replace('\\', "/")
}

/// `target` expressed relative to `from` (both taken as given, no symlink
/// resolution).
fn relative_path(target: &Path, from: &Path) -> PathBuf {
    let t: Vec<_> = target.components().collect();
    let f: Vec<_> = from.components().collect();
    let common = t.iter().zip(&f).take_while(|(a, b)| a == b).count();
    let mut out = PathBuf::new();
    for _ in common..f.len() {
        out.push("..");
    }
    for c in &t[common..] {
        out.push(c);
    }
    out
}

/// Frames plus the encoder inputs derived from them.
#[derive(Debug, Clone)]
pub struct InversionInputs {
    pub frames: Vec<InversionFrame>,
    /// Texture backprojected from the frames.
    pub tex: Tensor,
    /// Neutral positions of the mean shape.
    pub verts: Tensor,
    /// Expression map per frame.
    pub expr: Vec<Tensor>,
}

impl InversionInputs {
    pub fn prepare(mesh: &MorphableModel, frames: Vec<InversionFrame>, map_size: usize) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::invalid("inversion needs at least one input image"));
        }
        for (k, f) in frames.iter().enumerate() {
            if f.gamma.len() != mesh.expr_dim {
                return Err(Error::invalid(format!("input {k}: expression coefficients missing or of wrong length")));
            }
            if f.pose.joints.len() != mesh.joint_count() {
                return Err(Error::invalid(format!("input {k}: pose does not match the mesh's joints")));
            }
            f.camera.validate()?;
            if f.image.channels != 3 || f.image.width != f.camera.width || f.image.height != f.camera.height {
                return Err(Error::invalid(format!("input {k}: image is not an RGB image of the camera's size")));
            }
            if let Some(m) = &f.mask {
                if m.width != f.image.width || m.height != f.image.height || m.channels != 1 {
                    return Err(Error::invalid(format!("input {k}: mask does not match the image")));
                }
            }
        }
        let expr = frames
            .iter()
            .map(|f| expression_input(mesh, &f.gamma, map_size))
            .collect::<Result<Vec<_>>>()?;
        let mean: Vec<f64> = mesh.mean_shape.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
        let (verts_map, _) = rasterize_uv(mesh, &mean, 3, map_size, map_size)?;
        let verts_data: Vec<f64> = verts_map.data.iter().map(|v| round_f32(*v)).collect();
        let verts = Tensor::from_hwc(map_size, map_size, 3, &verts_data);
        let tex = backproject(mesh, &frames, map_size)?;
        Ok(InversionInputs { frames, tex, verts, expr })
    }
}

fn sample_image(img: &Image, x: f64, y: f64) -> Option<Vec<f64>> {
    // Pixel centres sit at half-integers.
    let (fx, fy) = (x - 0.5, y - 0.5);
    if fx < 0.0 || fy < 0.0 || fx > (img.width - 1) as f64 || fy > (img.height - 1) as f64 {
        return None;
    }
    let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(img.width - 1), (y0 + 1).min(img.height - 1));
    let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
    Some(
        (0..img.channels)
            .map(|c| {
                let top = img.at(x0, y0, c) * (1.0 - ax) + img.at(x1, y0, c) * ax;
                let bot = img.at(x0, y1, c) * (1.0 - ax) + img.at(x1, y1, c) * ax;
                top * (1.0 - ay) + bot * ay
            })
            .collect(),
    )
}

/// Initial texture map: each atlas texel takes the cosine-weighted mean of
/// the pixels it projects to in the views that face it. Texels seen by no
/// view get the mean observed color.
pub fn backproject(mesh: &MorphableModel, frames: &[InversionFrame], size: usize) -> Result<Tensor> {
    let n = size * size;
    let mut acc = vec![0.0; n * 3];
    let mut wsum = vec![0.0; n];
    let mut valid = vec![false; n];
    for f in frames {
        let co = Coefficients {
            delta: vec![0.0; mesh.id_dim],
            gamma: f.gamma.clone(),
            pose: f.pose.clone(),
        };
        let posed = mesh.apply_lbs(&mesh.morph(&co)?, &f.pose)?;
        let normals = mesh.vertex_normals(&posed);
        let attrs: Vec<f64> = posed.iter().zip(&normals).flat_map(|(p, q)| [p.x, p.y, p.z, q.x, q.y, q.z]).collect();
        let (map, _) = rasterize_uv(mesh, &attrs, 6, size, size)?;
        let eye = f.camera.center();
        for t in 0..n {
            if !map.valid[t] {
                continue;
            }
            valid[t] = true;
            let a = &map.data[t * 6..t * 6 + 6];
            let p = crate::math::Vec3::new(a[0], a[1], a[2]);
            let nrm = crate::math::Vec3::new(a[3], a[4], a[5]);
            let to_eye = eye - p;
            let cos = nrm.dot(&to_eye) / (nrm.norm() * to_eye.norm()).max(1e-12);
            if cos <= 0.1 {
                continue;
            }
            let v = f.camera.to_view(&p);
            if v.z <= f.camera.near {
                continue;
            }
            let [x, y] = f.camera.project_view(&v);
            if let Some(m) = &f.mask {
                if sample_image(m, x, y).is_none_or(|s| s[0] < 0.5) {
                    continue;
                }
            }
            if let Some(rgb) = sample_image(&f.image, x, y) {
                for c in 0..3 {
                    acc[t * 3 + c] += cos * rgb[c];
                }
                wsum[t] += cos;
            }
        }
    }
    let seen: Vec<usize> = (0..n).filter(|&t| wsum[t] > 0.0).collect();
    let mut fill = [0.5; 3];
    if !seen.is_empty() {
        for (c, f) in fill.iter_mut().enumerate() {
            *f = seen.iter().map(|&t| acc[t * 3 + c] / wsum[t]).sum::<f64>() / seen.len() as f64;
        }
    }
    let mut hwc = vec![0.0; n * 3];
    for t in 0..n {
        for c in 0..3 {
            hwc[t * 3 + c] = round_f32(if wsum[t] > 0.0 {
                acc[t * 3 + c] / wsum[t]
            } else if valid[t] {
                fill[c]
            } else {
                0.0
            });
        }
    }
    Ok(Tensor::from_hwc(size, size, 3, &hwc))
}

/// One point of a stage loss curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    pub ema: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub budget: usize,
    pub steps: usize,
    pub stopped_early: bool,
    pub curve: Vec<CurvePoint>,
}

/// EMA early stopping: after `warmup` steps, every `check_every` steps the
/// smoothed loss must improve on the best seen by the relative `tol`;
/// `patience` consecutive failures stop the stage.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    warmup: usize,
    check_every: usize,
    patience: usize,
    tol: f64,
    decay: f64,
    ema: Option<f64>,
    best: f64,
    bad: usize,
}

impl EarlyStopping {
    pub fn new(cfg: &InversionConfig) -> Self {
        EarlyStopping {
            warmup: cfg.warmup,
            check_every: cfg.check_every.max(1),
            patience: cfg.patience,
            tol: cfg.tol,
            decay: cfg.ema,
            ema: None,
            best: f64::INFINITY,
            bad: 0,
        }
    }

    /// Feeds the loss of completed step `steps_done` (1-based). Returns the
    /// smoothed loss and whether to stop.
    pub fn observe(&mut self, steps_done: usize, loss: f64) -> (f64, bool) {
        let e = match self.ema {
            None => loss,
            Some(prev) => self.decay * prev + (1.0 - self.decay) * loss,
        };
        self.ema = Some(e);
        if steps_done < self.warmup || steps_done % self.check_every != 0 {
            return (e, false);
        }
        if e < self.best * (1.0 - self.tol) {
            self.best = e;
            self.bad = 0;
        } else {
            self.bad += 1;
        }
        (e, self.patience > 0 && self.bad >= self.patience)
    }
}

/// Stage-1 result: the tuned encoder and the pivot it predicts.
#[derive(Debug, Clone)]
pub struct Stage1 {
    pub model: PriorModel,
    pub pivot: Tensor,
    pub report: StageReport,
}

#[derive(Debug, Clone)]
pub struct Stage2 {
    pub model: PersonalizedModel,
    pub report: StageReport,
}

struct Extractors {
    perceptual: RandomExtractor,
    identity: RandomExtractor,
}

impl Extractors {
    fn new(cfg: &InversionConfig) -> Self {
        Extractors {
            perceptual: RandomExtractor::standard(cfg.perceptual_seed),
            identity: RandomExtractor::new(3, &[8, 16, 32, 32], cfg.identity_seed),
        }
    }
}

fn objective<'a>(
    mesh: &'a MorphableModel,
    settings: &RenderSettings,
    cfg: &InversionConfig,
    ex: &'a Extractors,
    with_identity: bool,
) -> Objective<'a> {
    Objective {
        mesh,
        settings: *settings,
        weights: cfg.weights,
        world_mode: cfg.world_mode,
        perceptual: &ex.perceptual,
        identity: with_identity.then_some(&ex.identity as &dyn crate::objectives::FeatureExtractor),
        regularize: false,
        quant_weight: 0.0,
    }
}

enum Stage<'a> {
    Encoder,
    Decoders(&'a Tensor),
}

fn optimize(
    model: &mut PriorModel,
    mesh: &MorphableModel,
    inputs: &InversionInputs,
    settings: &RenderSettings,
    cfg: &InversionConfig,
    stage: Stage<'_>,
) -> Result<StageReport> {
    let (lr, groups, with_identity) = match stage {
        Stage::Encoder => (cfg.stage1_lr, vec![Group::EncoderId], false),
        Stage::Decoders(_) => (cfg.stage2_lr, Group::decoders_and_regressors(), true),
    };
    let ex = Extractors::new(cfg);
    let n = inputs.frames.len();
    let budget = cfg.budget(n);
    let mut report = StageReport {
        budget,
        steps: 0,
        stopped_early: false,
        curve: Vec::with_capacity(budget),
    };
    if matches!(stage, Stage::Decoders(_)) && cfg.freeze_stage2 {
        return Ok(report);
    }
    let mut adam = Adam::new(&model.params, cfg.adam);
    let mut stopper = EarlyStopping::new(cfg);
    for step in 0..budget {
        let k = step % n;
        let f = &inputs.frames[k];
        let fwd = match stage {
            Stage::Encoder => model.forward(
                IdSource::Encode {
                    tex: &inputs.tex,
                    verts: &inputs.verts,
                },
                &inputs.expr[k],
            )?,
            Stage::Decoders(pivot) => model.forward(IdSource::Pivot(pivot), &inputs.expr[k])?,
        };
        let view = ViewTarget {
            camera: &f.camera,
            pose: &f.pose,
            image: &f.image,
        };
        let ev = objective(mesh, settings, cfg, &ex, with_identity).evaluate(&fwd, None, &[view])?;
        let loss = ev.terms.total;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite inversion loss at step {step} (input {k})")));
        }
        let mut grad = model.params.zeros_like();
        model.backward(&fwd, &ev.upstream, &mut grad)?;
        adam.update(&mut model.params, &grad, lr, &groups)?;
        if !model.params.is_finite() {
            return Err(Error::Numeric(format!("non-finite weights after inversion step {step}")));
        }
        let (ema, stop) = stopper.observe(step + 1, loss);
        report.curve.push(CurvePoint { step, loss, ema });
        report.steps = step + 1;
        if stop {
            report.stopped_early = true;
            break;
        }
    }
    Ok(report)
}

/// Tunes `E_id` on the inputs (everything else frozen) and returns the pivot
/// predicted by the tuned encoder.
pub fn invert_stage1(
    model: &PriorModel,
    mesh: &MorphableModel,
    inputs: &InversionInputs,
    settings: &RenderSettings,
    cfg: &InversionConfig,
) -> Result<Stage1> {
    cfg.validate()?;
    let mut m = model.clone();
    let report = optimize(&mut m, mesh, inputs, settings, cfg, Stage::Encoder)?;
    let mut pivot = m.encode_id(&inputs.tex, &inputs.verts)?;
    pivot.data.iter_mut().for_each(|v| *v = round_f32(*v));
    Ok(Stage1 { model: m, pivot, report })
}

/// Fine-tunes decoders and regressors around the fixed pivot.
pub fn invert_stage2(
    model: &PriorModel,
    mesh: &MorphableModel,
    inputs: &InversionInputs,
    pivot: &Tensor,
    settings: &RenderSettings,
    cfg: &InversionConfig,
) -> Result<Stage2> {
    cfg.validate()?;
    let mut m = model.clone();
    let report = optimize(&mut m, mesh, inputs, settings, cfg, Stage::Decoders(pivot))?;
    Ok(Stage2 {
        model: PersonalizedModel {
            prior: m,
            mesh: mesh.clone(),
            pivot: pivot.clone(),
        },
        report,
    })
}

/// Mean photometric loss (no identity terms) of a personalized model over
/// the inputs, with the renders.
pub fn input_loss(
    model: &PersonalizedModel,
    inputs: &InversionInputs,
    settings: &RenderSettings,
    cfg: &InversionConfig,
) -> Result<(f64, Vec<Image>)> {
    let ex = Extractors::new(cfg);
    let obj = objective(&model.mesh, settings, cfg, &ex, false);
    let mut total = 0.0;
    let mut renders = Vec::new();
    for (k, f) in inputs.frames.iter().enumerate() {
        let fwd = model.prior.forward(IdSource::Pivot(&model.pivot), &inputs.expr[k])?;
        let view = ViewTarget {
            camera: &f.camera,
            pose: &f.pose,
            image: &f.image,
        };
        let ev = obj.evaluate(&fwd, None, &[view])?;
        total += ev.terms.image_color;
        renders.extend(ev.renders);
    }
    Ok((total / inputs.frames.len() as f64, renders))
}

/// Both stages, with stage-1 output wrapped as a personalized model for
/// comparison.
#[derive(Debug, Clone)]
pub struct Inversion {
    pub stage1: PersonalizedModel,
    pub stage1_report: StageReport,
    pub stage2: PersonalizedModel,
    pub stage2_report: StageReport,
}

pub fn invert(
    model: &PriorModel,
    mesh: &MorphableModel,
    inputs: &InversionInputs,
    settings: &RenderSettings,
    cfg: &InversionConfig,
) -> Result<Inversion> {
    let s1 = invert_stage1(model, mesh, inputs, settings, cfg)?;
    let s2 = invert_stage2(&s1.model, mesh, inputs, &s1.pivot, settings, cfg)?;
    Ok(Inversion {
        stage1: PersonalizedModel {
            prior: s1.model,
            mesh: mesh.clone(),
            pivot: s1.pivot,
        },
        stage1_report: s1.report,
        stage2: s2.model,
        stage2_report: s2.report,
    })
}

/// Writes both stage curves as `stage,step,loss,ema`.
pub fn write_curves(path: &Path, inv: &Inversion) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from("stage,step,loss,ema\n");
    for (stage, r) in [(1, &inv.stage1_report), (2, &inv.stage2_report)] {
        for p in &r.curve {
            text.push_str(&format!("{stage},{},{},{}\n", p.step, p.loss, p.ema));
        }
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
