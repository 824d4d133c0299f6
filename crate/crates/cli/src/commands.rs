use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sprt_core::imageio::save_png;
use sprt_core::math::Vec3;
use sprt_core::objectives::RandomExtractor;
use sprt_core::pipeline::{
    self, input_loss, latest_checkpoint, load_frames, load_prior, manifest_from_dataset, read_manifest, write_curves,
    write_manifest, write_metrics, DrivingFrame, InversionInputs, PersonalizedModel, Trainer,
};
use sprt_core::prior::PriorModel;
use sprt_core::splatter::Camera;
use sprt_core::synthgen::{generate, Dataset, ToySpec};
use sprt_core::{Error, Result};

use crate::config::RunConfig;
use crate::Split;

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::InvalidState(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Twelve views sweeping the front of the head, slightly above eye level.
fn orbit(spec: &ToySpec) -> Result<Vec<Camera>> {
    let d = spec.camera_distance;
    let s = spec.image_size;
    (0..12)
        .map(|k| {
            let az = (-60.0 + 120.0 * k as f64 / 11.0f64).to_radians();
            let el = 10f64.to_radians();
            let eye = Vec3::new(d * el.cos() * az.sin(), d * el.sin(), d * el.cos() * az.cos());
            Camera::look_at(eye, Vec3::zeros(), Vec3::new(0.0, 1.0, 0.0), spec.focal_factor * s as f64, s, s)
        })
        .collect()
}

/// Samples of one identity: expression 0 by camera, then the rest by
/// (expression, camera).
fn identity_samples(ds: &Dataset, identity: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..ds.len()).filter(|&i| ds.sample(i).identity == identity).collect();
    v.sort_by_key(|&i| (ds.sample(i).expression, ds.sample(i).camera));
    v
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let index = generate(&cfg.dataset, out)?;
    let ds = Dataset::open(out)?;
    let manifests = out.join("manifests");
    let driving = out.join("driving");
    create_dir(&manifests)?;
    create_dir(&driving)?;
    for id in 0..cfg.dataset.identities {
        let samples = identity_samples(&ds, id);
        let entries = manifest_from_dataset(&ds, &samples, &manifests)?;
        write_manifest(&manifests.join(format!("id_{id:03}.json")), &entries)?;
        let frames: Vec<DrivingFrame> = (0..cfg.dataset.expressions)
            .filter_map(|e| ds.views_of(id, e).first().copied())
            .map(|i| {
                let co = ds.coefficients(i);
                DrivingFrame {
                    gamma: co.gamma.clone(),
                    pose: co.pose.clone(),
                }
            })
            .collect();
        write_json(&driving.join(format!("id_{id:03}.json")), &frames)?;
    }
    write_json(&out.join("cameras.json"), &index.cameras)?;
    write_json(&out.join("orbit.json"), &orbit(&cfg.dataset)?)?;
    println!(
        "wrote {} samples of {} identities to {}",
        index.samples.len(),
        index.identities.len(),
        out.display()
    );
    Ok(())
}

/// `resume`: `Some(None)` picks the newest checkpoint under `out`.
pub fn train_prior(cfg: &RunConfig, data: &Path, out: &Path, resume: Option<Option<PathBuf>>) -> Result<()> {
    let ds = Dataset::open(data)?;
    let mut trainer = match resume {
        Some(p) => {
            let ckpt = match p {
                Some(p) => p,
                None => latest_checkpoint(out)?
                    .ok_or_else(|| Error::invalid(format!("no checkpoint to resume under {}", out.display())))?,
            };
            println!("resuming from {}", ckpt.display());
            Trainer::resume(&ds, &ckpt, cfg.train.clone())?
        }
        None => {
            let model = PriorModel::new(cfg.prior.clone(), &ds.model, cfg.seed)?;
            Trainer::new(&ds, model, cfg.train.clone())?
        }
    };
    trainer.run(out)?;
    if let Some(last) = trainer.log.last() {
        println!("step {} lr {:.3e} loss {:.6}", last.step + 1, last.lr, last.terms.total);
    }
    Ok(())
}

#[derive(Serialize)]
struct StageSummary {
    budget: usize,
    steps: usize,
    stopped_early: bool,
    input_loss: f64,
}

#[derive(Serialize)]
struct InversionSummary {
    views: usize,
    stage1: StageSummary,
    stage2: StageSummary,
}

pub fn invert(cfg: &RunConfig, checkpoint: &Path, inputs: &Path, views: usize, out: &Path) -> Result<()> {
    let entries = read_manifest(inputs)?;
    if views == 0 || views > entries.len() {
        return Err(Error::invalid(format!(
            "--views {views} is out of range; {} holds {} entries",
            inputs.display(),
            entries.len()
        )));
    }
    let (model, mesh) = load_prior(checkpoint)?;
    let frames = load_frames(inputs, &entries[..views])?;
    let prepared = InversionInputs::prepare(&mesh, frames, model.config.map_size)?;
    let inv = pipeline::invert(&model, &mesh, &prepared, &cfg.render, &cfg.inversion)?;

    create_dir(out)?;
    let preview = out.join("preview");
    create_dir(&preview)?;
    inv.stage2.save(&out.join("personalized.bin"))?;
    write_curves(&out.join("curves.csv"), &inv)?;
    let (loss1, r1) = input_loss(&inv.stage1, &prepared, &cfg.render, &cfg.inversion)?;
    let (loss2, r2) = input_loss(&inv.stage2, &prepared, &cfg.render, &cfg.inversion)?;
    for (k, f) in prepared.frames.iter().enumerate() {
        save_png(&preview.join(format!("input_{k:02}.png")), &f.image)?;
        save_png(&preview.join(format!("stage1_{k:02}.png")), &r1[k])?;
        save_png(&preview.join(format!("stage2_{k:02}.png")), &r2[k])?;
    }
    let stage = |r: &pipeline::StageReport, input_loss| StageSummary {
        budget: r.budget,
        steps: r.steps,
        stopped_early: r.stopped_early,
        input_loss,
    };
    write_json(
        &out.join("summary.json"),
        &InversionSummary {
            views,
            stage1: stage(&inv.stage1_report, loss1),
            stage2: stage(&inv.stage2_report, loss2),
        },
    )?;
    println!(
        "stage 1: {} steps, input loss {loss1:.6}; stage 2: {} steps, input loss {loss2:.6}",
        inv.stage1_report.steps, inv.stage2_report.steps
    );
    Ok(())
}

pub fn reenact(cfg: &RunConfig, personalized: &Path, driving: &Path, camera_path: &Path, out: &Path) -> Result<()> {
    let model = PersonalizedModel::load(personalized)?;
    let frames: Vec<DrivingFrame> = read_json(driving)?;
    let cameras: Vec<Camera> = read_json(camera_path)?;
    for c in &cameras {
        c.validate()?;
    }
    let images = pipeline::reenact(&model, &frames, &cameras, &cfg.render, cfg.inversion.world_mode)?;
    create_dir(out)?;
    for (i, img) in images.iter().enumerate() {
        save_png(&out.join(format!("frame_{i:04}.png")), img)?;
    }
    println!("rendered {} frames to {}", images.len(), out.display());
    Ok(())
}

/// Dataset samples of `identity` in `split`. The test split holds the last
/// `holdout_fraction` of the identity's expressions, in every camera.
pub fn split_samples(ds: &Dataset, identity: usize, split: Split, holdout_fraction: f64) -> Result<Vec<usize>> {
    let n_id = ds.index.identities.len();
    if identity >= n_id {
        return Err(Error::invalid(format!("identity {identity} is out of range; the dataset has {n_id}")));
    }
    let n_expr = ds.index.spec.expressions;
    let held = ((holdout_fraction * n_expr as f64).ceil() as usize).min(n_expr);
    let first_test = n_expr - held;
    Ok(identity_samples(ds, identity)
        .into_iter()
        .filter(|&i| match split {
            Split::All => true,
            Split::Test => ds.sample(i).expression >= first_test,
            Split::Train => ds.sample(i).expression < first_test,
        })
        .collect())
}

pub fn eval(cfg: &RunConfig, personalized: &Path, data: &Path, split: Split, identity: usize, out: &Path) -> Result<()> {
    let model = PersonalizedModel::load(personalized)?;
    let ds = Dataset::open(data)?;
    let samples = split_samples(&ds, identity, split, cfg.eval.holdout_fraction)?;
    let ex = RandomExtractor::standard(cfg.inversion.perceptual_seed);
    let rows = pipeline::evaluate(&model, &ds, &samples, &cfg.render, cfg.inversion.world_mode, &ex)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let s = write_metrics(out, &rows)?;
    println!("{} frames", s.count);
    for (k, name) in ["L1", "PSNR", "SSIM", "perceptual"].iter().enumerate() {
        println!("{name:>10}: {:.6} ± {:.6}", s.mean[k], s.std[k]);
    }
    Ok(())
}
