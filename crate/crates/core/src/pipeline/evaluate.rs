use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::avatar::{DrivingFrame, PersonalizedModel};
use crate::error::{Error, Result};
use crate::exec;
use crate::imageio::Image;
use crate::objectives::{l1, mean_std, perceptual, psnr, ssim, FeatureExtractor};
use crate::primitives::{to_world, WorldMode};
use crate::prior::{IdSource, PriorModel};
use crate::splatter::{rasterize, RenderSettings};
use crate::synthgen::Dataset;

/// Image metrics of one evaluated frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub frame: usize,
    pub l1: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub perceptual: f64,
}

/// Mean and population standard deviation of each metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub count: usize,
    pub mean: [f64; 4],
    pub std: [f64; 4],
}

pub const METRICS_HEADER: &str = "frame,L1,PSNR,SSIM,perceptual";

pub fn frame_metrics(frame: usize, render: &Image, target: &Image, ex: &dyn FeatureExtractor) -> Result<MetricRow> {
    Ok(MetricRow {
        frame,
        l1: l1(render, target)?.0,
        psnr: psnr(render, target)?,
        ssim: ssim(render, target)?.0,
        perceptual: perceptual(render, target, ex)?.0,
    })
}

pub fn summarize(rows: &[MetricRow]) -> MetricSummary {
    let cols: [Vec<f64>; 4] = [
        rows.iter().map(|r| r.l1).collect(),
        rows.iter().map(|r| r.psnr).collect(),
        rows.iter().map(|r| r.ssim).collect(),
        rows.iter().map(|r| r.perceptual).collect(),
    ];
    let mut s = MetricSummary {
        count: rows.len(),
        mean: [0.0; 4],
        std: [0.0; 4],
    };
    for (k, c) in cols.iter().enumerate() {
        (s.mean[k], s.std[k]) = mean_std(c);
    }
    s
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.frame, r.l1, r.psnr, r.ssim, r.perceptual));
    }
    out
}

pub fn summary_csv(s: &MetricSummary) -> String {
    let mut out = String::from("stat,L1,PSNR,SSIM,perceptual\n");
    for (name, v) in [("mean", s.mean), ("std", s.std)] {
        out.push_str(&format!("{name},{},{},{},{}\n", v[0], v[1], v[2], v[3]));
    }
    out
}

/// Writes per-frame metrics to `path` and the mean/std table next to it
/// (`<stem>_summary.csv`).
pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<MetricSummary> {
    fs::write(path, metrics_csv(rows)).map_err(|e| Error::io(path, e))?;
    let s = summarize(rows);
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("metrics");
    let spath = path.with_file_name(format!("{stem}_summary.csv"));
    fs::write(&spath, summary_csv(&s)).map_err(|e| Error::io(&spath, e))?;
    Ok(s)
}

/// Renders the dataset samples `split` with a personalized model driven by
/// their ground-truth coefficients and scores them against the stored images.
pub fn evaluate(
    model: &PersonalizedModel,
    ds: &Dataset,
    split: &[usize],
    settings: &RenderSettings,
    mode: WorldMode,
    ex: &dyn FeatureExtractor,
) -> Result<Vec<MetricRow>> {
    if split.is_empty() {
        return Err(Error::invalid("evaluation split is empty"));
    }
    exec::map_range(split.len(), |k| {
        let i = split[k];
        let co = ds.coefficients(i);
        let frame = DrivingFrame {
            gamma: co.gamma.clone(),
            pose: co.pose.clone(),
        };
        let render = model.render(&frame, ds.camera(i), settings, mode)?;
        frame_metrics(i, &render, &ds.images(i)?.0, ex)
    })
    .into_iter()
    .collect()
}

/// Renders sample `i` with the prior fed the sample's ground-truth maps.
pub fn render_prior_sample(model: &PriorModel, ds: &Dataset, i: usize, settings: &RenderSettings, mode: WorldMode) -> Result<Image> {
    let maps = ds.identity_maps(i);
    let fwd = model.forward(
        IdSource::Encode {
            tex: &maps.tex,
            verts: &maps.verts,
        },
        ds.expression_map(i),
    )?;
    let (world, _) = to_world(&fwd.gaussians, &ds.model, &ds.coefficients(i).pose, mode)?;
    Ok(rasterize(&world, ds.camera(i), settings)?.image)
}

/// Metrics of the prior itself (identity encoded from ground-truth maps).
pub fn evaluate_prior(
    model: &PriorModel,
    ds: &Dataset,
    split: &[usize],
    settings: &RenderSettings,
    mode: WorldMode,
    ex: &dyn FeatureExtractor,
) -> Result<Vec<MetricRow>> {
    if split.is_empty() {
        return Err(Error::invalid("evaluation split is empty"));
    }
    exec::map_range(split.len(), |k| {
        let i = split[k];
        let render = render_prior_sample(model, ds, i, settings, mode)?;
        frame_metrics(i, &render, &ds.images(i)?.0, ex)
    })
    .into_iter()
    .collect()
}
