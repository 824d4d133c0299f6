use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::avatar::save_prior;
use super::config::TrainConfig;
use super::objective::{LossTerms, MapTargets, Objective, ViewTarget};
use super::optim::Adam;
use crate::container::{round_f32, TensorContainer};
use crate::error::{Error, Result};
use crate::exec;
use crate::imageio::Image;
use crate::nn::Tensor;
use crate::objectives::RandomExtractor;
use crate::prior::{ema_update, Group, IdSource, PriorModel, PriorParams, Quantized};
use crate::synthgen::Dataset;

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub terms: LossTerms,
}

impl LogRow {
    pub fn header() -> String {
        let mut h = String::from("step,lr");
        for n in LossTerms::NAMES {
            h.push(',');
            h.push_str(n);
        }
        h
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{},{}", self.step, self.lr);
        for v in self.terms.values() {
            s.push_str(&format!(",{v}"));
        }
        s
    }

    pub fn parse(line: &str) -> Result<LogRow> {
        let bad = || Error::Data(format!("malformed log line `{line}`"));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 2 + LossTerms::NAMES.len() {
            return Err(bad());
        }
        let step = f[0].parse().map_err(|_| bad())?;
        let v: Vec<f64> = f[1..].iter().map(|x| x.parse::<f64>().map_err(|_| bad())).collect::<Result<_>>()?;
        Ok(LogRow {
            step,
            lr: v[0],
            terms: LossTerms {
                total: v[1],
                map_color: v[2],
                image_color: v[3],
                geom: v[4],
                reg: v[5],
                quant: v[6],
                id: v[7],
                arc: v[8],
            },
        })
    }
}

/// Reads a training log written by [`Trainer::run`].
pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().skip(1).filter(|l| !l.is_empty()).map(LogRow::parse).collect()
}

/// Exponential moving average with span `window` (`α = 2 / (window + 1)`),
/// one value per input.
pub fn ema_series(values: &[f64], window: usize) -> Vec<f64> {
    let a = 2.0 / (window as f64 + 1.0);
    let mut out = Vec::with_capacity(values.len());
    let mut acc = None;
    for &v in values {
        let next = match acc {
            None => v,
            Some(prev) => a * v + (1.0 - a) * prev,
        };
        acc = Some(next);
        out.push(next);
    }
    out
}

#[derive(Debug, Clone)]
struct Frame {
    identity: usize,
    /// Sample indices of the usable views.
    samples: Vec<usize>,
}

#[derive(Serialize)]
struct NanDump<'a> {
    step: usize,
    lr: f64,
    terms: LossTerms,
    images: Vec<&'a str>,
    params_finite: bool,
}

struct MemberResult {
    terms: LossTerms,
    grad: PriorParams,
    q: [Option<Quantized>; 2],
}

/// Prior optimization state. Steps are deterministic functions of the seed
/// and step index, so a resumed run matches an uninterrupted one.
pub struct Trainer<'a> {
    ds: &'a Dataset,
    pub model: PriorModel,
    pub config: TrainConfig,
    pub adam: Adam,
    /// Number of completed steps.
    pub step: usize,
    pub log: Vec<LogRow>,
    frames: Vec<Frame>,
    perceptual: RandomExtractor,
    out: Option<PathBuf>,
}

impl<'a> Trainer<'a> {
    pub fn new(ds: &'a Dataset, model: PriorModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if ds.is_empty() {
            return Err(Error::Data("training needs a non-empty dataset".into()));
        }
        if model.config.map_size != ds.map_size() {
            return Err(Error::Config(format!(
                "prior map size {} does not match the dataset's {}",
                model.config.map_size,
                ds.map_size()
            )));
        }
        let mut frames: Vec<Frame> = Vec::new();
        for i in 0..ds.len() {
            let s = ds.sample(i);
            if config.exclude_cameras.contains(&s.camera) {
                continue;
            }
            match frames.iter_mut().find(|f| f.identity == s.identity && ds.sample(f.samples[0]).expression == s.expression) {
                Some(f) => f.samples.push(i),
                None => frames.push(Frame {
                    identity: s.identity,
                    samples: vec![i],
                }),
            }
        }
        if frames.is_empty() {
            return Err(Error::Data("every camera is excluded from training".into()));
        }
        let adam = Adam::new(&model.params, config.adam);
        let perceptual = RandomExtractor::standard(config.perceptual_seed);
        Ok(Trainer {
            ds,
            model,
            config,
            adam,
            step: 0,
            log: Vec::new(),
            frames,
            perceptual,
            out: None,
        })
    }

    /// Restores a trainer from a checkpoint written by [`save_checkpoint`](Self::save_checkpoint).
    /// Only `iterations` and `checkpoint_every` may differ from the stored
    /// configuration.
    pub fn resume(ds: &'a Dataset, checkpoint: &Path, config: TrainConfig) -> Result<Self> {
        let c = TensorContainer::read(checkpoint)?;
        let stored: TrainConfig = serde_json::from_str(&c.string("train.config")?)
            .map_err(|e| Error::Config(format!("checkpoint training header: {e}")))?;
        let comparable = TrainConfig {
            iterations: stored.iterations,
            checkpoint_every: stored.checkpoint_every,
            ..config.clone()
        };
        if comparable != stored {
            return Err(Error::Config(format!(
                "{} was written with a different training configuration",
                checkpoint.display()
            )));
        }
        let model = PriorModel::load_from(&c)?;
        let mut t = Trainer::new(ds, model, config)?;
        t.adam = Adam::load_from(&c, &t.model.params, t.config.adam)?;
        t.step = c.i64s("train.step", Some(&[1]))?[0].max(0) as usize;
        t.log = c.string("train.log")?.lines().map(LogRow::parse).collect::<Result<_>>()?;
        if t.log.len() != t.step {
            return Err(Error::Data("checkpoint log length does not match its step".into()));
        }
        Ok(t)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut c = TensorContainer::new();
        self.model.save_into(&mut c)?;
        self.ds.model.save_into(&mut c)?;
        self.adam.save_into(&mut c, &self.model.params)?;
        c.insert_i64("train.step", &[1], &[self.step as i64])?;
        let cfg = serde_json::to_string(&self.config).map_err(|e| Error::InvalidState(e.to_string()))?;
        c.insert_str("train.config", &cfg)?;
        let log: Vec<String> = self.log.iter().map(LogRow::to_csv).collect();
        c.insert_str("train.log", &log.join("\n"))?;
        c.write(path)
    }

    fn objective(&self) -> Objective<'_> {
        Objective {
            mesh: &self.ds.model,
            settings: self.ds.index.spec.render_settings(),
            weights: self.config.weights,
            world_mode: self.config.world_mode,
            perceptual: &self.perceptual,
            identity: None,
            regularize: true,
            quant_weight: 1.0,
        }
    }

    /// Frames and views drawn at `step`.
    fn draw_batch(&self, step: usize) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(step as u64);
        (0..self.config.batch_size)
            .map(|_| {
                let f = &self.frames[rng.gen_range(0..self.frames.len())];
                let mut pool = f.samples.clone();
                let k = self.config.views_per_sample.min(pool.len());
                for i in 0..k {
                    let j = rng.gen_range(i..pool.len());
                    pool.swap(i, j);
                }
                pool.truncate(k);
                pool
            })
            .collect()
    }

    fn init_codebooks(&mut self, batch: &[Vec<usize>]) -> Result<()> {
        let mut ids = Vec::new();
        let mut exprs = Vec::new();
        for views in batch {
            let i = views[0];
            let maps = self.ds.identity_maps(i);
            ids.push(self.model.encode_id(&maps.tex, &maps.verts)?);
            exprs.push(self.model.encode_expr(self.ds.expression_map(i))?);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0xc0de);
        fill_codebook(&mut self.model.params.book_id.entries, self.model.config.n_id, &ids, &mut rng);
        fill_codebook(&mut self.model.params.book_expr.entries, self.model.config.n_expr, &exprs, &mut rng);
        Ok(())
    }

    fn member(&self, views: &[usize], images: &[Image]) -> Result<MemberResult> {
        let i = views[0];
        let maps = self.ds.identity_maps(i);
        let expr = self.ds.expression_map(i);
        let fwd = self.model.forward(
            IdSource::Encode {
                tex: &maps.tex,
                verts: &maps.verts,
            },
            expr,
        )?;
        let targets = MapTargets {
            tex: &maps.tex,
            verts: &maps.verts,
            expr,
            valid: &maps.valid,
        };
        let poses: Vec<_> = views.iter().map(|&v| &self.ds.coefficients(v).pose).collect();
        let vt: Vec<ViewTarget<'_>> = views
            .iter()
            .enumerate()
            .map(|(k, &v)| ViewTarget {
                camera: self.ds.camera(v),
                pose: poses[k],
                image: &images[k],
            })
            .collect();
        let ev = self.objective().evaluate(&fwd, Some(&targets), &vt)?;
        let mut grad = self.model.params.zeros_like();
        self.model.backward(&fwd, &ev.upstream, &mut grad)?;
        Ok(MemberResult {
            terms: ev.terms,
            grad,
            q: [fwd.q_id, fwd.q_expr],
        })
    }

    /// Runs one optimization step and returns its log row.
    pub fn step_once(&mut self) -> Result<LogRow> {
        let step = self.step;
        let batch = self.draw_batch(step);
        if step == 0 && self.config.codebook_data_init && self.model.config.quantize {
            self.init_codebooks(&batch)?;
        }
        let mut images = Vec::with_capacity(batch.len());
        for views in &batch {
            let mut v = Vec::with_capacity(views.len());
            for &i in views {
                v.push(self.ds.images(i)?.0);
            }
            images.push(v);
        }
        let results: Vec<Result<MemberResult>> = exec::map_range(batch.len(), |b| self.member(&batch[b], &images[b]));
        let inv = 1.0 / batch.len() as f64;
        let mut terms = LossTerms::default();
        let mut grad = self.model.params.zeros_like();
        let mut quantized = Vec::new();
        for r in results {
            let r = r?;
            terms.add_scaled(&r.terms, inv);
            add_scaled(&mut grad, &r.grad, inv);
            quantized.push(r.q);
        }
        let lr = self.config.lr_at(step);
        let mut grad_finite = true;
        grad.visit(&mut |_, _, g| grad_finite &= g.iter().all(|x| x.is_finite()));
        if !terms.total.is_finite() || !grad_finite {
            return Err(self.numeric_failure(step, lr, terms, &batch));
        }
        let ema = self.model.config.codebook_ema;
        let groups: Vec<Group> = Group::ALL.into_iter().filter(|g| ema.is_none() || *g != Group::Codebooks).collect();
        self.adam.update(&mut self.model.params, &grad, lr, &groups)?;
        let params = &mut self.model.params;
        for [q_id, q_expr] in &quantized {
            if let Some(decay) = ema {
                if let (Some(a), Some(b)) = (q_id, q_expr) {
                    ema_update(&mut params.book_id, a, decay);
                    ema_update(&mut params.book_expr, b, decay);
                }
            }
            if let Some(q) = q_id {
                q.record_usage(&mut params.book_id);
            }
            if let Some(q) = q_expr {
                q.record_usage(&mut params.book_expr);
            }
        }
        if ema.is_some() {
            params.round_to_f32();
        }
        if !params.is_finite() {
            return Err(self.numeric_failure(step, lr, terms, &batch));
        }
        let row = LogRow { step, lr, terms };
        self.log.push(row);
        self.step += 1;
        Ok(row)
    }

    fn numeric_failure(&self, step: usize, lr: f64, terms: LossTerms, batch: &[Vec<usize>]) -> Error {
        let images = batch.iter().flatten().map(|&i| self.ds.sample(i).image.as_str()).collect();
        let dump = NanDump {
            step,
            lr,
            terms,
            images,
            params_finite: self.model.params.is_finite(),
        };
        let mut msg = format!("non-finite loss or gradient at step {step}");
        if let Some(out) = &self.out {
            let path = out.join("nan_dump.json");
            if let Ok(json) = serde_json::to_string_pretty(&dump) {
                if fs::write(&path, json).is_ok() {
                    msg.push_str(&format!("; batch written to {}", path.display()));
                }
            }
        }
        Error::Numeric(msg)
    }

    /// Trains to `config.iterations`, writing `log.csv`, periodic checkpoints
    /// under `checkpoints/`, the final state `train_state.bin` and the model
    /// `prior.bin` (model plus mesh) into `out`.
    pub fn run(&mut self, out: &Path) -> Result<()> {
        fs::create_dir_all(out.join("checkpoints")).map_err(|e| Error::io(out, e))?;
        self.out = Some(out.to_path_buf());
        let log_path = out.join("log.csv");
        let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        let mut log = BufWriter::new(file);
        let io = |e| Error::io(&log_path, e);
        writeln!(log, "{}", LogRow::header()).map_err(io)?;
        for r in &self.log {
            writeln!(log, "{}", r.to_csv()).map_err(io)?;
        }
        while self.step < self.config.iterations {
            let row = self.step_once()?;
            writeln!(log, "{}", row.to_csv()).map_err(io)?;
            if self.config.checkpoint_every > 0 && self.step % self.config.checkpoint_every == 0 {
                log.flush().map_err(io)?;
                self.save_checkpoint(&out.join("checkpoints").join(format!("step_{:06}.bin", self.step)))?;
            }
        }
        log.flush().map_err(io)?;
        self.save_checkpoint(&out.join("train_state.bin"))?;
        save_prior(&out.join("prior.bin"), &self.model, &self.ds.model)
    }
}

fn add_scaled(acc: &mut PriorParams, g: &PriorParams, s: f64) {
    let mut src = Vec::new();
    g.visit(&mut |_, _, v| src.push(v.to_vec()));
    let mut k = 0;
    acc.visit_mut(&mut |_, _, v| {
        for (a, b) in v.iter_mut().zip(&src[k]) {
            *a += s * b;
        }
        k += 1;
    });
}

/// Fills a codebook with latent vectors drawn from `codes`, cycling and
/// jittered by 5% of their spread so no two entries coincide.
fn fill_codebook(entries: &mut [f64], dim: usize, codes: &[Tensor], rng: &mut ChaCha8Rng) {
    let mut vectors: Vec<Vec<f64>> = Vec::new();
    for z in codes {
        let hw = z.h * z.w;
        for p in 0..hw {
            vectors.push((0..dim).map(|k| z.data[k * hw + p]).collect());
        }
    }
    let n = vectors.len() as f64;
    let all = vectors.iter().flatten();
    let mean = all.clone().sum::<f64>() / (n * dim as f64);
    let std = (all.map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n * dim as f64)).sqrt();
    let jitter = 0.05 * std.max(1e-6);
    for (k, e) in entries.chunks_mut(dim).enumerate() {
        let src = &vectors[k % vectors.len()];
        for (x, s) in e.iter_mut().zip(src) {
            *x = round_f32(s + jitter * rng.gen_range(-1.0..1.0));
        }
    }
}

/// Trains `model` on `ds` and writes the artifacts into `out`.
pub fn train_prior(ds: &Dataset, model: PriorModel, cfg: &TrainConfig, out: &Path) -> Result<PriorModel> {
    let mut t = Trainer::new(ds, model, cfg.clone())?;
    t.run(out)?;
    Ok(t.model)
}

/// Most recent periodic checkpoint in a training output directory.
pub fn latest_checkpoint(out: &Path) -> Result<Option<PathBuf>> {
    let dir = out.join("checkpoints");
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<PathBuf> = None;
    for e in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let p = e.map_err(|e| Error::io(&dir, e))?.path();
        let is_ckpt = p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("step_") && n.ends_with(".bin"));
        if is_ckpt && best.as_ref().is_none_or(|b| p > *b) {
            best = Some(p);
        }
    }
    Ok(best)
}
