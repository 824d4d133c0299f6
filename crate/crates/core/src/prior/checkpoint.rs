use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{PriorConfig, PriorModel, PriorParams};
use crate::container::TensorContainer;
use crate::error::{Error, Result};
use crate::geometry::Region;
use crate::nn::Tensor;
use crate::uvmap::SampleGrid;

/// Version of the checkpoint layout.
pub const CHECKPOINT_FORMAT: i64 = 1;
/// Version of the layer recipe in `docs/ARCHITECTURE.md`.
pub const ARCH_VERSION: i64 = 1;

impl PriorModel {
    /// Writes weights, codebooks, buffers and the architecture header.
    pub fn save_into(&self, c: &mut TensorContainer) -> Result<()> {
        c.insert_i64("meta.format", &[1], &[CHECKPOINT_FORMAT])?;
        c.insert_i64("meta.arch_version", &[1], &[ARCH_VERSION])?;
        let arch = serde_json::to_string(&self.config).map_err(|e| Error::InvalidState(e.to_string()))?;
        c.insert_str("meta.arch", &arch)?;
        let mut res = Ok(());
        self.params.visit(&mut |_, name, v| {
            if res.is_ok() {
                res = c.insert_f64(&format!("param.{name}"), &[v.len()], v);
            }
        });
        res?;
        for (name, book) in [("book_id", &self.params.book_id), ("book_expr", &self.params.book_expr)] {
            let usage: Vec<i64> = book.usage.iter().map(|u| *u as i64).collect();
            c.insert_i64(&format!("usage.{name}"), &[usage.len()], &usage)?;
        }
        let t = &self.template;
        c.insert_f64("buffer.template", &[t.c, t.h, t.w], &t.data)?;
        for g in &self.grids {
            let flat: Vec<f64> = g.coords.iter().flatten().copied().collect();
            c.insert_f64(&format!("buffer.grid.{}", g.region.name()), &[g.rows, g.cols, 2], &flat)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = TensorContainer::new();
        self.save_into(&mut c)?;
        c.write(path)
    }

    /// Rebuilds a model from a container. Format and recipe versions must
    /// match this build.
    pub fn load_from(c: &TensorContainer) -> Result<PriorModel> {
        let format = c.i64s("meta.format", Some(&[1]))?[0];
        if format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!("checkpoint format {format}, this build reads {CHECKPOINT_FORMAT}")));
        }
        let arch_version = c.i64s("meta.arch_version", Some(&[1]))?[0];
        if arch_version != ARCH_VERSION {
            return Err(Error::Config(format!(
                "checkpoint uses architecture recipe {arch_version}, this build has {ARCH_VERSION}"
            )));
        }
        let config: PriorConfig = serde_json::from_str(&c.string("meta.arch")?)
            .map_err(|e| Error::Config(format!("checkpoint architecture header: {e}")))?;
        config.validate()?;
        let mut params = PriorParams::build(&config, &mut ChaCha8Rng::seed_from_u64(0));
        let mut res = Ok(());
        params.visit_mut(&mut |_, name, v| {
            if res.is_ok() {
                match c.f64s(&format!("param.{name}"), Some(&[v.len()])) {
                    Ok(data) => *v = data,
                    Err(e) => res = Err(e),
                }
            }
        });
        res?;
        for (name, book) in [("book_id", &mut params.book_id), ("book_expr", &mut params.book_expr)] {
            let usage = c.i64s(&format!("usage.{name}"), Some(&[book.usage.len()]))?;
            book.usage = usage.into_iter().map(|u| u.max(0) as u64).collect();
        }
        let s = config.map_size;
        let template = Tensor::from_data(3, s, s, c.f64s("buffer.template", Some(&[3, s, s]))?)?;
        let mut grids = Vec::new();
        for r in Region::ALL {
            let [cols, rows] = config.grid_layout(r);
            let flat = c.f64s(&format!("buffer.grid.{}", r.name()), Some(&[rows, cols, 2]))?;
            let coords = flat.chunks(2).map(|p| [p[0], p[1]]).collect();
            grids.push(SampleGrid::new(r, cols, rows, coords)?);
        }
        let hair = grids.pop().unwrap();
        let face = grids.pop().unwrap();
        Ok(PriorModel {
            config,
            params,
            template,
            grids: [face, hair],
        })
    }

    pub fn load(path: &Path) -> Result<PriorModel> {
        Self::load_from(&TensorContainer::read(path)?)
    }

    /// Loads and requires the stored architecture to equal `expected`.
    pub fn load_expecting(path: &Path, expected: &PriorConfig) -> Result<PriorModel> {
        let m = Self::load(path)?;
        if &m.config != expected {
            return Err(Error::Config(format!(
                "checkpoint {} was built with a different architecture configuration",
                path.display()
            )));
        }
        Ok(m)
    }
}
