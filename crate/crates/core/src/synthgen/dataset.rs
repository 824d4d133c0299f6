use std::collections::HashMap;
use std::path::{Path, PathBuf};

use super::generate::{get_map, read_coefficients, DatasetIndex, SampleRecord};
use crate::container::TensorContainer;
use crate::error::{Error, Result};
use crate::geometry::{Coefficients, MorphableModel};
use crate::imageio::{load_png, Image};
use crate::nn::Tensor;
use crate::splatter::Camera;

/// Texture/position maps of one identity, as `3 × S × S` tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityMaps {
    pub tex: Tensor,
    pub verts: Tensor,
    /// Atlas coverage, row-major `S × S`.
    pub valid: Vec<bool>,
}

/// A generated dataset loaded into memory. Images are read on demand.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub index: DatasetIndex,
    pub model: MorphableModel,
    pub identities: Vec<IdentityMaps>,
    expr: HashMap<String, Tensor>,
    coeffs: HashMap<String, Coefficients>,
}

fn to_tensor(m: &crate::uvmap::UvMap) -> Tensor {
    Tensor::from_hwc(m.height, m.width, m.channels, &m.data)
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Dataset> {
        let index = DatasetIndex::load(root)?;
        if index.samples.is_empty() {
            return Err(Error::Data(format!("dataset {} has no samples", root.display())));
        }
        let model = MorphableModel::load_from(&TensorContainer::read(&root.join(&index.model))?)?;
        let size = index.spec.map_size;
        let mut identities = Vec::new();
        for rec in &index.identities {
            let c = TensorContainer::read(&root.join(&rec.maps))?;
            let tex = get_map(&c, "tex")?;
            let verts = get_map(&c, "verts")?;
            if tex.width != size || verts.width != size || tex.channels != 3 {
                return Err(Error::Data(format!("{} does not hold {size}x{size} maps", rec.maps)));
            }
            identities.push(IdentityMaps {
                tex: to_tensor(&tex),
                verts: to_tensor(&verts),
                valid: tex.valid.clone(),
            });
        }
        let coeff_file = TensorContainer::read(&root.join(&index.coeffs))?;
        let mut expr = HashMap::new();
        let mut coeffs = HashMap::new();
        for s in &index.samples {
            if s.identity >= identities.len() || s.camera >= index.cameras.len() {
                return Err(Error::Data(format!("sample {} references a missing identity or camera", s.image)));
            }
            if !expr.contains_key(&s.expr_maps) {
                let c = TensorContainer::read(&root.join(&s.expr_maps))?;
                expr.insert(s.expr_maps.clone(), to_tensor(&get_map(&c, "expr")?));
            }
            if !coeffs.contains_key(&s.coeffs) {
                coeffs.insert(s.coeffs.clone(), read_coefficients(&coeff_file, &s.coeffs, model.joint_count())?);
            }
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            index,
            model,
            identities,
            expr,
            coeffs,
        })
    }

    pub fn len(&self) -> usize {
        self.index.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.samples.is_empty()
    }

    pub fn sample(&self, i: usize) -> &SampleRecord {
        &self.index.samples[i]
    }

    pub fn map_size(&self) -> usize {
        self.index.spec.map_size
    }

    pub fn camera(&self, i: usize) -> &Camera {
        &self.index.cameras[self.index.samples[i].camera]
    }

    pub fn expression_map(&self, i: usize) -> &Tensor {
        &self.expr[&self.index.samples[i].expr_maps]
    }

    pub fn coefficients(&self, i: usize) -> &Coefficients {
        &self.coeffs[&self.index.samples[i].coeffs]
    }

    pub fn identity_maps(&self, i: usize) -> &IdentityMaps {
        &self.identities[self.index.samples[i].identity]
    }

    /// RGB image and 1-channel mask of sample `i`.
    pub fn images(&self, i: usize) -> Result<(Image, Image)> {
        let s = &self.index.samples[i];
        Ok((load_png(&self.root.join(&s.image), false)?, load_png(&self.root.join(&s.mask), true)?))
    }

    /// Indices of all samples of `(identity, expression)`, by camera.
    pub fn views_of(&self, identity: usize, expression: usize) -> Vec<usize> {
        let mut v: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let s = &self.index.samples[i];
                s.identity == identity && s.expression == expression
            })
            .collect();
        v.sort_by_key(|&i| self.index.samples[i].camera);
        v
    }
}
