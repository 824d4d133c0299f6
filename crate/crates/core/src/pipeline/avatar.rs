use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::TensorContainer;
use crate::error::{Error, Result};
use crate::exec;
use crate::geometry::{MorphableModel, Pose};
use crate::imageio::Image;
use crate::nn::Tensor;
use crate::primitives::{to_world, WorldMode};
use crate::prior::{IdSource, PriorForward, PriorModel};
use crate::splatter::{rasterize, Camera, RenderSettings};
use crate::synthgen::expression_map;

/// Writes a prior together with the mesh it was built on.
pub fn save_prior(path: &Path, model: &PriorModel, mesh: &MorphableModel) -> Result<()> {
    let mut c = TensorContainer::new();
    model.save_into(&mut c)?;
    mesh.save_into(&mut c)?;
    c.write(path)
}

pub fn load_prior(path: &Path) -> Result<(PriorModel, MorphableModel)> {
    let c = TensorContainer::read(path)?;
    if !c.contains("mesh.mean_shape") {
        return Err(Error::Data(format!("{} holds no mesh; it is not a prior bundle", path.display())));
    }
    Ok((PriorModel::load_from(&c)?, MorphableModel::load_from(&c)?))
}

/// `R_uv(γ B_expr)` as a `3 × S × S` tensor.
pub fn expression_input(mesh: &MorphableModel, gamma: &[f64], size: usize) -> Result<Tensor> {
    if gamma.len() != mesh.expr_dim {
        return Err(Error::invalid(format!(
            "expression has {} coefficients, the mesh expects {}",
            gamma.len(),
            mesh.expr_dim
        )));
    }
    let m = expression_map(mesh, gamma, size)?;
    Ok(Tensor::from_hwc(m.height, m.width, 3, &m.data))
}

/// A prior adapted to one subject: tuned weights plus the fixed identity pivot.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonalizedModel {
    pub prior: PriorModel,
    pub mesh: MorphableModel,
    /// Identity latent before quantization, `n_id × s × s`.
    pub pivot: Tensor,
}

/// Expression and head pose of one driving frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrivingFrame {
    pub gamma: Vec<f64>,
    pub pose: Pose,
}

impl PersonalizedModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = TensorContainer::new();
        self.prior.save_into(&mut c)?;
        self.mesh.save_into(&mut c)?;
        let p = &self.pivot;
        c.insert_f64("pivot", &[p.c, p.h, p.w], &p.data)?;
        c.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = TensorContainer::read(path)?;
        if !c.contains("pivot") {
            return Err(Error::Data(format!("{} is not a personalized model (no pivot)", path.display())));
        }
        let prior = PriorModel::load_from(&c)?;
        let s = prior.config.latent_size();
        let n = prior.config.n_id;
        let pivot = Tensor::from_data(n, s, s, c.f64s("pivot", Some(&[n, s, s]))?)?;
        Ok(PersonalizedModel {
            prior,
            mesh: MorphableModel::load_from(&c)?,
            pivot,
        })
    }

    pub fn forward(&self, gamma: &[f64]) -> Result<PriorForward> {
        let x = expression_input(&self.mesh, gamma, self.prior.config.map_size)?;
        self.prior.forward(IdSource::Pivot(&self.pivot), &x)
    }

    pub fn render(&self, frame: &DrivingFrame, camera: &Camera, settings: &RenderSettings, mode: WorldMode) -> Result<Image> {
        let fwd = self.forward(&frame.gamma)?;
        let (world, _) = to_world(&fwd.gaussians, &self.mesh, &frame.pose, mode)?;
        Ok(rasterize(&world, camera, settings)?.image)
    }
}

/// Renders every driving frame; frame `i` uses `cameras[i % cameras.len()]`.
pub fn reenact(
    model: &PersonalizedModel,
    driving: &[DrivingFrame],
    cameras: &[Camera],
    settings: &RenderSettings,
    mode: WorldMode,
) -> Result<Vec<Image>> {
    if cameras.is_empty() {
        return Err(Error::invalid("reenactment needs at least one camera"));
    }
    exec::map_range(driving.len(), |i| model.render(&driving[i], &cameras[i % cameras.len()], settings, mode))
        .into_iter()
        .collect()
}
