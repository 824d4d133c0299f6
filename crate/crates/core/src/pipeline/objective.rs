use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::geometry::{MorphableModel, Pose};
use crate::imageio::Image;
use crate::nn::Tensor;
use crate::objectives::{gaussian_reg, geometric, identity_losses, photometric, FeatureExtractor, LossWeights};
use crate::primitives::{to_world, GaussianGrads, WorldMode};
use crate::prior::{PriorForward, Upstream};
use crate::splatter::{rasterize, rasterize_backward, Camera, RenderSettings};

/// Ground-truth UV maps of one training frame.
#[derive(Debug, Clone, Copy)]
pub struct MapTargets<'a> {
    pub tex: &'a Tensor,
    pub verts: &'a Tensor,
    pub expr: &'a Tensor,
    /// Atlas coverage, row-major.
    pub valid: &'a [bool],
}

/// One posed view with its target image.
#[derive(Debug, Clone, Copy)]
pub struct ViewTarget<'a> {
    pub camera: &'a Camera,
    pub pose: &'a Pose,
    pub image: &'a Image,
}

/// Values of every loss term of one evaluation, already weighted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    /// Photometric loss summed over the texture, position and expression maps.
    pub map_color: f64,
    /// Photometric loss averaged over rendered views.
    pub image_color: f64,
    pub geom: f64,
    pub reg: f64,
    pub quant: f64,
    pub id: f64,
    pub arc: f64,
}

impl LossTerms {
    pub const NAMES: [&'static str; 8] = ["total", "map_color", "image_color", "geom", "reg", "quant", "id", "arc"];

    pub fn values(&self) -> [f64; 8] {
        [self.total, self.map_color, self.image_color, self.geom, self.reg, self.quant, self.id, self.arc]
    }

    pub fn add_scaled(&mut self, o: &LossTerms, s: f64) {
        self.total += s * o.total;
        self.map_color += s * o.map_color;
        self.image_color += s * o.image_color;
        self.geom += s * o.geom;
        self.reg += s * o.reg;
        self.quant += s * o.quant;
        self.id += s * o.id;
        self.arc += s * o.arc;
    }
}

/// Which terms enter the objective and how images are formed.
pub struct Objective<'a> {
    pub mesh: &'a MorphableModel,
    pub settings: RenderSettings,
    pub weights: LossWeights,
    pub world_mode: WorldMode,
    pub perceptual: &'a dyn FeatureExtractor,
    /// Adds `L_id` and `L_arc` on every view when present.
    pub identity: Option<&'a dyn FeatureExtractor>,
    /// Adds the offset and SH regularizer.
    pub regularize: bool,
    /// Weight of the codebook and commitment losses.
    pub quant_weight: f64,
}

/// Loss values, upstream gradients for the prior, and the rendered views.
pub struct Evaluation {
    pub terms: LossTerms,
    pub upstream: Upstream,
    pub renders: Vec<Image>,
}

fn tensor_image(t: &Tensor) -> Result<Image> {
    Image::from_data(t.w, t.h, t.c, t.to_hwc())
}

/// Photometric loss on a UV map; texels outside the atlas take the target
/// value and receive no gradient.
fn map_photometric(pred: &Tensor, target: &Tensor, valid: &[bool], w: &LossWeights, ex: &dyn FeatureExtractor) -> Result<(f64, Tensor)> {
    let b = tensor_image(target)?;
    let mut a = tensor_image(pred)?;
    let c = a.channels;
    for (p, &ok) in valid.iter().enumerate() {
        if !ok {
            a.data[p * c..(p + 1) * c].copy_from_slice(&b.data[p * c..(p + 1) * c]);
        }
    }
    let (terms, mut g) = photometric(&a, &b, w, ex)?;
    for (p, &ok) in valid.iter().enumerate() {
        if !ok {
            g[p * c..(p + 1) * c].iter_mut().for_each(|x| *x = 0.0);
        }
    }
    Ok((terms.total, Tensor::from_hwc(pred.h, pred.w, c, &g)))
}

struct ViewResult {
    image_color: f64,
    id: f64,
    arc: f64,
    grads: GaussianGrads,
    render: Image,
}

impl Objective<'_> {
    /// Renders a forward pass from `camera` under `pose`.
    pub fn render(&self, fwd: &PriorForward, camera: &Camera, pose: &Pose) -> Result<Image> {
        let (world, _) = to_world(&fwd.gaussians, self.mesh, pose, self.world_mode)?;
        Ok(rasterize(&world, camera, &self.settings)?.image)
    }

    fn view(&self, fwd: &PriorForward, v: &ViewTarget<'_>) -> Result<ViewResult> {
        let (world, placement) = to_world(&fwd.gaussians, self.mesh, v.pose, self.world_mode)?;
        let r = rasterize(&world, v.camera, &self.settings)?;
        if !r.image.same_shape(v.image) {
            return Err(Error::invalid(format!(
                "target image is {}x{}x{}, camera renders {}x{}x3",
                v.image.width, v.image.height, v.image.channels, r.image.width, r.image.height
            )));
        }
        let (terms, mut g) = photometric(&r.image, v.image, &self.weights, self.perceptual)?;
        let (mut id, mut arc) = (0.0, 0.0);
        if let Some(ex) = self.identity {
            let ((l_id, l_arc), (g_id, g_arc)) = identity_losses(&r.image, v.image, ex)?;
            id = self.weights.id * l_id;
            arc = self.weights.arc * l_arc;
            for (a, (b, c)) in g.iter_mut().zip(g_id.iter().zip(&g_arc)) {
                *a += self.weights.id * b + self.weights.arc * c;
            }
        }
        let mut grads = rasterize_backward(&world, &r.aux, &g)?;
        placement.backward(&mut grads);
        Ok(ViewResult {
            image_color: terms.total,
            id,
            arc,
            grads,
            render: r.image,
        })
    }

    /// Evaluates the objective on one forward pass.
    pub fn evaluate(&self, fwd: &PriorForward, maps: Option<&MapTargets<'_>>, views: &[ViewTarget<'_>]) -> Result<Evaluation> {
        let mut t = LossTerms::default();
        let mut up = Upstream {
            q_weight: self.quant_weight,
            ..Default::default()
        };
        if let Some(m) = maps {
            let d = &fwd.decoded;
            let w = &self.weights;
            let (lt, gt) = map_photometric(&d.tex, m.tex, m.valid, w, self.perceptual)?;
            let (lv, mut gv) = map_photometric(&d.verts, m.verts, m.valid, w, self.perceptual)?;
            let (le, mut ge) = map_photometric(&d.expr, m.expr, m.valid, w, self.perceptual)?;
            t.map_color = lt + lv + le;
            let (geom, g_verts, g_expr) = geometric(
                &tensor_image(&d.verts)?,
                &tensor_image(m.verts)?,
                &tensor_image(&d.expr)?,
                &tensor_image(m.expr)?,
                m.valid,
                w.geom,
            )?;
            t.geom = geom;
            gv.add_assign(&Tensor::from_hwc(d.verts.h, d.verts.w, 3, &g_verts));
            ge.add_assign(&Tensor::from_hwc(d.expr.h, d.expr.w, 3, &g_expr));
            up.tex = Some(gt);
            up.verts = Some(gv);
            up.expr = Some(ge);
        }
        if self.regularize {
            for p in &fwd.parts {
                let (v, g) = gaussian_reg(&p.offsets, &self.weights);
                t.reg += v;
                up.offsets.push(g);
            }
        }
        t.quant = self.quant_weight * fwd.q_loss;
        let results: Vec<Result<ViewResult>> = exec::map_range(views.len(), |i| self.view(fwd, &views[i]));
        let mut renders = Vec::with_capacity(views.len());
        if !views.is_empty() {
            let inv = 1.0 / views.len() as f64;
            let mut acc = GaussianGrads::zeros(fwd.gaussians.len());
            for r in results {
                let r = r?;
                t.image_color += inv * r.image_color;
                t.id += inv * r.id;
                t.arc += inv * r.arc;
                acc.add_scaled(&r.grads, inv);
                renders.push(r.render);
            }
            up.gaussians = Some(acc);
        }
        t.total = t.map_color + t.image_color + t.geom + t.reg + t.quant + t.id + t.arc;
        Ok(Evaluation {
            terms: t,
            upstream: up,
            renders,
        })
    }
}
