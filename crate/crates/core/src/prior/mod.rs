//! The generative head prior: identity and expression encoders, vector
//! quantization, map decoders and per-part Gaussian regressors.
//!
//! Layer recipes are documented in `docs/ARCHITECTURE.md`; the recipe
//! version is stored in every checkpoint as [`ARCH_VERSION`].

mod checkpoint;
mod quantize;

pub use checkpoint::{CHECKPOINT_FORMAT, ARCH_VERSION};
pub use quantize::{ema_update, quantize, Codebook, Quantized};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::round_f32;
use crate::error::{Error, Result};
use crate::geometry::{MorphableModel, Region};
use crate::math::Vec3;
use crate::nn::{Conv2d, Layer, Net, Tape, Tensor};
use crate::primitives::{apply_offsets, init_part, part_backward, GaussianGrads, GaussianSet, PartOffsets, PartParams};
use crate::primitives::sh::SH_COEFFS;
use crate::uvmap::{rasterize_uv, BilinearTaps, SampleGrid, UvMap};

/// Number of Gaussian offset channels: position, rotation, log-scale, opacity.
pub const GAUSS_CHANNELS: usize = 10;
/// Number of SH channels: 16 coefficients × RGB.
pub const COLOR_CHANNELS: usize = SH_COEFFS * 3;

/// Fixed multipliers applied to raw network outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputScales {
    pub verts: f64,
    pub expr: f64,
    pub position: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub sh: f64,
}

impl Default for OutputScales {
    fn default() -> Self {
        OutputScales {
            verts: 0.1,
            expr: 0.1,
            position: 0.02,
            rotation: 0.2,
            scale: 0.2,
            opacity: 1.0,
            sh: 1.0,
        }
    }
}

/// Architecture of a [`PriorModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    /// Side length of every input and decoded map.
    pub map_size: usize,
    /// Encoder widths; the first is the stem, each further entry halves the
    /// resolution.
    pub enc_widths: Vec<usize>,
    /// Decoder widths; each entry after the first doubles the resolution.
    pub dec_widths: Vec<usize>,
    pub res_blocks: usize,
    pub n_id: usize,
    pub n_expr: usize,
    pub codebook_size: usize,
    pub feature_dim: usize,
    pub regressor_width: usize,
    pub regressor_blocks: usize,
    pub beta_commit: f64,
    /// `false` bypasses the codebooks (plain autoencoder).
    pub quantize: bool,
    /// EMA decay for codebook updates; `None` trains codebooks by gradient.
    pub codebook_ema: Option<f64>,
    /// Decode the feature map at half resolution and sample it bilinearly.
    pub feat_half_res: bool,
    /// `[cols, rows]` of the face sample grid.
    pub face_grid: [usize; 2],
    pub hair_grid: [usize; 2],
    /// Grid inset from each chart border, in texels.
    pub grid_inset: f64,
    pub expr_input_scale: f64,
    pub output_scales: OutputScales,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            map_size: 64,
            enc_widths: vec![8, 16, 32, 32],
            dec_widths: vec![32, 16, 8, 8],
            res_blocks: 1,
            n_id: 64,
            n_expr: 64,
            codebook_size: 256,
            feature_dim: 32,
            regressor_width: 16,
            regressor_blocks: 4,
            beta_commit: 0.25,
            quantize: true,
            codebook_ema: None,
            feat_half_res: false,
            face_grid: [40, 20],
            hair_grid: [40, 12],
            grid_inset: 2.0,
            expr_input_scale: 10.0,
            output_scales: OutputScales::default(),
        }
    }
}

impl PriorConfig {
    /// Feature dimension 128.
    pub fn wide_features() -> Self {
        PriorConfig {
            feature_dim: 128,
            ..Default::default()
        }
    }

    /// Half-resolution feature decoding.
    pub fn feature_upsampling() -> Self {
        PriorConfig {
            feat_half_res: true,
            ..Default::default()
        }
    }

    /// Tiny network with two Gaussians per region, for gradient checks.
    pub fn micro() -> Self {
        PriorConfig {
            map_size: 16,
            enc_widths: vec![3, 4, 4],
            dec_widths: vec![4, 4, 3],
            res_blocks: 1,
            n_id: 4,
            n_expr: 3,
            codebook_size: 8,
            feature_dim: 4,
            regressor_width: 3,
            regressor_blocks: 4,
            face_grid: [2, 1],
            hair_grid: [2, 1],
            grid_inset: 3.0,
            ..Default::default()
        }
    }

    pub fn downsamplings(&self) -> usize {
        self.enc_widths.len().saturating_sub(1)
    }

    pub fn latent_size(&self) -> usize {
        self.map_size >> self.downsamplings()
    }

    pub fn feature_size(&self) -> usize {
        if self.feat_half_res {
            self.map_size / 2
        } else {
            self.map_size
        }
    }

    pub fn grid_layout(&self, region: Region) -> [usize; 2] {
        match region {
            Region::Face => self.face_grid,
            Region::Hair => self.hair_grid,
        }
    }

    pub fn gaussian_count(&self) -> usize {
        self.face_grid[0] * self.face_grid[1] + self.hair_grid[0] * self.hair_grid[1]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("prior: {m}")));
        if self.enc_widths.len() < 2 || self.dec_widths.len() != self.enc_widths.len() {
            return bad("encoder and decoder need the same number (>= 2) of widths");
        }
        if self.enc_widths.iter().chain(&self.dec_widths).any(|w| *w == 0) {
            return bad("channel widths must be positive");
        }
        let down = 1usize << self.downsamplings();
        if self.map_size < down || self.map_size % down != 0 {
            return bad("map_size must be divisible by 2^downsamplings");
        }
        if self.n_id == 0 || self.n_expr == 0 || self.codebook_size == 0 || self.feature_dim == 0 {
            return bad("latent dims, codebook size and feature dim must be positive");
        }
        if self.regressor_width == 0 {
            return bad("regressor_width must be positive");
        }
        if !(self.beta_commit >= 0.0) {
            return bad("beta_commit must be >= 0");
        }
        if let Some(d) = self.codebook_ema {
            if !(0.0..1.0).contains(&d) {
                return bad("codebook_ema must lie in [0, 1)");
            }
        }
        if self.face_grid.iter().chain(&self.hair_grid).any(|v| *v == 0) {
            return bad("sample grids must be nonempty");
        }
        if !(self.grid_inset >= 0.0) || !(self.expr_input_scale > 0.0) {
            return bad("grid_inset must be >= 0 and expr_input_scale > 0");
        }
        Ok(())
    }
}

/// Parameter group, used for freezing and per-group learning rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    EncoderId,
    EncoderExpr,
    DecoderFeat,
    DecoderId,
    DecoderExpr,
    RegressorColor,
    RegressorGauss,
    Codebooks,
}

impl Group {
    pub const ALL: [Group; 8] = [
        Group::EncoderId,
        Group::EncoderExpr,
        Group::DecoderFeat,
        Group::DecoderId,
        Group::DecoderExpr,
        Group::RegressorColor,
        Group::RegressorGauss,
        Group::Codebooks,
    ];

    pub fn decoders_and_regressors() -> Vec<Group> {
        vec![
            Group::DecoderFeat,
            Group::DecoderId,
            Group::DecoderExpr,
            Group::RegressorColor,
            Group::RegressorGauss,
        ]
    }
}

/// All trainable tensors. A zeroed twin doubles as gradient storage.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorParams {
    pub e_id: Net,
    pub e_expr: Net,
    pub d_feat: Net,
    pub d_id: Net,
    pub d_expr: Net,
    /// Indexed by [`Region::index`].
    pub r_color: [Net; 2],
    pub r_gauss: [Net; 2],
    pub book_id: Codebook,
    pub book_expr: Codebook,
}

impl PriorParams {
    fn build(cfg: &PriorConfig, rng: &mut ChaCha8Rng) -> Self {
        let book = |dim: usize, rng: &mut ChaCha8Rng| {
            let entries = (0..cfg.codebook_size * dim).map(|_| rng.gen_range(-1.0..1.0) / cfg.codebook_size as f64).collect();
            Codebook::new(dim, entries).expect("codebook dims")
        };
        let e_id = encoder(cfg, 6, cfg.n_id, rng);
        let e_expr = encoder(cfg, 3, cfg.n_expr, rng);
        let d_feat = decoder(cfg, cfg.n_id + cfg.n_expr, cfg.feature_dim, cfg.feat_half_res, rng);
        let d_id = decoder(cfg, cfg.n_id, 6, false, rng);
        let d_expr = decoder(cfg, cfg.n_expr, 3, false, rng);
        let r_color = [regressor(cfg, COLOR_CHANNELS, rng), regressor(cfg, COLOR_CHANNELS, rng)];
        let r_gauss = [regressor(cfg, GAUSS_CHANNELS, rng), regressor(cfg, GAUSS_CHANNELS, rng)];
        let book_id = book(cfg.n_id, rng);
        let book_expr = book(cfg.n_expr, rng);
        PriorParams {
            e_id,
            e_expr,
            d_feat,
            d_id,
            d_expr,
            r_color,
            r_gauss,
            book_id,
            book_expr,
        }
    }

    pub fn zeros_like(&self) -> Self {
        PriorParams {
            e_id: self.e_id.zeros_like(),
            e_expr: self.e_expr.zeros_like(),
            d_feat: self.d_feat.zeros_like(),
            d_id: self.d_id.zeros_like(),
            d_expr: self.d_expr.zeros_like(),
            r_color: [self.r_color[0].zeros_like(), self.r_color[1].zeros_like()],
            r_gauss: [self.r_gauss[0].zeros_like(), self.r_gauss[1].zeros_like()],
            book_id: self.book_id.zeros_like(),
            book_expr: self.book_expr.zeros_like(),
        }
    }

    /// Visits every parameter array with its group and stable name.
    pub fn visit(&self, f: &mut dyn FnMut(Group, String, &[f64])) {
        self.e_id.visit("e_id", &mut |n, v| f(Group::EncoderId, n, v));
        self.e_expr.visit("e_expr", &mut |n, v| f(Group::EncoderExpr, n, v));
        self.d_feat.visit("d_feat", &mut |n, v| f(Group::DecoderFeat, n, v));
        self.d_id.visit("d_id", &mut |n, v| f(Group::DecoderId, n, v));
        self.d_expr.visit("d_expr", &mut |n, v| f(Group::DecoderExpr, n, v));
        for r in Region::ALL {
            self.r_color[r.index()].visit(&format!("r_color.{}", r.name()), &mut |n, v| f(Group::RegressorColor, n, v));
            self.r_gauss[r.index()].visit(&format!("r_gauss.{}", r.name()), &mut |n, v| f(Group::RegressorGauss, n, v));
        }
        f(Group::Codebooks, "book_id".into(), &self.book_id.entries);
        f(Group::Codebooks, "book_expr".into(), &self.book_expr.entries);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(Group, String, &mut Vec<f64>)) {
        self.e_id.visit_mut("e_id", &mut |n, v| f(Group::EncoderId, n, v));
        self.e_expr.visit_mut("e_expr", &mut |n, v| f(Group::EncoderExpr, n, v));
        self.d_feat.visit_mut("d_feat", &mut |n, v| f(Group::DecoderFeat, n, v));
        self.d_id.visit_mut("d_id", &mut |n, v| f(Group::DecoderId, n, v));
        self.d_expr.visit_mut("d_expr", &mut |n, v| f(Group::DecoderExpr, n, v));
        for r in Region::ALL {
            self.r_color[r.index()].visit_mut(&format!("r_color.{}", r.name()), &mut |n, v| f(Group::RegressorColor, n, v));
            self.r_gauss[r.index()].visit_mut(&format!("r_gauss.{}", r.name()), &mut |n, v| f(Group::RegressorGauss, n, v));
        }
        f(Group::Codebooks, "book_id".into(), &mut self.book_id.entries);
        f(Group::Codebooks, "book_expr".into(), &mut self.book_expr.entries);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, v| n += v.len());
        n
    }

    /// Rounds every parameter to the nearest `f32`, so checkpoints are exact.
    pub fn round_to_f32(&mut self) {
        self.visit_mut(&mut |_, _, v| v.iter_mut().for_each(|x| *x = round_f32(*x)));
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, _, v| ok &= v.iter().all(|x| x.is_finite()));
        ok
    }
}

fn encoder(cfg: &PriorConfig, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Net {
    let w = &cfg.enc_widths;
    let mut layers = vec![Layer::Conv(Conv2d::new(cin, w[0], 3, 1, 1.0, rng)), Layer::LeakyRelu];
    for i in 1..w.len() {
        layers.push(Layer::Conv(Conv2d::new(w[i - 1], w[i], 3, 2, 1.0, rng)));
        layers.push(Layer::LeakyRelu);
    }
    let last = *w.last().unwrap();
    for _ in 0..cfg.res_blocks {
        layers.push(residual(last, 3, rng));
    }
    layers.push(Layer::Conv(Conv2d::new(last, cout, 1, 1, 1.0, rng)));
    Net::new(layers)
}

fn decoder(cfg: &PriorConfig, cin: usize, cout: usize, half_res: bool, rng: &mut ChaCha8Rng) -> Net {
    let w = &cfg.dec_widths;
    let ups = if half_res { w.len() - 2 } else { w.len() - 1 };
    let mut layers = vec![Layer::Conv(Conv2d::new(cin, w[0], 1, 1, 1.0, rng))];
    for _ in 0..cfg.res_blocks {
        layers.push(residual(w[0], 3, rng));
    }
    layers.push(Layer::LeakyRelu);
    for i in 1..=ups {
        layers.push(Layer::Upsample);
        layers.push(Layer::Conv(Conv2d::new(w[i - 1], w[i], 3, 1, 1.0, rng)));
        layers.push(Layer::LeakyRelu);
    }
    layers.push(Layer::Conv(Conv2d::new(w[ups], cout, 3, 1, 0.1, rng)));
    Net::new(layers)
}

fn regressor(cfg: &PriorConfig, cout: usize, rng: &mut ChaCha8Rng) -> Net {
    let hid = cfg.regressor_width;
    let mut layers = vec![Layer::Conv(Conv2d::new(cfg.feature_dim, hid, 1, 1, 1.0, rng))];
    for _ in 0..cfg.regressor_blocks {
        layers.push(residual(hid, 3, rng));
    }
    layers.push(Layer::LeakyRelu);
    layers.push(Layer::Conv(Conv2d::zeroed(hid, cout, 1, 1)));
    Net::new(layers)
}

fn residual(c: usize, k: usize, rng: &mut ChaCha8Rng) -> Layer {
    Layer::Residual(Conv2d::new(c, c, k, 1, 1.0, rng), Conv2d::new(c, c, k, 1, 0.5, rng))
}

/// Weights, codebooks and fixed buffers of the prior.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorModel {
    pub config: PriorConfig,
    pub params: PriorParams,
    /// Rasterized mean shape, `3 × S × S`; decoded positions are residuals on it.
    pub template: Tensor,
    /// Indexed by [`Region::index`].
    pub grids: [SampleGrid; 2],
}

/// The three decoded attribute maps plus the feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub feat: Tensor,
    pub tex: Tensor,
    pub verts: Tensor,
    pub expr: Tensor,
}

/// Where the identity latent comes from.
#[derive(Debug, Clone, Copy)]
pub enum IdSource<'a> {
    /// Encode texture and neutral-position maps.
    Encode { tex: &'a Tensor, verts: &'a Tensor },
    /// A fixed latent (inversion pivot), still quantized when enabled.
    Pivot(&'a Tensor),
}

/// One region's primitives and the intermediates needed for its backward.
#[derive(Debug, Clone)]
pub struct PartOutput {
    pub part: PartParams,
    pub offsets: PartOffsets,
    feat_taps: Vec<BilinearTaps>,
    samples: Tensor,
    color_tape: Tape,
    gauss_tape: Tape,
}

/// Everything a forward pass produces.
#[derive(Debug, Clone)]
pub struct PriorForward {
    pub z_id: Tensor,
    pub z_expr: Tensor,
    pub q_id: Option<Quantized>,
    pub q_expr: Option<Quantized>,
    pub decoded: Decoded,
    /// Model-space Gaussians, face first.
    pub gaussians: GaussianSet,
    pub parts: Vec<PartOutput>,
    /// `codebook + β·commit` summed over both branches.
    pub q_loss: f64,
    id_tape: Option<(Tensor, Tape)>,
    expr_tape: (Tensor, Tape),
    feat_tape: (Tensor, Tape),
    did_tape: (Tensor, Tape),
    dexpr_tape: (Tensor, Tape),
}

impl PriorForward {
    pub fn zq_id(&self) -> &Tensor {
        self.q_id.as_ref().map(|q| &q.zq).unwrap_or(&self.z_id)
    }

    pub fn zq_expr(&self) -> &Tensor {
        self.q_expr.as_ref().map(|q| &q.zq).unwrap_or(&self.z_expr)
    }

    pub fn part_range(&self, r: Region) -> std::ops::Range<usize> {
        let n0 = self.parts[0].part.len();
        match r {
            Region::Face => 0..n0,
            Region::Hair => n0..n0 + self.parts[1].part.len(),
        }
    }
}

/// Upstream gradients for [`PriorModel::backward`].
#[derive(Debug, Clone, Default)]
pub struct Upstream {
    /// Gradients on the model-space Gaussians.
    pub gaussians: Option<GaussianGrads>,
    /// Direct gradients on each part's offsets (regularizers).
    pub offsets: Vec<PartOffsets>,
    pub tex: Option<Tensor>,
    pub verts: Option<Tensor>,
    pub expr: Option<Tensor>,
    /// Weight of `q_loss` in the total objective.
    pub q_weight: f64,
}

impl PriorModel {
    /// Fresh model with random weights, zero-initialized regressor heads,
    /// and buffers derived from the mesh atlas.
    pub fn new(config: PriorConfig, mesh: &MorphableModel, seed: u64) -> Result<Self> {
        config.validate()?;
        let s = config.map_size;
        let mean: Vec<f64> = mesh.mean_shape.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
        let (mut map, _) = rasterize_uv(mesh, &mean, 3, s, s)?;
        let inset = config.grid_inset / s as f64;
        let mut grids = Vec::new();
        for r in Region::ALL {
            let chart = mesh
                .region(r)
                .ok_or_else(|| Error::invalid(format!("mesh atlas has no {} region", r.name())))?;
            let [cols, rows] = config.grid_layout(r);
            let mut g = SampleGrid::for_region(chart, cols, rows, [inset, inset])?;
            g.check_coverage(&map)?;
            g.coords.iter_mut().flatten().for_each(|c| *c = round_f32(*c));
            grids.push(g);
        }
        map.data.iter_mut().for_each(|v| *v = round_f32(*v));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = PriorParams::build(&config, &mut rng);
        params.round_to_f32();
        let hair = grids.pop().unwrap();
        let face = grids.pop().unwrap();
        Ok(PriorModel {
            template: Tensor::from_hwc(s, s, 3, &map.data),
            config,
            params,
            grids: [face, hair],
        })
    }

    fn check_map(&self, t: &Tensor, what: &str) -> Result<()> {
        let s = self.config.map_size;
        if t.shape() != [3, s, s] {
            return Err(Error::invalid(format!(
                "{what} map is {}x{}x{}, expected 3x{s}x{s}",
                t.c, t.h, t.w
            )));
        }
        Ok(())
    }

    fn id_input(&self, tex: &Tensor, verts: &Tensor) -> Result<Tensor> {
        self.check_map(tex, "texture")?;
        self.check_map(verts, "position")?;
        Tensor::concat(tex, verts)
    }

    fn expr_input(&self, expr: &Tensor) -> Result<Tensor> {
        self.check_map(expr, "expression")?;
        let mut x = expr.clone();
        x.data.iter_mut().for_each(|v| *v *= self.config.expr_input_scale);
        Ok(x)
    }

    pub fn encode_id(&self, tex: &Tensor, verts: &Tensor) -> Result<Tensor> {
        Ok(self.params.e_id.apply(&self.id_input(tex, verts)?))
    }

    pub fn encode_expr(&self, expr: &Tensor) -> Result<Tensor> {
        Ok(self.params.e_expr.apply(&self.expr_input(expr)?))
    }

    fn check_latent(&self, z: &Tensor, n: usize, what: &str) -> Result<()> {
        let l = self.config.latent_size();
        if z.shape() != [n, l, l] {
            return Err(Error::invalid(format!("{what} latent is {}x{}x{}, expected {n}x{l}x{l}", z.c, z.h, z.w)));
        }
        Ok(())
    }

    /// Decodes quantized latents into feature, texture, position and
    /// expression maps.
    pub fn decode(&self, zq_id: &Tensor, zq_expr: &Tensor) -> Result<Decoded> {
        Ok(self.decode_taped(zq_id, zq_expr)?.0)
    }

    #[allow(clippy::type_complexity)]
    fn decode_taped(&self, zq_id: &Tensor, zq_expr: &Tensor) -> Result<(Decoded, [(Tensor, Tape); 3])> {
        self.check_latent(zq_id, self.config.n_id, "identity")?;
        self.check_latent(zq_expr, self.config.n_expr, "expression")?;
        let p = &self.params;
        let sc = &self.config.output_scales;
        let cat = Tensor::concat(zq_id, zq_expr)?;
        let (feat, feat_tape) = p.d_feat.forward(&cat);
        let (out_id, id_tape) = p.d_id.forward(zq_id);
        let (out_expr, expr_tape) = p.d_expr.forward(zq_expr);
        let mut tex = out_id.channels(0, 3);
        tex.data.iter_mut().for_each(|v| *v += 0.5);
        let mut verts = out_id.channels(3, 3);
        for (v, t) in verts.data.iter_mut().zip(&self.template.data) {
            *v = t + sc.verts * *v;
        }
        let mut expr = out_expr;
        expr.data.iter_mut().for_each(|v| *v *= sc.expr);
        Ok((
            Decoded { feat, tex, verts, expr },
            [(cat, feat_tape), (zq_id.clone(), id_tape), (zq_expr.clone(), expr_tape)],
        ))
    }

    /// Samples `F × rows × cols` features of one region from a feature map.
    pub fn sample_features(&self, feat: &Tensor, region: Region) -> Result<(Tensor, Vec<BilinearTaps>)> {
        let grid = &self.grids[region.index()];
        let hwc = feat.to_hwc();
        let n = grid.len();
        let mut samples = Tensor::zeros(feat.c, grid.rows, grid.cols);
        let mut taps = Vec::with_capacity(n);
        let mut buf = vec![0.0; feat.c];
        for (i, &[u, v]) in grid.coords.iter().enumerate() {
            let t = BilinearTaps::new(feat.w, feat.h, u, v)?;
            t.gather(&hwc, feat.c, &mut buf);
            for (k, b) in buf.iter().enumerate() {
                samples.data[k * n + i] = *b;
            }
            taps.push(t);
        }
        Ok((samples, taps))
    }

    /// Runs both regressors of `region` on its sampled features.
    pub fn regress(&self, region: Region, samples: &Tensor) -> Result<PartOffsets> {
        Ok(self.regress_taped(region, samples)?.0)
    }

    fn regress_taped(&self, region: Region, samples: &Tensor) -> Result<(PartOffsets, Tape, Tape)> {
        let [cols, rows] = self.config.grid_layout(region);
        if samples.shape() != [self.config.feature_dim, rows, cols] {
            return Err(Error::invalid(format!("{} features have the wrong layout", region.name())));
        }
        let (color, color_tape) = self.params.r_color[region.index()].forward(samples);
        let (gauss, gauss_tape) = self.params.r_gauss[region.index()].forward(samples);
        let n = rows * cols;
        let sc = &self.config.output_scales;
        let mut off = PartOffsets::zeros(n);
        for i in 0..n {
            let g = |c: usize| gauss.data[c * n + i];
            off.d_position[i] = Vec3::new(g(0), g(1), g(2)) * sc.position;
            off.d_rotation[i] = Vec3::new(g(3), g(4), g(5)) * sc.rotation;
            off.d_log_scale[i] = Vec3::new(g(6), g(7), g(8)) * sc.scale;
            off.d_opacity[i] = g(9) * sc.opacity;
            for k in 0..SH_COEFFS {
                for c in 0..3 {
                    off.sh[i][k][c] = color.data[(k * 3 + c) * n + i] * sc.sh;
                }
            }
        }
        Ok((off, color_tape, gauss_tape))
    }

    /// Full composition from attribute maps to model-space Gaussians.
    pub fn forward(&self, id: IdSource<'_>, expr: &Tensor) -> Result<PriorForward> {
        let cfg = &self.config;
        let (z_id, id_tape) = match id {
            IdSource::Encode { tex, verts } => {
                let x = self.id_input(tex, verts)?;
                let (z, tape) = self.params.e_id.forward(&x);
                (z, Some((x, tape)))
            }
            IdSource::Pivot(z) => {
                self.check_latent(z, cfg.n_id, "identity")?;
                (z.clone(), None)
            }
        };
        let x_expr = self.expr_input(expr)?;
        let (z_expr, e_tape) = self.params.e_expr.forward(&x_expr);
        let (q_id, q_expr) = if cfg.quantize {
            (
                Some(quantize(&z_id, &self.params.book_id)?),
                Some(quantize(&z_expr, &self.params.book_expr)?),
            )
        } else {
            (None, None)
        };
        let q_loss = [&q_id, &q_expr]
            .iter()
            .filter_map(|q| q.as_ref())
            .map(|q| q.loss(cfg.beta_commit))
            .sum();
        let zq_id = q_id.as_ref().map(|q| &q.zq).unwrap_or(&z_id);
        let zq_expr = q_expr.as_ref().map(|q| &q.zq).unwrap_or(&z_expr);
        let (decoded, [feat_tape, did_tape, dexpr_tape]) = self.decode_taped(zq_id, zq_expr)?;
        let phi = self.position_map(&decoded)?;
        let mut parts = Vec::with_capacity(2);
        let mut gaussians = GaussianSet::default();
        for r in Region::ALL {
            let mut part = init_part(&phi, &self.grids[r.index()])?;
            let (samples, feat_taps) = self.sample_features(&decoded.feat, r)?;
            let n = part.len();
            part.features = (0..n)
                .flat_map(|i| (0..samples.c).map(move |k| (i, k)))
                .map(|(i, k)| samples.data[k * n + i])
                .collect();
            let (offsets, color_tape, gauss_tape) = self.regress_taped(r, &samples)?;
            gaussians.extend(&apply_offsets(&part, &offsets)?);
            parts.push(PartOutput {
                part,
                offsets,
                feat_taps,
                samples,
                color_tape,
                gauss_tape,
            });
        }
        Ok(PriorForward {
            z_id,
            z_expr,
            q_id,
            q_expr,
            decoded,
            gaussians,
            parts,
            q_loss,
            id_tape,
            expr_tape: (x_expr, e_tape),
            feat_tape,
            did_tape,
            dexpr_tape,
        })
    }

    /// `φ = x̂_verts + x̂_expr` as an all-valid UV map.
    pub fn position_map(&self, d: &Decoded) -> Result<UvMap> {
        let mut phi = d.verts.clone();
        phi.add_assign(&d.expr);
        UvMap::from_data(phi.w, phi.h, 3, phi.to_hwc())
    }

    /// Reverse pass of [`forward`](Self::forward). Parameter gradients are
    /// accumulated into `grad`; returns the gradient at the identity latent
    /// before quantization.
    pub fn backward(&self, fwd: &PriorForward, up: &Upstream, grad: &mut PriorParams) -> Result<Tensor> {
        let cfg = &self.config;
        let sc = &cfg.output_scales;
        let s = cfg.map_size;
        let n_total = fwd.gaussians.len();
        if let Some(g) = &up.gaussians {
            if g.len() != n_total {
                return Err(Error::InvalidState("gaussian gradient count does not match the forward pass".into()));
            }
        }
        if !up.offsets.is_empty() && up.offsets.len() != fwd.parts.len() {
            return Err(Error::InvalidState("offset gradients must cover every part".into()));
        }
        let fs = cfg.feature_size();
        let mut g_phi = vec![0.0; s * s * 3];
        let mut g_feat = vec![0.0; fs * fs * cfg.feature_dim];
        let mut start = 0;
        for (pi, po) in fwd.parts.iter().enumerate() {
            let r = po.part.region;
            let n = po.part.len();
            let mut g_off = match &up.gaussians {
                Some(g) => {
                    let pb = part_backward(&po.part, &po.offsets, &g.slice(start, n), s * s * 3);
                    for (a, b) in g_phi.iter_mut().zip(&pb.position_map) {
                        *a += b;
                    }
                    pb.offsets
                }
                None => PartOffsets::zeros(n),
            };
            start += n;
            if let Some(extra) = up.offsets.get(pi) {
                add_offsets(&mut g_off, extra);
            }
            let mut g_gauss = Tensor::zeros(GAUSS_CHANNELS, po.samples.h, po.samples.w);
            let mut g_color = Tensor::zeros(COLOR_CHANNELS, po.samples.h, po.samples.w);
            for i in 0..n {
                for a in 0..3 {
                    g_gauss.data[a * n + i] = g_off.d_position[i][a] * sc.position;
                    g_gauss.data[(3 + a) * n + i] = g_off.d_rotation[i][a] * sc.rotation;
                    g_gauss.data[(6 + a) * n + i] = g_off.d_log_scale[i][a] * sc.scale;
                }
                g_gauss.data[9 * n + i] = g_off.d_opacity[i] * sc.opacity;
                for k in 0..SH_COEFFS {
                    for c in 0..3 {
                        g_color.data[(k * 3 + c) * n + i] = g_off.sh[i][k][c] * sc.sh;
                    }
                }
            }
            let mut g_s = self.params.r_color[r.index()].backward(&po.color_tape, &g_color, &mut grad.r_color[r.index()]);
            g_s.add_assign(&self.params.r_gauss[r.index()].backward(&po.gauss_tape, &g_gauss, &mut grad.r_gauss[r.index()]));
            let mut buf = vec![0.0; cfg.feature_dim];
            for (i, t) in po.feat_taps.iter().enumerate() {
                for (k, b) in buf.iter_mut().enumerate() {
                    *b = g_s.data[k * n + i];
                }
                t.scatter(&mut g_feat, cfg.feature_dim, &buf);
            }
        }
        let g_phi = Tensor::from_hwc(s, s, 3, &g_phi);
        let mut g_verts = g_phi.clone();
        if let Some(v) = &up.verts {
            g_verts.add_assign(v);
        }
        let mut g_expr = g_phi;
        if let Some(e) = &up.expr {
            g_expr.add_assign(e);
        }
        let mut g_out_id = Tensor::zeros(6, s, s);
        if let Some(t) = &up.tex {
            g_out_id.data[..3 * s * s].copy_from_slice(&t.data);
        }
        for (a, b) in g_out_id.data[3 * s * s..].iter_mut().zip(&g_verts.data) {
            *a = b * sc.verts;
        }
        g_expr.data.iter_mut().for_each(|v| *v *= sc.expr);
        let g_feat = Tensor::from_hwc(fs, fs, cfg.feature_dim, &g_feat);

        let p = &self.params;
        let g_cat = p.d_feat.backward(&fwd.feat_tape.1, &g_feat, &mut grad.d_feat);
        let mut g_zq_id = p.d_id.backward(&fwd.did_tape.1, &g_out_id, &mut grad.d_id);
        let mut g_zq_expr = p.d_expr.backward(&fwd.dexpr_tape.1, &g_expr, &mut grad.d_expr);
        g_zq_id.add_assign(&g_cat.channels(0, cfg.n_id));
        g_zq_expr.add_assign(&g_cat.channels(cfg.n_id, cfg.n_expr));

        let book_weight = if cfg.codebook_ema.is_some() { 0.0 } else { 1.0 };
        let g_z_id = match &fwd.q_id {
            Some(q) => straight_through(q, &g_zq_id, cfg.beta_commit, up.q_weight, book_weight, &mut grad.book_id),
            None => g_zq_id,
        };
        let g_z_expr = match &fwd.q_expr {
            Some(q) => straight_through(q, &g_zq_expr, cfg.beta_commit, up.q_weight, book_weight, &mut grad.book_expr),
            None => g_zq_expr,
        };
        if let Some((_, tape)) = &fwd.id_tape {
            p.e_id.backward(tape, &g_z_id, &mut grad.e_id);
        }
        p.e_expr.backward(&fwd.expr_tape.1, &g_z_expr, &mut grad.e_expr);
        Ok(g_z_id)
    }
}

fn straight_through(q: &Quantized, g: &Tensor, beta: f64, weight: f64, book_weight: f64, book_grad: &mut Codebook) -> Tensor {
    if book_weight == 0.0 {
        let mut scratch = book_grad.zeros_like();
        return q.backward(g, beta, weight, &mut scratch);
    }
    q.backward(g, beta, weight, book_grad)
}

fn add_offsets(a: &mut PartOffsets, b: &PartOffsets) {
    for i in 0..a.len().min(b.len()) {
        a.d_position[i] += b.d_position[i];
        a.d_rotation[i] += b.d_rotation[i];
        a.d_log_scale[i] += b.d_log_scale[i];
        a.d_opacity[i] += b.d_opacity[i];
        for k in 0..SH_COEFFS {
            for c in 0..3 {
                a.sh[i][k][c] += b.sh[i][k][c];
            }
        }
    }
}

#[cfg(test)]
mod tests;
