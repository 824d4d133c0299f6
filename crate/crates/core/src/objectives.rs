//! Training and inversion losses and image metrics. Every loss returns its
//! value together with the gradient with respect to its first argument.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::nn::{Conv2d, Layer, Net, Tensor};
use crate::primitives::{PartOffsets, ShCoeffs};

/// Weights of the photometric, geometric, regularization and identity terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub l1: f64,
    pub ssim: f64,
    pub perceptual: f64,
    pub geom: f64,
    pub pos: f64,
    pub scale: f64,
    pub opacity: f64,
    pub shfc: f64,
    pub id: f64,
    pub arc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            l1: 0.8,
            ssim: 0.2,
            perceptual: 0.1,
            geom: 1.0,
            pos: 1e-4,
            scale: 1e-4,
            opacity: 1e-4,
            shfc: 1e-4,
            id: 1.0,
            arc: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.l1, self.ssim, self.perceptual, self.geom, self.pos, self.scale, self.opacity, self.shfc, self.id, self.arc];
        if all.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

fn check_shapes(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::invalid(format!(
            "image shapes differ: {}x{}x{} vs {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn l1(a: &Image, b: &Image) -> Result<(f64, Vec<f64>)> {
    check_shapes(a, b)?;
    let n = a.data.len() as f64;
    let mut sum = 0.0;
    let grad = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| {
            sum += (x - y).abs();
            sign(x - y) / n
        })
        .collect();
    Ok((sum / n, grad))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean absolute difference over pixels where `mask` is set.
pub fn masked_l1(a: &Image, b: &Image, mask: &[bool]) -> Result<(f64, Vec<f64>)> {
    check_shapes(a, b)?;
    if mask.len() != a.width * a.height {
        return Err(Error::invalid("mask does not match the image"));
    }
    let c = a.channels;
    let count = mask.iter().filter(|m| **m).count() * c;
    let mut grad = vec![0.0; a.data.len()];
    if count == 0 {
        return Ok((0.0, grad));
    }
    let n = count as f64;
    let mut sum = 0.0;
    for (p, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        for k in p * c..(p + 1) * c {
            let d = a.data[k] - b.data[k];
            sum += d.abs();
            grad[k] = sign(d) / n;
        }
    }
    Ok((sum / n, grad))
}

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let x = i as f64 - r;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

// Separable valid-mode Gaussian filter of one `h × w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x0 in 0..ow {
            tmp[y * ow + x0] = (0..SSIM_WINDOW).map(|k| g[k] * x[y * w + x0 + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = (0..SSIM_WINDOW).map(|k| g[k] * tmp[(y0 + k) * ow + x0]).sum();
        }
    }
    out
}

fn filter_valid_adjoint(y: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; h * ow];
    for y0 in 0..oh {
        for x0 in 0..ow {
            let v = y[y0 * ow + x0];
            for k in 0..SSIM_WINDOW {
                tmp[(y0 + k) * ow + x0] += g[k] * v;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for yy in 0..h {
        for x0 in 0..ow {
            let v = tmp[yy * ow + x0];
            for k in 0..SSIM_WINDOW {
                out[yy * w + x0 + k] += g[k] * v;
            }
        }
    }
    out
}

/// Mean structural similarity over all valid 11×11 windows and channels,
/// and its gradient with respect to `a`.
pub fn ssim(a: &Image, b: &Image) -> Result<(f64, Vec<f64>)> {
    check_shapes(a, b)?;
    let (h, w, c) = (a.height, a.width, a.channels);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}")));
    }
    let g = gaussian_taps();
    let npos = ((h + 1 - SSIM_WINDOW) * (w + 1 - SSIM_WINDOW) * c) as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; a.data.len()];
    for ch in 0..c {
        let pa: Vec<f64> = (0..h * w).map(|p| a.data[p * c + ch]).collect();
        let pb: Vec<f64> = (0..h * w).map(|p| b.data[p * c + ch]).collect();
        let sq = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<f64>>();
        let ma = filter_valid(&pa, h, w, &g);
        let mb = filter_valid(&pb, h, w, &g);
        let saa = filter_valid(&sq(&pa, &pa), h, w, &g);
        let sbb = filter_valid(&sq(&pb, &pb), h, w, &g);
        let sab = filter_valid(&sq(&pa, &pb), h, w, &g);
        let n = ma.len();
        let (mut ca, mut cb, mut cc) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for i in 0..n {
            let (mua, mub) = (ma[i], mb[i]);
            let n1 = 2.0 * mua * mub + C1;
            let n2 = 2.0 * (sab[i] - mua * mub) + C2;
            let d1 = mua * mua + mub * mub + C1;
            let d2 = (saa[i] - mua * mua) + (sbb[i] - mub * mub) + C2;
            let s = n1 * n2 / (d1 * d2);
            total += s;
            ca[i] = s * (2.0 * mub / n1 - 2.0 * mub / n2 - 2.0 * mua / d1 + 2.0 * mua / d2) / npos;
            cb[i] = -s / d2 / npos;
            cc[i] = s * 2.0 / n2 / npos;
        }
        let ga = filter_valid_adjoint(&ca, h, w, &g);
        let gb = filter_valid_adjoint(&cb, h, w, &g);
        let gc = filter_valid_adjoint(&cc, h, w, &g);
        for p in 0..h * w {
            grad[p * c + ch] = ga[p] + 2.0 * gb[p] * pa[p] + gc[p] * pb[p];
        }
    }
    Ok((total / npos, grad))
}

/// Image feature pyramid used by the perceptual and identity losses.
pub trait FeatureExtractor: Send + Sync {
    /// Features of every layer, shallow to deep.
    fn features(&self, img: &Image) -> Result<Vec<Tensor>>;
    /// Gradient with respect to `img` of `Σ_l ⟨grads_l, features_l(img)⟩`.
    fn backward(&self, img: &Image, grads: &[Tensor]) -> Result<Vec<f64>>;
}

/// Fixed random strided-convolution pyramid.
#[derive(Debug, Clone)]
pub struct RandomExtractor {
    levels: Vec<Net>,
    channels: usize,
}

impl RandomExtractor {
    pub fn new(channels: usize, widths: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = channels;
        let levels = widths
            .iter()
            .map(|&w| {
                let net = Net::new(vec![Layer::Conv(Conv2d::new(cin, w, 3, 2, 1.0, &mut rng)), Layer::LeakyRelu]);
                cin = w;
                net
            })
            .collect();
        RandomExtractor { levels, channels }
    }

    /// Three-level 3→8→16→16 pyramid.
    pub fn standard(seed: u64) -> Self {
        RandomExtractor::new(3, &[8, 16, 16], seed)
    }
}

impl FeatureExtractor for RandomExtractor {
    fn features(&self, img: &Image) -> Result<Vec<Tensor>> {
        if img.channels != self.channels {
            return Err(Error::invalid(format!("extractor expects {} channels, got {}", self.channels, img.channels)));
        }
        let mut cur = Tensor::from_hwc(img.height, img.width, img.channels, &img.data);
        let mut out = Vec::with_capacity(self.levels.len());
        for net in &self.levels {
            cur = net.apply(&cur);
            out.push(cur.clone());
        }
        Ok(out)
    }

    fn backward(&self, img: &Image, grads: &[Tensor]) -> Result<Vec<f64>> {
        if grads.len() != self.levels.len() {
            return Err(Error::invalid("one gradient per extractor layer is required"));
        }
        let mut cur = Tensor::from_hwc(img.height, img.width, img.channels, &img.data);
        let mut tapes = Vec::with_capacity(self.levels.len());
        for net in &self.levels {
            let (next, tape) = net.forward(&cur);
            tapes.push(tape);
            cur = next;
        }
        let mut g: Option<Tensor> = None;
        for (l, net) in self.levels.iter().enumerate().rev() {
            let mut gl = grads[l].clone();
            if let Some(prev) = &g {
                gl.add_assign(prev);
            }
            let mut scratch = net.zeros_like();
            g = Some(net.backward(&tapes[l], &gl, &mut scratch));
        }
        Ok(g.expect("extractor has at least one level").to_hwc())
    }
}

/// `Σ_l mean((f_l(a) − f_l(b))²)`.
pub fn perceptual(a: &Image, b: &Image, extractor: &dyn FeatureExtractor) -> Result<(f64, Vec<f64>)> {
    check_shapes(a, b)?;
    let fa = extractor.features(a)?;
    let fb = extractor.features(b)?;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(fa.len());
    for (x, y) in fa.iter().zip(&fb) {
        let n = x.data.len() as f64;
        let mut g = x.clone();
        for (gv, (p, q)) in g.data.iter_mut().zip(x.data.iter().zip(&y.data)) {
            let d = p - q;
            total += d * d / n;
            *gv = 2.0 * d / n;
        }
        grads.push(g);
    }
    Ok((total, extractor.backward(a, &grads)?))
}

/// Values of the three terms of the photometric loss.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhotometricTerms {
    pub l1: f64,
    pub ssim: f64,
    pub perceptual: f64,
    pub total: f64,
}

/// `α·L1 + β·(1 − SSIM) + γ·perceptual`.
pub fn photometric(a: &Image, b: &Image, w: &LossWeights, extractor: &dyn FeatureExtractor) -> Result<(PhotometricTerms, Vec<f64>)> {
    check_shapes(a, b)?;
    let mut grad = vec![0.0; a.data.len()];
    let mut terms = PhotometricTerms::default();
    if w.l1 > 0.0 {
        let (v, g) = l1(a, b)?;
        terms.l1 = v;
        axpy(&mut grad, w.l1, &g);
    }
    if w.ssim > 0.0 {
        let (v, g) = ssim(a, b)?;
        terms.ssim = 1.0 - v;
        axpy(&mut grad, -w.ssim, &g);
    }
    if w.perceptual > 0.0 {
        let (v, g) = perceptual(a, b, extractor)?;
        terms.perceptual = v;
        axpy(&mut grad, w.perceptual, &g);
    }
    terms.total = w.l1 * terms.l1 + w.ssim * terms.ssim + w.perceptual * terms.perceptual;
    Ok((terms, grad))
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (p, q) in y.iter_mut().zip(x) {
        *p += a * q;
    }
}

/// `δ·(L1(x̂_verts, x_verts) + L1(x̂_expr, x_exp))` over valid texels.
/// Returns the value and the gradients for both predicted maps.
pub fn geometric(
    pred_verts: &Image,
    verts: &Image,
    pred_expr: &Image,
    expr: &Image,
    mask: &[bool],
    delta: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (a, mut ga) = masked_l1(pred_verts, verts, mask)?;
    let (b, mut gb) = masked_l1(pred_expr, expr, mask)?;
    ga.iter_mut().chain(gb.iter_mut()).for_each(|g| *g *= delta);
    Ok((delta * (a + b), ga, gb))
}

/// L2 penalties on offsets and on the non-DC SH bands; gradients are
/// written into a [`PartOffsets`] shaped like the input.
pub fn gaussian_reg(offsets: &PartOffsets, w: &LossWeights) -> (f64, PartOffsets) {
    let n = offsets.len();
    let mut grad = PartOffsets::zeros(n);
    if n == 0 {
        return (0.0, grad);
    }
    let inv = 1.0 / n as f64;
    let mut total = 0.0;
    for i in 0..n {
        total += inv * (w.pos * offsets.d_position[i].norm_squared() + w.scale * offsets.d_log_scale[i].norm_squared() + w.opacity * offsets.d_opacity[i].powi(2));
        grad.d_position[i] = offsets.d_position[i] * (2.0 * w.pos * inv);
        grad.d_log_scale[i] = offsets.d_log_scale[i] * (2.0 * w.scale * inv);
        grad.d_opacity[i] = offsets.d_opacity[i] * (2.0 * w.opacity * inv);
        let (v, g) = sh_rest_energy(&offsets.sh[i]);
        total += inv * w.shfc * v;
        for k in 1..g.len() {
            for c in 0..3 {
                grad.sh[i][k][c] = g[k][c] * w.shfc * inv;
            }
        }
    }
    (total, grad)
}

fn sh_rest_energy(h: &ShCoeffs) -> (f64, ShCoeffs) {
    let mut g = [[0.0; 3]; 16];
    let mut v = 0.0;
    for k in 1..16 {
        for c in 0..3 {
            v += h[k][c] * h[k][c];
            g[k][c] = 2.0 * h[k][c];
        }
    }
    (v, g)
}

/// `L_id = 1 − cos(embed(a), embed(b))` on the deepest features and
/// `L_arc = Σ_l mean|f_l(a) − f_l(b)|`, with gradients with respect to `a`.
pub fn identity_losses(a: &Image, b: &Image, extractor: &dyn FeatureExtractor) -> Result<((f64, f64), (Vec<f64>, Vec<f64>))> {
    check_shapes(a, b)?;
    let fa = extractor.features(a)?;
    let fb = extractor.features(b)?;
    let last = fa.len() - 1;
    let (ea, eb) = (&fa[last].data, &fb[last].data);
    let na = ea.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = eb.iter().map(|x| x * x).sum::<f64>().sqrt();
    let dot: f64 = ea.iter().zip(eb).map(|(x, y)| x * y).sum();
    let mut id_grads: Vec<Tensor> = fa.iter().map(|t| Tensor::zeros(t.c, t.h, t.w)).collect();
    let l_id = if na > 0.0 && nb > 0.0 {
        let cos = dot / (na * nb);
        for (g, (x, y)) in id_grads[last].data.iter_mut().zip(ea.iter().zip(eb)) {
            *g = -(y / (na * nb) - cos * x / (na * na));
        }
        (1.0 - cos).clamp(0.0, 2.0)
    } else {
        0.0
    };
    let mut l_arc = 0.0;
    let mut arc_grads = Vec::with_capacity(fa.len());
    for (x, y) in fa.iter().zip(&fb) {
        let n = x.data.len() as f64;
        let mut g = x.clone();
        for (gv, (p, q)) in g.data.iter_mut().zip(x.data.iter().zip(&y.data)) {
            l_arc += (p - q).abs() / n;
            *gv = sign(p - q) / n;
        }
        arc_grads.push(g);
    }
    let g_id = extractor.backward(a, &id_grads)?;
    let g_arc = extractor.backward(a, &arc_grads)?;
    Ok(((l_id, l_arc), (g_id, g_arc)))
}

pub const PSNR_CAP: f64 = 99.0;

/// Peak signal-to-noise ratio for unit-range images, capped at 99 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64;
    if mse <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
