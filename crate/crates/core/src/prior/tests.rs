use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::math::Vec3;
use crate::primitives::{apply_offsets, init_part};
use crate::splatter::{rasterize, rasterize_backward, Camera, RenderSettings};
use crate::synthgen::{make_toy_model, ToyModelSpec};

fn micro_model(quantize: bool) -> PriorModel {
    let mesh = make_toy_model(&ToyModelSpec::small(), 3);
    let cfg = PriorConfig {
        quantize,
        ..PriorConfig::micro()
    };
    PriorModel::new(cfg, &mesh, 11).unwrap()
}

fn random_map(c: usize, s: usize, rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
    Tensor::from_data(c, s, s, (0..c * s * s).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn inputs(m: &PriorModel, seed: u64) -> (Tensor, Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = m.config.map_size;
    let mut tex = random_map(3, s, &mut rng, 0.5);
    tex.data.iter_mut().for_each(|v| *v += 0.5);
    let mut verts = m.template.clone();
    verts.add_assign(&random_map(3, s, &mut rng, 0.02));
    let expr = random_map(3, s, &mut rng, 0.03);
    (tex, verts, expr)
}

#[test]
fn encoder_shapes_follow_config() {
    let m = micro_model(true);
    let (tex, verts, expr) = inputs(&m, 1);
    let z = m.encode_id(&tex, &verts).unwrap();
    assert_eq!(z.shape(), [4, 4, 4]);
    assert_eq!(m.encode_expr(&expr).unwrap().shape(), [3, 4, 4]);
    let cfg = PriorConfig::default();
    assert_eq!(cfg.latent_size(), 8);
    let d = m.decode(&z, &m.encode_expr(&expr).unwrap()).unwrap();
    for t in [&d.tex, &d.verts, &d.expr] {
        assert_eq!([t.h, t.w], [16, 16]);
    }
    assert_eq!(d.feat.shape(), [4, 16, 16]);
}

#[test]
fn half_resolution_features() {
    let mesh = make_toy_model(&ToyModelSpec::small(), 3);
    let cfg = PriorConfig {
        feat_half_res: true,
        ..PriorConfig::micro()
    };
    let m = PriorModel::new(cfg, &mesh, 1).unwrap();
    let (tex, verts, expr) = inputs(&m, 1);
    let f = m.forward(IdSource::Encode { tex: &tex, verts: &verts }, &expr).unwrap();
    assert_eq!(f.decoded.feat.shape(), [4, 8, 8]);
    assert_eq!(f.decoded.tex.shape(), [3, 16, 16]);
}

#[test]
fn resolution_mismatch_is_rejected() {
    let m = micro_model(true);
    let bad = Tensor::zeros(3, 8, 8);
    let (tex, _, _) = inputs(&m, 1);
    assert!(matches!(m.encode_id(&tex, &bad), Err(Error::InvalidArgument(_))));
    assert!(m.encode_expr(&bad).is_err());
    assert!(m.decode(&Tensor::zeros(4, 2, 2), &Tensor::zeros(3, 4, 4)).is_err());
}

#[test]
fn encoding_is_deterministic_and_not_collapsed() {
    let m = micro_model(true);
    let (tex, verts, _) = inputs(&m, 1);
    let (tex2, _, _) = inputs(&m, 2);
    let a = m.encode_id(&tex, &verts).unwrap();
    let b = m.encode_id(&tex, &verts).unwrap();
    assert_eq!(a, b);
    let c = m.encode_id(&tex2, &verts).unwrap();
    let gap: f64 = a.data.iter().zip(&c.data).map(|(x, y)| (x - y) * (x - y)).sum();
    assert!(gap > 0.0);
}

#[test]
fn zero_expression_with_zero_head_gives_zero_latent() {
    let mut m = micro_model(true);
    m.params.e_expr.zero_last_conv();
    let z = m.encode_expr(&Tensor::zeros(3, 16, 16)).unwrap();
    assert!(z.data.iter().all(|v| *v == 0.0));
}

#[test]
fn quantization_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let book = Codebook::new(8, (0..256 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let z = Tensor::from_data(8, 1, 1000, (0..8000).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let q = quantize(&z, &book).unwrap();
    for p in 0..1000 {
        let code: Vec<f64> = (0..8).map(|k| z.data[k * 1000 + p]).collect();
        let mut best = (f64::INFINITY, 0);
        for k in 0..256 {
            let d: f64 = book.entry(k).iter().zip(&code).map(|(a, b)| (a - b).powi(2)).sum();
            if d < best.0 {
                best = (d, k);
            }
        }
        assert_eq!(q.indices[p], best.1);
    }
    let again = quantize(&q.zq, &book).unwrap();
    assert_eq!(again.zq, q.zq);
    assert_eq!(again.codebook_loss, 0.0);
    assert_eq!(again.commit_loss, 0.0);
}

#[test]
fn identity_and_expression_branches_are_disentangled() {
    let m = micro_model(true);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let zi = random_map(4, 4, &mut rng, 1.0);
    let ze = random_map(3, 4, &mut rng, 1.0);
    let ze2 = random_map(3, 4, &mut rng, 1.0);
    let zi2 = random_map(4, 4, &mut rng, 1.0);
    let a = m.decode(&zi, &ze).unwrap();
    let b = m.decode(&zi, &ze2).unwrap();
    assert_eq!(a.tex, b.tex);
    assert_eq!(a.verts, b.verts);
    assert_ne!(a.expr, b.expr);
    let c = m.decode(&zi2, &ze).unwrap();
    assert_eq!(a.expr, c.expr);
    assert_ne!(a.tex, c.tex);
}

#[test]
fn zero_initialized_regressors_reproduce_init_render() {
    let m = micro_model(true);
    let (tex, verts, expr) = inputs(&m, 4);
    let f = m.forward(IdSource::Encode { tex: &tex, verts: &verts }, &expr).unwrap();
    assert_eq!(f.gaussians.len(), m.config.gaussian_count());
    for p in &f.parts {
        assert!(p.offsets.d_position.iter().all(|d| *d == Vec3::zeros()));
        assert!(p.offsets.sh.iter().flatten().flatten().all(|v| *v == 0.0));
    }
    let phi = m.position_map(&f.decoded).unwrap();
    let mut init = GaussianSet::default();
    for r in Region::ALL {
        let part = init_part(&phi, &m.grids[r.index()]).unwrap();
        init.extend(&apply_offsets(&part, &PartOffsets::zeros(part.len())).unwrap());
    }
    let cam = camera(32);
    let s = RenderSettings::default();
    let a = rasterize(&f.gaussians, &cam, &s).unwrap();
    let b = rasterize(&init, &cam, &s).unwrap();
    assert_eq!(a.image, b.image);
}

#[test]
fn regressor_arity_and_independence() {
    let mut m = micro_model(true);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let feat = random_map(4, 16, &mut rng, 1.0);
    let (face_s, _) = m.sample_features(&feat, Region::Face).unwrap();
    let (hair_s, _) = m.sample_features(&feat, Region::Hair).unwrap();
    assert_eq!(face_s.shape(), [4, 1, 2]);
    let hair_before = m.regress(Region::Hair, &hair_s).unwrap();
    m.params.r_gauss[0].visit_mut("", &mut |_, v| v.iter_mut().for_each(|x| *x += 0.3));
    m.params.r_color[0].visit_mut("", &mut |_, v| v.iter_mut().for_each(|x| *x += 0.3));
    let face = m.regress(Region::Face, &face_s).unwrap();
    assert_eq!(face.len(), 2);
    assert_eq!(face.sh[0].len() * 3, COLOR_CHANNELS);
    assert!(face.d_position.iter().any(|d| *d != Vec3::zeros()));
    assert_eq!(m.regress(Region::Hair, &hair_s).unwrap(), hair_before);
    assert!(m.regress(Region::Hair, &Tensor::zeros(4, 2, 2)).is_err());
}

fn camera(size: usize) -> Camera {
    Camera::look_at(
        Vec3::new(0.3, 0.2, 3.5),
        Vec3::zeros(),
        Vec3::new(0.0, 1.0, 0.0),
        size as f64 * 1.2,
        size,
        size,
    )
    .unwrap()
}

// Scalar objective: weighted render plus weighted texture map.
fn objective(m: &PriorModel, tex: &Tensor, verts: &Tensor, expr: &Tensor, w_img: &[f64], w_tex: &Tensor) -> f64 {
    let f = m.forward(IdSource::Encode { tex, verts }, expr).unwrap();
    let r = rasterize(&f.gaussians, &camera(24), &RenderSettings::default()).unwrap();
    let a: f64 = r.image.data.iter().zip(w_img).map(|(x, w)| x * w).sum();
    let b: f64 = f.decoded.tex.data.iter().zip(&w_tex.data).map(|(x, w)| x * w).sum();
    a + b + f.q_loss
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let mut m = micro_model(false);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    // Non-trivial heads so every branch carries gradient.
    for net in m.params.r_gauss.iter_mut().chain(m.params.r_color.iter_mut()) {
        net.visit_mut("", &mut |_, v| v.iter_mut().for_each(|x| *x += rng.gen_range(-0.05..0.05)));
    }
    let (tex, verts, expr) = inputs(&m, 8);
    let w_img: Vec<f64> = (0..24 * 24 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w_tex = random_map(3, 16, &mut rng, 0.01);
    let f = m.forward(IdSource::Encode { tex: &tex, verts: &verts }, &expr).unwrap();
    assert_eq!(f.gaussians.len(), 4);
    let r = rasterize(&f.gaussians, &camera(24), &RenderSettings::default()).unwrap();
    assert!(r.aux.splats.len() == 4, "all micro Gaussians must be visible");
    let gg = rasterize_backward(&f.gaussians, &r.aux, &w_img).unwrap();
    let up = Upstream {
        gaussians: Some(gg),
        tex: Some(w_tex.clone()),
        q_weight: 1.0,
        ..Default::default()
    };
    let mut grad = m.params.zeros_like();
    m.backward(&f, &up, &mut grad).unwrap();
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    let mut names = Vec::new();
    grad.visit(&mut |g, name, v| {
        if matches!(g, Group::EncoderId | Group::EncoderExpr | Group::DecoderFeat) && name.ends_with("weight") {
            names.push((name, v.to_vec()));
        }
    });
    for (name, gv) in names {
        for idx in [0, gv.len() / 2, gv.len() - 1] {
            let h = 1e-5;
            let eval = |delta: f64| {
                let mut mm = m.clone();
                mm.params.visit_mut(&mut |_, n, v| {
                    if n == name {
                        v[idx] += delta;
                    }
                });
                objective(&mm, &tex, &verts, &expr, &w_img, &w_tex)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = gv[idx];
            if fd.abs().max(an.abs()) < 1e-7 {
                continue;
            }
            let rel = (fd - an).abs() / fd.abs().max(an.abs());
            worst = worst.max(rel);
            checked += 1;
            assert!(rel < 1e-2, "{name}[{idx}]: analytic {an}, numeric {fd}");
        }
    }
    assert!(checked >= 6, "only {checked} coordinates checked (worst {worst})");
}

#[test]
fn quantized_backward_is_straight_through() {
    let m = micro_model(true);
    let (tex, verts, expr) = inputs(&m, 3);
    let f = m.forward(IdSource::Encode { tex: &tex, verts: &verts }, &expr).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let up = Upstream {
        tex: Some(random_map(3, 16, &mut rng, 1.0)),
        q_weight: 0.0,
        ..Default::default()
    };
    let mut g1 = m.params.zeros_like();
    let gz = m.backward(&f, &up, &mut g1).unwrap();
    // The same upstream at ẑ through the decoders alone.
    let mut g2 = m.params.zeros_like();
    let mut out = Tensor::zeros(6, 16, 16);
    out.data[..3 * 256].copy_from_slice(&up.tex.as_ref().unwrap().data);
    let (_, tape) = m.params.d_id.forward(f.zq_id());
    let g_zq = m.params.d_id.backward(&tape, &out, &mut g2.d_id);
    for (a, b) in gz.data.iter().zip(&g_zq.data) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn pivot_source_skips_identity_encoder() {
    let m = micro_model(true);
    let (tex, verts, expr) = inputs(&m, 3);
    let z = m.encode_id(&tex, &verts).unwrap();
    let a = m.forward(IdSource::Encode { tex: &tex, verts: &verts }, &expr).unwrap();
    let b = m.forward(IdSource::Pivot(&z), &expr).unwrap();
    assert_eq!(a.gaussians, b.gaussians);
    let up = Upstream {
        tex: Some(Tensor::from_data(3, 16, 16, vec![1.0; 768]).unwrap()),
        ..Default::default()
    };
    let mut g = m.params.zeros_like();
    m.backward(&b, &up, &mut g).unwrap();
    g.e_id.visit("", &mut |_, v| assert!(v.iter().all(|x| *x == 0.0)));
}

#[test]
fn checkpoint_round_trip_and_mismatch() {
    let m = micro_model(true);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("prior.bin");
    m.save(&path).unwrap();
    let back = PriorModel::load(&path).unwrap();
    assert_eq!(back, m);
    let other = PriorConfig {
        feature_dim: 8,
        ..PriorConfig::micro()
    };
    assert!(matches!(PriorModel::load_expecting(&path, &other), Err(Error::Config(_))));
    assert!(PriorModel::load_expecting(&path, &m.config).is_ok());
}

#[test]
fn config_rejects_unknown_fields_and_bad_values() {
    assert!(toml::from_str::<PriorConfig>("bogus = 1").is_err());
    let c: PriorConfig = toml::from_str("feature_dim = 128").unwrap();
    assert_eq!(c.feature_dim, 128);
    let bad = PriorConfig {
        map_size: 60,
        ..Default::default()
    };
    assert!(bad.validate().is_err());
}
