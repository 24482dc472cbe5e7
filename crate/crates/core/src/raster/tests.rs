use super::*;
use crate::math::QUAT_IDENTITY;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cam() -> Camera {
    Camera::new(30.0, 30.0, 16.0, 12.0, 32, 24)
}

fn one(center: [f64; 3], log_scale: f64, opacity_logit: f64, color: [f64; 3]) -> SplatParams {
    SplatParams {
        centers: vec![center],
        rotations: vec![QUAT_IDENTITY],
        log_scales: vec![[log_scale; 3]],
        opacity_logits: vec![opacity_logit],
        colors: vec![color],
        features: vec![0.5, -0.25],
        feature_dim: 2,
        dynamic: vec![false],
    }
}

fn concat(a: SplatParams, b: SplatParams) -> SplatParams {
    let mut p = a;
    p.centers.extend(b.centers);
    p.rotations.extend(b.rotations);
    p.log_scales.extend(b.log_scales);
    p.opacity_logits.extend(b.opacity_logits);
    p.colors.extend(b.colors);
    p.features.extend(b.features);
    p.dynamic.extend(b.dynamic);
    p
}

#[test]
fn empty_scene_is_background() {
    let p = SplatParams {
        centers: vec![],
        rotations: vec![],
        log_scales: vec![],
        opacity_logits: vec![],
        colors: vec![],
        features: vec![],
        feature_dim: 3,
        dynamic: vec![],
    };
    let out = render_params(&p, &cam(), &RenderConfig::default(), Channels::Both, None).unwrap();
    assert!(out.color.iter().all(|&v| v == 0.0));
    assert!(out.alpha.iter().all(|&v| v == 0.0));
    assert!(out.feature.iter().all(|&v| v == 0.0));
    assert_eq!(out.feature.len(), 32 * 24 * 3);
}

#[test]
fn opaque_splat_center_pixel_is_clamped_color() {
    // Pixel (16, 12) has its center at (16.5, 12.5); place the mean there.
    let z = 3.0;
    let center = [0.5 * z / 30.0, 0.5 * z / 30.0, z];
    let p = one(center, 0.0, 20.0, [0.2, 0.4, 0.8]);
    let out = render_params(&p, &cam(), &RenderConfig::default(), Channels::Color, None).unwrap();
    let px = 12 * 32 + 16;
    for k in 0..3 {
        assert!((out.color[px * 3 + k] - 0.999 * p.colors[0][k]).abs() < 1e-12);
    }
}

#[test]
fn two_splats_match_closed_form() {
    let cfg = RenderConfig::default();
    let front = one([0.05, 0.0, 2.0], -1.5, 0.3, [1.0, 0.0, 0.0]);
    let back = one([-0.05, 0.02, 3.0], -1.2, 1.0, [0.0, 1.0, 0.5]);
    let p = concat(back, front);
    let out = render_params(&p, &cam(), &cfg, Channels::Color, None).unwrap();
    let c = cam();
    for &(x, y) in &[(16usize, 12usize), (14, 11), (18, 13)] {
        let px = (x as f64 + 0.5, y as f64 + 0.5);
        let alpha_of = |i: usize| {
            let frame = project::Frame::new(&c);
            let s = project::project_one(
                &frame,
                &cfg,
                i,
                &p.centers[i],
                &p.rotations[i],
                &p.log_scales[i],
                p.opacity_logits[i],
            )
            .unwrap();
            let (dx, dy) = (px.0 - s.mean[0], px.1 - s.mean[1]);
            let [a, b, cc] = s.conic;
            let a = s.opacity * (-0.5 * (a * dx * dx + cc * dy * dy) - b * dx * dy).exp();
            if a < cfg.alpha_min { 0.0 } else { a.min(cfg.alpha_max) }
        };
        let (a1, a0) = (alpha_of(1), alpha_of(0));
        let pix = y * 32 + x;
        for k in 0..3 {
            let expect = a1 * p.colors[1][k] + a0 * (1.0 - a1) * p.colors[0][k];
            assert!((out.color[pix * 3 + k] - expect).abs() < 1e-6);
        }
        assert!((out.alpha[pix] - (1.0 - (1.0 - a1) * (1.0 - a0))).abs() < 1e-12);
    }
}

#[test]
fn weights_sum_to_alpha_and_feature_shares_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = random_params(&mut rng, 12);
    let out = render_params(&p, &cam(), &RenderConfig::default(), Channels::Both, None).unwrap();
    for px in 0..out.pixel_count() {
        let s: f64 = out.contributors_at(px).iter().map(|c| c.weight).sum();
        assert!((s - out.alpha[px]).abs() < 1e-9);
        assert!(out.alpha[px] <= 1.0);
    }
}

#[test]
fn subset_equals_restricted_params() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let p = random_params(&mut rng, 10);
    let keep: Vec<bool> = (0..10).map(|i| i % 3 == 0).collect();
    let a = render_params(&p, &cam(), &RenderConfig::default(), Channels::Both, Some(&keep)).unwrap();
    let idx: Vec<usize> = (0..10).filter(|&i| keep[i]).collect();
    let q = SplatParams {
        centers: idx.iter().map(|&i| p.centers[i]).collect(),
        rotations: idx.iter().map(|&i| p.rotations[i]).collect(),
        log_scales: idx.iter().map(|&i| p.log_scales[i]).collect(),
        opacity_logits: idx.iter().map(|&i| p.opacity_logits[i]).collect(),
        colors: idx.iter().map(|&i| p.colors[i]).collect(),
        features: idx.iter().flat_map(|&i| p.feature(i).to_vec()).collect(),
        feature_dim: p.feature_dim,
        dynamic: idx.iter().map(|&i| p.dynamic[i]).collect(),
    };
    let b = render_params(&q, &cam(), &RenderConfig::default(), Channels::Both, None).unwrap();
    assert_eq!(a.color, b.color);
    assert_eq!(a.feature, b.feature);
    assert_eq!(a.alpha, b.alpha);
}

pub(crate) fn random_params(rng: &mut impl Rng, n: usize) -> SplatParams {
    let fd = 3;
    SplatParams {
        centers: (0..n)
            .map(|_| [rng.random_range(-0.6..0.6), rng.random_range(-0.4..0.4), rng.random_range(2.5..4.0)])
            .collect(),
        rotations: (0..n)
            .map(|_| crate::math::normalize4(&[rng.random_range(0.5..1.0), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)]))
            .collect(),
        log_scales: (0..n)
            .map(|_| [rng.random_range(-2.5..-1.5), rng.random_range(-2.5..-1.5), rng.random_range(-2.5..-1.5)])
            .collect(),
        opacity_logits: (0..n).map(|_| rng.random_range(-1.0..2.0)).collect(),
        colors: (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect(),
        features: (0..n * fd).map(|_| rng.random_range(-1.0..1.0)).collect(),
        feature_dim: fd,
        dynamic: (0..n).map(|i| i % 2 == 1).collect(),
    }
}

#[test]
fn backward_color_gradient_is_total_weight() {
    let p = one([0.0, 0.0, 3.0], -1.5, 0.5, [0.3, 0.3, 0.3]);
    let c = cam();
    let cfg = RenderConfig::default();
    let out = render_params(&p, &c, &cfg, Channels::Color, None).unwrap();
    let grads = RenderGrads {
        color: Some(vec![1.0; out.pixel_count() * 3]),
        ..Default::default()
    };
    let g = render_backward(&p, &c, &cfg, &out, &grads).unwrap();
    let total: f64 = out.contributors.iter().map(|c| c.weight).sum();
    for k in 0..3 {
        assert!((g.colors[0][k] - total).abs() < 1e-9);
    }
}

#[test]
fn culled_gaussian_gets_zero_feature_gradient() {
    let p = concat(
        one([0.0, 0.0, 3.0], -1.5, 0.5, [0.3; 3]),
        one([0.0, 0.0, -3.0], -1.5, 0.5, [0.3; 3]),
    );
    let c = cam();
    let cfg = RenderConfig::default();
    let out = render_params(&p, &c, &cfg, Channels::Feature, None).unwrap();
    let grads = RenderGrads {
        feature: Some(vec![1.0; out.pixel_count() * 2]),
        ..Default::default()
    };
    let g = render_backward(&p, &c, &cfg, &out, &grads).unwrap();
    assert_eq!(&g.features[2..], &[0.0, 0.0]);
    assert!(g.features[0] > 0.0);
}

fn weighted_loss(out: &RenderOutput, w: &RenderGrads) -> f64 {
    let dot = |a: &[f64], b: &Option<Vec<f64>>| -> f64 {
        b.as_ref().map_or(0.0, |b| a.iter().zip(b).map(|(x, y)| x * y).sum())
    };
    dot(&out.color, &w.color)
        + dot(&out.feature, &w.feature)
        + dot(&out.alpha, &w.alpha)
        + dot(&out.depth, &w.depth)
        + dot(&out.dynamic_alpha, &w.dynamic_alpha)
}

fn random_grads(rng: &mut impl Rng, npix: usize, fdim: usize) -> RenderGrads {
    let mut v = |n: usize| Some((0..n).map(|_| rng.random_range(-1.0..1.0)).collect());
    RenderGrads {
        color: v(npix * 3),
        feature: v(npix * fdim),
        alpha: v(npix),
        depth: v(npix),
        dynamic_alpha: v(npix),
    }
}

#[test]
fn backward_matches_finite_differences() {
    let c = cam();
    let cfg = RenderConfig::default();
    let mut checked = 0;
    let mut seed = 100;
    while checked < 5 {
        seed += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_params(&mut rng, 5);
        let out = render_params(&p, &c, &cfg, Channels::Both, None).unwrap();
        let w = random_grads(&mut rng, out.pixel_count(), p.feature_dim);
        let analytic = render_backward(&p, &c, &cfg, &out, &w).unwrap().flatten();
        let mut f = |x: &[f64]| {
            let q = p.unflatten(x);
            weighted_loss(&render_params(&q, &c, &cfg, Channels::Both, None).unwrap(), &w)
        };
        let cmp = crate::gradcheck::compare(&mut f, &p.flatten(), &analytic, 1e-4, 1e-3);
        if !cmp.smooth {
            continue;
        }
        assert!(cmp.max_relative_error < 5e-3, "seed {seed}: {cmp:?}");
        checked += 1;
    }
}
