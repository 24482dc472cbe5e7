#![allow(dead_code)]

use lingsplat::quantizer::Codebook;
use lingsplat::scene::{BasisTransform, Gaussian, GaussianScene, MotionBases};
use lingsplat::semantics::{Decoder, Mlp};
use lingsplat::synthetic::SyntheticSpec;
use rand::Rng;

/// Small synthetic world that renders in a few milliseconds.
pub fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        seed,
        clusters: 2,
        gaussians_per_cluster: 12,
        static_grid: 5,
        frames: 3,
        size: 32,
        feature_dim: 4,
        bases: 3,
        embed_dim: 6,
        ..Default::default()
    }
}

fn unit_quat(rng: &mut impl Rng) -> [f32; 4] {
    let q: [f64; 4] = [rng.random_range(0.3..1.0), rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6)];
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    q.map(|v| (v / n) as f32)
}

/// Random scene in front of an identity camera at the origin. Needs `bases ≥ 1`.
pub fn random_scene(rng: &mut impl Rng, n: usize, feature_dim: usize, frames: usize, bases: usize) -> GaussianScene {
    let gaussians = (0..n)
        .map(|i| {
            let dynamic = i % 3 == 2;
            Gaussian {
                center: [rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6), rng.random_range(2.5..4.0)],
                rotation: unit_quat(rng),
                log_scale: [0; 3].map(|_| rng.random_range(-2.8..-1.6)),
                opacity_logit: rng.random_range(-1.0..3.0),
                color: [0; 3].map(|_| rng.random()),
                feature: (0..feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                dynamic,
                weight_logits: if dynamic { (0..bases).map(|_| rng.random_range(-1.0..1.0)).collect() } else { Vec::new() },
            }
        })
        .collect();
    let mut motion = MotionBases::identity(frames, bases);
    for t in 1..frames {
        for b in 0..bases {
            *motion.at_mut(t, b) = BasisTransform {
                rotation: unit_quat(rng),
                translation: [0; 3].map(|_| rng.random_range(-0.05..0.05)),
            };
        }
    }
    GaussianScene::new(gaussians, motion, feature_dim, "", rng.random())
}

pub fn random_semantics(rng: &mut impl Rng, feature_dim: usize, entries: usize, dim: usize) -> (Mlp, Codebook) {
    let dec = Decoder::random(feature_dim, 16, entries, rng.random());
    let data = (0..entries * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    (Mlp::from(&dec), Codebook::new(entries, dim, data).unwrap())
}

pub fn camera(size: usize) -> lingsplat::scene::Camera {
    let f = size as f64 * 1.2;
    lingsplat::scene::Camera::new(f, f, size as f64 / 2.0, size as f64 / 2.0, size, size)
}

/// Direct per-Gaussian relevance: decode, softmax, expected embedding, cosine.
pub fn oracle_scores(scene: &GaussianScene, mlp: &Mlp, book: &Codebook, q: &[f64]) -> Vec<f64> {
    let (i, h, o) = (mlp.input, mlp.hidden, mlp.output);
    let p = &mlp.params;
    let (b1, w2, b2) = (h * i, h * i + h, h * i + h + o * h);
    scene
        .gaussians
        .iter()
        .map(|g| {
            let x: Vec<f64> = g.feature.iter().map(|&v| v as f64).collect();
            let hidden: Vec<f64> = (0..h)
                .map(|r| (p[b1 + r] + (0..i).map(|c| p[r * i + c] * x[c]).sum::<f64>()).max(0.0))
                .collect();
            let logits: Vec<f64> = (0..o)
                .map(|r| p[b2 + r] + (0..h).map(|c| p[w2 + r * h + c] * hidden[c]).sum::<f64>())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            let probs: Vec<f64> = logits.iter().map(|l| (l - m).exp() / z).collect();
            let e: Vec<f64> = (0..book.dim)
                .map(|k| (0..o).map(|j| probs[j] * book.row(j)[k] as f64).sum())
                .collect();
            let n = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                0.0
            } else {
                e.iter().zip(q).map(|(a, b)| a * b).sum::<f64>() / (n * qn)
            }
        })
        .collect()
}
