//! Deterministic synthetic worlds: rigidly moving Gaussian clusters in front
//! of a static backdrop, observed by a slowly moving pinhole camera, plus
//! every supervision channel the pipeline consumes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::localization::QueryEmbedding;
use crate::math::{self, Quat};
use crate::motion;
use crate::quantizer::FeatureStack;
use crate::raster::{self, Channels, RenderConfig, SplatParams};
use crate::scene::{BasisTransform, Camera, Gaussian, GaussianScene, MotionBases};
use crate::training::{SupervisionFrame, SupervisionStack, Track};

/// Logit given to the inactive bases of a one-hot weight vector; its
/// exponential underflows to exactly zero after the softmax shift.
pub const OFF_LOGIT: f32 = -1.0e4;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub clusters: usize,
    pub gaussians_per_cluster: usize,
    /// Side of the square static backdrop grid (0 disables it).
    pub static_grid: usize,
    pub frames: usize,
    /// Image width and height in pixels.
    pub size: usize,
    pub feature_dim: usize,
    pub bases: usize,
    /// Dimension of the external embedding space.
    pub embed_dim: usize,
    /// Standard deviation of the angular noise on pixel embeddings (degrees).
    pub noise_deg: f64,
    /// Distance of cluster centers from the optical axis (world units).
    pub ring_radius: f64,
    /// Per-axis standard deviation of Gaussian offsets within a cluster.
    pub cluster_spread: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 7,
            clusters: 2,
            gaussians_per_cluster: 50,
            static_grid: 12,
            frames: 8,
            size: 64,
            feature_dim: 8,
            bases: 10,
            embed_dim: 16,
            noise_deg: 5.0,
            ring_radius: 1.0,
            cluster_spread: 0.12,
        }
    }
}

impl SyntheticSpec {
    fn check(&self) -> Result<()> {
        let total = self.clusters * self.gaussians_per_cluster + self.static_grid * self.static_grid;
        if total == 0 {
            return Err(Error::Invalid("synthetic scene has no Gaussians".into()));
        }
        if self.bases == 0 {
            return Err(Error::Invalid("number of motion bases must be positive".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Invalid("feature dimension must be positive".into()));
        }
        if self.frames == 0 || self.size == 0 {
            return Err(Error::Invalid("frames and image size must be positive".into()));
        }
        if self.embed_dim < self.labels() {
            return Err(Error::Invalid(format!(
                "embedding dimension {} cannot hold {} orthogonal prototypes",
                self.embed_dim,
                self.labels()
            )));
        }
        Ok(())
    }

    /// Number of semantic labels: one per cluster plus the backdrop.
    pub fn labels(&self) -> usize {
        self.clusters + 1
    }

    pub fn backdrop_label(&self) -> usize {
        self.clusters
    }
}

/// Reference scene with its ground-truth bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticWorld {
    pub spec: SyntheticSpec,
    pub scene: GaussianScene,
    /// Semantic label of every Gaussian (cluster id, or the backdrop label).
    pub labels: Vec<usize>,
    /// Orthonormal embedding prototype of every label.
    pub prototypes: Vec<Vec<f64>>,
    pub cameras: Vec<Camera>,
    /// Offset viewpoints used only for evaluation.
    pub heldout_cameras: Vec<Camera>,
}

impl SyntheticWorld {
    /// Gaussian indices of cluster `k`.
    pub fn members(&self, label: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == label).collect()
    }

    pub fn query(&self, label: usize) -> QueryEmbedding {
        let name = if label == self.spec.backdrop_label() {
            "backdrop".to_string()
        } else {
            format!("cluster_{label}")
        };
        QueryEmbedding::new(name, self.prototypes[label].clone()).expect("unit prototype")
    }
}

fn random_unit_quat(rng: &mut ChaCha8Rng) -> Quat {
    loop {
        let q: Quat = [0; 4].map(|_| StandardNormal.sample(rng));
        let n = math::norm4(&q);
        if n > 1e-3 {
            return math::normalize4(&q);
        }
    }
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Gram-Schmidt orthonormal vectors.
fn orthonormal(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v = random_unit(rng, dim);
        for u in &out {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(u) {
                *x -= d * y;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            out.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    out
}

fn frame_camera(spec: &SyntheticSpec, t: usize, heldout: bool) -> Camera {
    let w = spec.size as f64;
    let f = 0.9 * w;
    let tf = t as f64;
    let (mut yaw, mut tx, mut ty) = (0.004 * tf, -0.03 * tf, 0.02 * tf);
    if heldout {
        yaw += 0.02;
        tx += 0.07;
        ty -= 0.05;
    }
    let r = math::quat_to_mat(&math::quat_from_axis_angle([0.0, 1.0, 0.0], yaw));
    Camera::new(f, f, 0.5 * w, 0.5 * w, spec.size, spec.size).with_pose(r, [tx, ty, 0.0])
}

/// Rigid motion of one basis: rotation about `pivot` by `angle·t` around
/// `axis`, plus `velocity·t`.
fn basis_at(pivot: [f64; 3], axis: [f64; 3], angle: f64, velocity: [f64; 3], t: usize) -> BasisTransform {
    let tf = t as f64;
    let q = math::quat_from_axis_angle(axis, angle * tf);
    let r = math::quat_to_mat(&q);
    let p = nalgebra::Vector3::from(pivot);
    let rp = r * p;
    BasisTransform {
        rotation: q.map(|v| v as f32),
        translation: [0, 1, 2].map(|k| (p[k] - rp[k] + velocity[k] * tf) as f32),
    }
}

/// Builds the reference world for `spec`.
pub fn world(spec: &SyntheticSpec) -> Result<SyntheticWorld> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let prototypes = orthonormal(&mut rng, spec.labels(), spec.embed_dim);
    let feature_protos: Vec<Vec<f64>> = (0..spec.labels())
        .map(|_| random_unit(&mut rng, spec.feature_dim))
        .collect();

    let mut gaussians = Vec::new();
    let mut labels = Vec::new();

    let g = spec.static_grid;
    let spacing = 0.8;
    let half = 0.5 * spacing * (g as f64 - 1.0);
    for iy in 0..g {
        for ix in 0..g {
            let jitter = Normal::new(0.0, 0.05).unwrap();
            let shade: f64 = rng.random_range(0.25..0.6);
            gaussians.push(Gaussian {
                center: [
                    (-half + spacing * ix as f64 + jitter.sample(&mut rng)) as f32,
                    (-half + spacing * iy as f64 + jitter.sample(&mut rng)) as f32,
                    (7.0 + jitter.sample(&mut rng)) as f32,
                ],
                rotation: random_unit_quat(&mut rng).map(|v| v as f32),
                log_scale: [0; 3].map(|_| (rng.random_range(0.4..0.5f64)).ln() as f32),
                opacity_logit: rng.random_range(2.5..3.5),
                color: [
                    shade as f32,
                    (shade * rng.random_range(0.8..1.1)) as f32,
                    (shade * rng.random_range(0.9..1.3)).min(1.0) as f32,
                ],
                feature: feature_protos[spec.backdrop_label()].iter().map(|&v| v as f32).collect(),
                dynamic: false,
                weight_logits: Vec::new(),
            });
            labels.push(spec.backdrop_label());
        }
    }

    let mut motion = MotionBases::identity(spec.frames, spec.bases);
    let mut pivots = vec![[0.0; 3]; spec.bases];
    let spread = Normal::new(0.0, spec.cluster_spread).unwrap();
    for k in 0..spec.clusters {
        let theta = std::f64::consts::TAU * k as f64 / spec.clusters as f64 + 0.4;
        let center = [
            spec.ring_radius * theta.cos(),
            spec.ring_radius * theta.sin(),
            4.0 + rng.random_range(-0.2..0.2),
        ];
        if k < spec.bases {
            pivots[k] = center;
        }
        let base_color = [0; 3].map(|_| rng.random_range(0.2..0.95f64));
        let b = k % spec.bases;
        for _ in 0..spec.gaussians_per_cluster {
            let mut logits = vec![OFF_LOGIT; spec.bases];
            logits[b] = 0.0;
            gaussians.push(Gaussian {
                center: [0, 1, 2].map(|a| (center[a] + spread.sample(&mut rng)) as f32),
                rotation: random_unit_quat(&mut rng).map(|v| v as f32),
                log_scale: [0; 3].map(|_| rng.random_range(0.05..0.09f64).ln() as f32),
                opacity_logit: rng.random_range(2.5..3.5),
                color: base_color.map(|c| (c + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0) as f32),
                feature: feature_protos[k].iter().map(|&v| v as f32).collect(),
                dynamic: true,
                weight_logits: logits,
            });
            labels.push(k);
        }
    }
    for (b, pivot) in pivots.iter().enumerate() {
        let axis = random_unit(&mut rng, 3);
        let angle = rng.random_range(0.02..0.05);
        let velocity = [
            rng.random_range(-0.03..0.03),
            rng.random_range(-0.03..0.03),
            rng.random_range(-0.02..0.02),
        ];
        for t in 1..spec.frames {
            *motion.at_mut(t, b) = basis_at(*pivot, [axis[0], axis[1], axis[2]], angle, velocity, t);
        }
    }

    let scene = GaussianScene::new(gaussians, motion, spec.feature_dim, "", spec.seed);
    Ok(SyntheticWorld {
        spec: spec.clone(),
        scene,
        labels,
        prototypes,
        cameras: (0..spec.frames).map(|t| frame_camera(spec, t, false)).collect(),
        heldout_cameras: (0..spec.frames).map(|t| frame_camera(spec, t, true)).collect(),
    })
}

/// Reference scene of [`world`].
pub fn new_synthetic_scene(spec: &SyntheticSpec) -> Result<GaussianScene> {
    Ok(world(spec)?.scene)
}

/// Renders of the reference scene with every Gaussian of `label` recolored.
pub fn recolor_reference(world: &SyntheticWorld, label: usize, color: [f32; 3], cameras: &[Camera]) -> Result<Vec<Vec<f64>>> {
    let mut scene = world.scene.clone();
    for i in world.members(label) {
        scene.gaussians[i].color = color;
    }
    let cfg = RenderConfig::default();
    (0..cameras.len())
        .map(|t| Ok(raster::render(&scene, t, &cameras[t], Channels::Color, &cfg)?.color))
        .collect()
}

/// Everything `gen-synthetic` writes.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub world: SyntheticWorld,
    pub supervision: SupervisionStack,
    /// Dense embedding stack for the quantizer.
    pub features: FeatureStack,
    /// Per-pixel semantic label, `None` where alpha < 0.5.
    pub pixel_labels: Vec<Option<usize>>,
    /// Held-out reference renders (`frames × H × W × 3`).
    pub heldout_rgb: Vec<Vec<f64>>,
    /// Starting point for training: perturbed reference geometry with
    /// randomized appearance and features.
    pub init_scene: GaussianScene,
    pub queries: Vec<QueryEmbedding>,
}

/// Share of a pixel's alpha its majority label must hold; mixed silhouette
/// pixels below it are left unlabelled.
pub const LABEL_PURITY: f64 = 0.9;

/// Per-pixel label maps obtained by compositing one-hot label vectors.
pub fn label_maps(world: &SyntheticWorld, scene: &GaussianScene, labels: &[usize], cameras: &[Camera]) -> Result<Vec<Vec<Option<usize>>>> {
    let nl = world.spec.labels();
    let cfg = RenderConfig::default();
    (0..cameras.len())
        .map(|t| {
            let posed = motion::pose_at(scene, t)?;
            let mut p = SplatParams::from_posed(scene, &posed);
            p.feature_dim = nl;
            p.features = labels
                .iter()
                .flat_map(|&l| (0..nl).map(move |j| if j == l { 1.0 } else { 0.0 }))
                .collect();
            let out = raster::render_params(&p, &cameras[t], &cfg, Channels::Feature, None)?;
            Ok((0..out.pixel_count())
                .map(|px| {
                    if out.alpha[px] < 0.5 {
                        return None;
                    }
                    let f = out.feature_at(px);
                    let mut best = 0;
                    for j in 1..nl {
                        if f[j] > f[best] {
                            best = j;
                        }
                    }
                    (f[best] >= LABEL_PURITY * out.alpha[px]).then_some(best)
                })
                .collect())
        })
        .collect()
}

/// `proto` rotated by a random angle ~ N(0, σ) towards a random orthogonal direction.
fn perturb_direction(rng: &mut ChaCha8Rng, proto: &[f64], sigma_deg: f64) -> Vec<f64> {
    let mut u = random_unit(rng, proto.len());
    let d: f64 = u.iter().zip(proto).map(|(a, b)| a * b).sum();
    for (x, p) in u.iter_mut().zip(proto) {
        *x -= d * p;
    }
    let n = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let theta: f64 = sigma_deg.to_radians() * { let z: f64 = StandardNormal.sample(rng); z };
    proto
        .iter()
        .zip(&u)
        .map(|(p, x)| theta.cos() * p + theta.sin() * x / n)
        .collect()
}

/// Dense embeddings: each labelled pixel gets its label prototype plus
/// angular noise; unlabelled pixels are invalid zero vectors.
pub fn embed_labels(
    labels: &[Vec<Option<usize>>],
    prototypes: &[Vec<f64>],
    sigma_deg: f64,
    size: (usize, usize),
    seed: u64,
) -> Result<FeatureStack> {
    let dim = prototypes[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::new();
    let mut valid = Vec::new();
    for frame in labels {
        for l in frame {
            match l {
                Some(l) => {
                    data.extend(perturb_direction(&mut rng, &prototypes[*l], sigma_deg).iter().map(|&v| v as f32));
                    valid.push(true);
                }
                None => {
                    data.extend(std::iter::repeat_n(0.0f32, dim));
                    valid.push(false);
                }
            }
        }
    }
    FeatureStack::new(labels.len(), size.1, size.0, dim, data, valid)
}

/// Generates the full dataset for `spec`.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    let world = world(spec)?;
    let scene = &world.scene;
    let cfg = RenderConfig::default();
    let (w, h) = (spec.size, spec.size);

    let mut frames = Vec::with_capacity(spec.frames);
    let mut heldout_rgb = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let out = raster::render(scene, t, &world.cameras[t], Channels::Color, &cfg)?;
        frames.push(SupervisionFrame {
            rgb: out.color,
            mask: Some(out.dynamic_alpha),
            depth: Some(out.depth),
            index: None,
        });
        heldout_rgb.push(raster::render(scene, t, &world.heldout_cameras[t], Channels::Color, &cfg)?.color);
    }

    let tracks = (0..spec.clusters)
        .filter_map(|k| {
            let members = world.members(k);
            let n = members.len() as f64;
            if members.is_empty() {
                return None;
            }
            let mean = [0, 1, 2].map(|a| members.iter().map(|&i| scene.gaussians[i].center[a] as f64).sum::<f64>() / n);
            let anchor = *members
                .iter()
                .min_by(|&&a, &&b| {
                    let d = |i: usize| -> f64 {
                        (0..3).map(|k| (scene.gaussians[i].center[k] as f64 - mean[k]).powi(2)).sum()
                    };
                    d(a).total_cmp(&d(b)).then(a.cmp(&b))
                })
                .expect("non-empty cluster");
            Some(anchor)
        })
        .map(|anchor| -> Result<Track> {
            let mut pixels = Vec::new();
            let mut visible = Vec::new();
            for t in 0..spec.frames {
                let posed = motion::pose_at(scene, t)?;
                let px = raster::project_point(&world.cameras[t], posed.centers[anchor], cfg.z_near);
                match px {
                    Some(p) if p[0] >= 0.0 && p[1] >= 0.0 && p[0] < w as f64 && p[1] < h as f64 => {
                        pixels.push(p);
                        visible.push(true);
                    }
                    _ => {
                        pixels.push([0.0, 0.0]);
                        visible.push(false);
                    }
                }
            }
            Ok(Track {
                gaussian: anchor,
                pixels,
                visible,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let labels = label_maps(&world, scene, &world.labels, &world.cameras)?;
    let features = embed_labels(&labels, &world.prototypes, spec.noise_deg, (w, h), spec.seed ^ 0x5eed)?;

    let init_scene = perturbed_init(&world, spec.seed ^ 0x1417);
    let queries = (0..spec.labels()).map(|l| world.query(l)).collect();
    Ok(SyntheticDataset {
        supervision: SupervisionStack {
            width: w,
            height: h,
            cameras: world.cameras.clone(),
            frames,
            tracks,
        },
        features,
        pixel_labels: labels.into_iter().flatten().collect(),
        heldout_rgb,
        init_scene,
        queries,
        world,
    })
}

/// Reference geometry with a small jitter, grey colors, neutral opacity and
/// random features; motion is kept.
pub fn perturbed_init(world: &SyntheticWorld, seed: u64) -> GaussianScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scene = world.scene.clone();
    let jitter = Normal::new(0.0, 0.01).unwrap();
    let feat = Normal::new(0.0, 0.5).unwrap();
    for g in &mut scene.gaussians {
        for c in &mut g.center {
            *c += jitter.sample(&mut rng) as f32;
        }
        for s in &mut g.log_scale {
            *s += (2.0 * jitter.sample(&mut rng)) as f32;
        }
        g.opacity_logit += (20.0 * jitter.sample(&mut rng)) as f32;
        g.color = [0.5; 3];
        for f in &mut g.feature {
            *f = feat.sample(&mut rng) as f32;
        }
    }
    scene.seed = seed;
    scene
}
