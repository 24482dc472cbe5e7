//! Joint optimization of the dynamic scene and decoder, and localized editing.

mod densify;
mod edit;
mod loss;

pub use densify::{densify_and_prune, DensifyConfig, DensifyStats};
pub use edit::{edit, EditConfig, EditMode, EditReport};
pub use loss::{edit_loss, rec_loss, RecBreakdown, RecLoss, RecWeights};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion;
use crate::optim::Adam;
use crate::quantizer::{Codebook, INVALID_INDEX};
use crate::raster::{self, Channels, RenderConfig, SplatParams};
use crate::scene::{Camera, GaussianScene};
use crate::semantics::{self, Decoder, Mlp};

/// A 2D point track anchored to one Gaussian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub gaussian: usize,
    /// Pixel position per frame (ignored where not visible).
    pub pixels: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
}

/// Ground truth of one frame. Images are row-major `H × W (× 3)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisionFrame {
    pub rgb: Vec<f64>,
    /// Dynamic-object mask in `[0, 1]`.
    pub mask: Option<Vec<f64>>,
    /// Camera depth; pixels with depth ≤ 0 carry no supervision.
    pub depth: Option<Vec<f64>>,
    /// Codebook index map; [`INVALID_INDEX`] marks unsupervised pixels.
    pub index: Option<Vec<i32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupervisionStack {
    pub width: usize,
    pub height: usize,
    pub cameras: Vec<Camera>,
    pub frames: Vec<SupervisionFrame>,
    pub tracks: Vec<Track>,
}

impl SupervisionStack {
    pub fn check(&self, scene: &GaussianScene) -> Result<()> {
        let n = self.frames.len();
        if self.cameras.len() != n || n > scene.frames() {
            return Err(Error::Shape(format!(
                "{n} frames, {} cameras, scene with {} frames",
                self.cameras.len(),
                scene.frames()
            )));
        }
        let npix = self.width * self.height;
        for (t, (f, c)) in self.frames.iter().zip(&self.cameras).enumerate() {
            if c.width != self.width || c.height != self.height {
                return Err(Error::Shape(format!("camera {t} size")));
            }
            let bad = f.rgb.len() != npix * 3
                || f.mask.as_ref().is_some_and(|m| m.len() != npix)
                || f.depth.as_ref().is_some_and(|d| d.len() != npix)
                || f.index.as_ref().is_some_and(|i| i.len() != npix);
            if bad {
                return Err(Error::Shape(format!("supervision frame {t} size")));
            }
        }
        for tr in &self.tracks {
            if tr.pixels.len() != n || tr.visible.len() != n || tr.gaussian >= scene.len() {
                return Err(Error::Shape("track table".into()));
            }
            for t in 0..n {
                let [x, y] = tr.pixels[t];
                if tr.visible[t] && !(x >= 0.0 && y >= 0.0 && x < self.width as f64 && y < self.height as f64) {
                    return Err(Error::Invalid(format!("visible track pixel outside frame {t}")));
                }
            }
        }
        Ok(())
    }
}

/// Per-group learning rates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    /// Centers, rotations and log-scales.
    pub geometry: f64,
    /// Colors and features.
    pub appearance: f64,
    pub opacity: f64,
    /// Basis-weight logits and basis transforms.
    pub motion: f64,
    pub decoder: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            geometry: 1.6e-4,
            appearance: 2.5e-3,
            opacity: 5e-2,
            motion: 1.6e-4,
            decoder: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda_rec: f64,
    pub lambda_lang: f64,
    pub epochs: usize,
    pub lr: LearningRates,
    pub rec: RecWeights,
    pub densify: DensifyConfig,
    pub seed: u64,
    pub render: RenderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_rec: 1.0,
            lambda_lang: 1.0,
            epochs: 500,
            lr: LearningRates::default(),
            rec: RecWeights::default(),
            densify: DensifyConfig::default(),
            seed: 0,
            render: RenderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        let lrs = [self.lr.geometry, self.lr.appearance, self.lr.opacity, self.lr.motion, self.lr.decoder];
        let ws = [self.lambda_rec, self.lambda_lang, self.rec.rgb, self.rec.mask, self.rec.depth, self.rec.track];
        if lrs.iter().chain(&ws).any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Invalid("loss weights and learning rates must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Gradients of one training step, laid out per parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneGrads {
    pub centers: Vec<f64>,
    pub rotations: Vec<f64>,
    pub log_scales: Vec<f64>,
    pub opacity_logits: Vec<f64>,
    pub colors: Vec<f64>,
    pub features: Vec<f64>,
    /// `len × bases`; rows of static Gaussians are zero.
    pub weight_logits: Vec<f64>,
    /// Frame whose bases the basis gradients refer to.
    pub t: usize,
    /// `bases × 7` (quaternion wxyz, translation xyz) at frame `t`.
    pub bases: Vec<f64>,
    pub decoder: Vec<f64>,
    /// Gaussians that were projected on screen.
    pub visible: Vec<bool>,
    /// Norm of dL/d(screen mean) in normalized device coordinates.
    pub screen_grad_norms: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub total: f64,
    pub rec: RecBreakdown,
    pub lang: f64,
}

/// Loss and gradients of `λ_rec·L_rec + λ_lang·L_lang` on frame `t`.
pub fn step_gradients(
    scene: &GaussianScene,
    mlp: &Mlp,
    sup: &SupervisionStack,
    t: usize,
    cfg: &TrainConfig,
) -> Result<(StepLoss, SceneGrads)> {
    let n = scene.len();
    let d = scene.feature_dim;
    let nb = scene.bases();
    let cam = &sup.cameras[t];
    let frame = &sup.frames[t];
    let posed = motion::pose_at(scene, t)?;
    let params = SplatParams::from_posed(scene, &posed);
    let use_lang = cfg.lambda_lang > 0.0 && frame.index.is_some();
    let channels = if use_lang { Channels::Both } else { Channels::Color };
    let out = raster::render_params(&params, cam, &cfg.render, channels, None)?;

    let rec = rec_loss(&out, frame, &sup.tracks, t, &posed.centers, cam, &cfg.rec)?;
    let mut image = rec.image;
    let scale = |v: &mut Option<Vec<f64>>| {
        if let Some(v) = v {
            v.iter_mut().for_each(|x| *x *= cfg.lambda_rec);
        }
    };
    scale(&mut image.color);
    scale(&mut image.dynamic_alpha);
    scale(&mut image.depth);

    let mut loss = StepLoss {
        rec: rec.breakdown,
        ..Default::default()
    };
    let mut decoder_grad = vec![0.0; mlp.params.len()];
    if use_lang {
        let targets = frame.index.as_ref().expect("checked above");
        let valid: Vec<bool> = (0..out.pixel_count())
            .map(|p| out.alpha[p] >= crate::localization::VALID_ALPHA && targets[p] != INVALID_INDEX)
            .collect();
        let lg = semantics::lang_loss_grad(&out.feature, mlp, targets, &valid)?;
        loss.lang = lg.loss;
        image.feature = Some(lg.inputs.into_iter().map(|g| g * cfg.lambda_lang).collect());
        decoder_grad = lg.params.into_iter().map(|g| g * cfg.lambda_lang).collect();
    }
    loss.total = cfg.lambda_rec * loss.rec.total + cfg.lambda_lang * loss.lang;

    let sg = raster::render_backward(&params, cam, &cfg.render, &out, &image)?;
    let mut grad_centers = sg.centers.clone();
    for (i, g) in &rec.anchors {
        for k in 0..3 {
            grad_centers[*i][k] += cfg.lambda_rec * g[k];
        }
    }
    let mg = motion::motion_gradients(scene, t, &grad_centers, &sg.rotations)?;

    let mut visible = vec![false; n];
    for s in &out.splats {
        visible[s.index] = true;
    }
    let mut weight_logits = vec![0.0; n * nb];
    for (i, row) in mg.weight_logits.iter().enumerate() {
        weight_logits[i * nb..i * nb + row.len()].copy_from_slice(row);
    }
    let mut bases = Vec::with_capacity(nb * 7);
    for b in 0..nb {
        bases.extend(mg.basis_rotations[b]);
        bases.extend(mg.basis_translations[b]);
    }
    let (hw, hh) = (0.5 * cam.width as f64, 0.5 * cam.height as f64);
    let screen_grad_norms = sg.means_2d.iter().map(|g| (g[0] * hw).hypot(g[1] * hh)).collect();
    let features = if use_lang { sg.features } else { vec![0.0; n * d] };
    Ok((
        loss,
        SceneGrads {
            centers: mg.centers.iter().flatten().copied().collect(),
            rotations: mg.rotations.iter().flatten().copied().collect(),
            log_scales: sg.log_scales.iter().flatten().copied().collect(),
            opacity_logits: sg.opacity_logits,
            colors: sg.colors.iter().flatten().copied().collect(),
            features,
            weight_logits,
            t,
            bases,
            decoder: decoder_grad,
            visible,
            screen_grad_norms,
        },
    ))
}

/// Adam state for every parameter group of a scene + decoder.
#[derive(Clone, Debug)]
pub(crate) struct Optimizer {
    pub centers: Adam,
    pub rotations: Adam,
    pub log_scales: Adam,
    pub opacity: Adam,
    pub colors: Adam,
    pub features: Adam,
    pub weight_logits: Adam,
    pub bases: Adam,
    pub decoder: Adam,
}

impl Optimizer {
    pub fn new(scene: &GaussianScene, decoder_len: usize, lr: &LearningRates) -> Self {
        let n = scene.len();
        Optimizer {
            centers: Adam::new(n * 3, lr.geometry),
            rotations: Adam::new(n * 4, lr.geometry),
            log_scales: Adam::new(n * 3, lr.geometry),
            opacity: Adam::new(n, lr.opacity),
            colors: Adam::new(n * 3, lr.appearance),
            features: Adam::new(n * scene.feature_dim, lr.appearance),
            weight_logits: Adam::new(n * scene.bases(), lr.motion),
            bases: Adam::new(scene.frames() * scene.bases() * 7, lr.motion),
            decoder: Adam::new(decoder_len, lr.decoder),
        }
    }

    pub fn remap(&mut self, rows: &[Option<usize>], feature_dim: usize, bases: usize) {
        self.centers.remap_rows(3, rows);
        self.rotations.remap_rows(4, rows);
        self.log_scales.remap_rows(3, rows);
        self.opacity.remap_rows(1, rows);
        self.colors.remap_rows(3, rows);
        self.features.remap_rows(feature_dim, rows);
        self.weight_logits.remap_rows(bases, rows);
    }
}

fn gather<const K: usize>(scene: &GaussianScene, f: impl Fn(&crate::scene::Gaussian) -> [f32; K]) -> Vec<f64> {
    scene.gaussians.iter().flat_map(|g| f(g).map(|v| v as f64)).collect()
}

/// Which Gaussians a step may modify, and whether motion/decoder move.
pub(crate) struct StepMask<'a> {
    pub gaussians: Option<&'a [bool]>,
    pub geometry: bool,
    pub opacity: bool,
    pub appearance: bool,
    pub features: bool,
    pub motion: bool,
    pub decoder: bool,
}

fn row_mask(rows: Option<&[bool]>, width: usize) -> Option<Vec<bool>> {
    rows.map(|r| r.iter().flat_map(|&b| std::iter::repeat_n(b, width)).collect())
}

/// Applies one Adam step of `g` to `scene`/`mlp`, renormalizing quaternions.
pub(crate) fn apply_step(
    scene: &mut GaussianScene,
    mlp: &mut Mlp,
    opt: &mut Optimizer,
    g: &SceneGrads,
    mask: &StepMask,
) {
    let n = scene.len();
    let d = scene.feature_dim;
    let nb = scene.bases();
    let m3 = row_mask(mask.gaussians, 3);
    let m4 = row_mask(mask.gaussians, 4);
    let m1 = row_mask(mask.gaussians, 1);

    if mask.geometry {
        let mut c = gather(scene, |g| g.center);
        opt.centers.step(&mut c, &g.centers, m3.as_deref());
        let mut q = gather(scene, |g| g.rotation);
        opt.rotations.step(&mut q, &g.rotations, m4.as_deref());
        let mut s = gather(scene, |g| g.log_scale);
        opt.log_scales.step(&mut s, &g.log_scales, m3.as_deref());
        for (i, gs) in scene.gaussians.iter_mut().enumerate() {
            if mask.gaussians.is_some_and(|m| !m[i]) {
                continue;
            }
            gs.center = [0, 1, 2].map(|k| c[i * 3 + k] as f32);
            let qn = crate::math::normalize4(&[0, 1, 2, 3].map(|k| q[i * 4 + k]));
            gs.rotation = qn.map(|v| v as f32);
            gs.log_scale = [0, 1, 2].map(|k| s[i * 3 + k] as f32);
        }
    }
    if mask.opacity {
        let mut o = gather(scene, |g| [g.opacity_logit]);
        opt.opacity.step(&mut o, &g.opacity_logits, m1.as_deref());
        for (i, gs) in scene.gaussians.iter_mut().enumerate() {
            if mask.gaussians.is_none_or(|m| m[i]) {
                gs.opacity_logit = o[i] as f32;
            }
        }
    }
    if mask.appearance {
        let mut c = gather(scene, |g| g.color);
        opt.colors.step(&mut c, &g.colors, m3.as_deref());
        for (i, gs) in scene.gaussians.iter_mut().enumerate() {
            if mask.gaussians.is_none_or(|m| m[i]) {
                gs.color = [0, 1, 2].map(|k| c[i * 3 + k] as f32);
            }
        }
    }
    if mask.features && d > 0 {
        let mut f: Vec<f64> = scene.gaussians.iter().flat_map(|g| g.feature.iter().map(|&v| v as f64)).collect();
        let mf = row_mask(mask.gaussians, d);
        opt.features.step(&mut f, &g.features, mf.as_deref());
        for (i, gs) in scene.gaussians.iter_mut().enumerate() {
            if mask.gaussians.is_none_or(|m| m[i]) {
                for k in 0..d {
                    gs.feature[k] = f[i * d + k] as f32;
                }
            }
        }
    }
    if mask.motion && nb > 0 {
        let mut w = vec![0.0; n * nb];
        let wm: Vec<bool> = (0..n * nb)
            .map(|k| scene.gaussians[k / nb].dynamic && mask.gaussians.is_none_or(|m| m[k / nb]))
            .collect();
        for (i, gs) in scene.gaussians.iter().enumerate() {
            for (k, &l) in gs.weight_logits.iter().enumerate() {
                w[i * nb + k] = l as f64;
            }
        }
        opt.weight_logits.step(&mut w, &g.weight_logits, Some(&wm));
        for (i, gs) in scene.gaussians.iter_mut().enumerate() {
            if gs.dynamic {
                for k in 0..nb {
                    gs.weight_logits[k] = w[i * nb + k] as f32;
                }
            }
        }
        if g.t != scene.motion.canonical_frame() {
            let total = scene.frames() * nb * 7;
            let mut b = vec![0.0; total];
            let mut bg = vec![0.0; total];
            let mut bm = vec![false; total];
            for (k, tr) in scene.motion.transforms.iter().enumerate() {
                for j in 0..4 {
                    b[k * 7 + j] = tr.rotation[j] as f64;
                }
                for j in 0..3 {
                    b[k * 7 + 4 + j] = tr.translation[j] as f64;
                }
            }
            let off = g.t * nb * 7;
            bg[off..off + nb * 7].copy_from_slice(&g.bases);
            bm[off..off + nb * 7].fill(true);
            opt.bases.step(&mut b, &bg, Some(&bm));
            for bi in 0..nb {
                let k = g.t * nb + bi;
                let q = crate::math::normalize4(&[0, 1, 2, 3].map(|j| b[k * 7 + j]));
                let tr = &mut scene.motion.transforms[k];
                tr.rotation = q.map(|v| v as f32);
                tr.translation = [0, 1, 2].map(|j| b[k * 7 + 4 + j] as f32);
            }
        }
    }
    if mask.decoder {
        opt.decoder.step(&mut mlp.params, &g.decoder, None);
    }
}

/// Points track anchors at the rows that continue them; tracks whose anchor
/// was pruned are dropped.
fn remap_tracks(tracks: &mut Vec<Track>, rows: &[Option<usize>]) {
    let mut new_of_old = std::collections::HashMap::new();
    for (new, old) in rows.iter().enumerate() {
        if let Some(o) = old {
            new_of_old.insert(*o, new);
        }
    }
    tracks.retain_mut(|tr| match new_of_old.get(&tr.gaussian) {
        Some(&n) => {
            tr.gaussian = n;
            true
        }
        None => {
            log::warn!("track anchor {} was pruned; dropping its track", tr.gaussian);
            false
        }
    });
}

/// First non-finite tensor of a gradient set, if any.
fn first_non_finite(loss: &StepLoss, g: &SceneGrads) -> Option<&'static str> {
    if !loss.total.is_finite() {
        return Some("loss");
    }
    let groups: [(&'static str, &[f64]); 9] = [
        ("center gradient", &g.centers),
        ("rotation gradient", &g.rotations),
        ("log-scale gradient", &g.log_scales),
        ("opacity gradient", &g.opacity_logits),
        ("color gradient", &g.colors),
        ("feature gradient", &g.features),
        ("weight-logit gradient", &g.weight_logits),
        ("basis gradient", &g.bases),
        ("decoder gradient", &g.decoder),
    ];
    groups.into_iter().find(|(_, v)| v.iter().any(|x| !x.is_finite())).map(|(n, _)| n)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Frame-averaged losses.
    pub loss: StepLoss,
    pub gaussians: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub scene: GaussianScene,
    pub decoder: Decoder,
    pub epochs: Vec<EpochLog>,
    pub densify: Vec<DensifyStats>,
    /// Row of the input scene each output Gaussian descends from.
    pub lineage: Vec<usize>,
}

/// Optimizes `scene` and `decoder` against `sup`.
pub fn train(
    scene: &GaussianScene,
    decoder: &Decoder,
    codebook: &Codebook,
    sup: &SupervisionStack,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(scene, decoder, codebook, sup, cfg, |_| {})
}

/// [`train`] with a callback invoked after every epoch.
pub fn train_with(
    scene: &GaussianScene,
    decoder: &Decoder,
    codebook: &Codebook,
    sup: &SupervisionStack,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.check()?;
    sup.check(scene)?;
    decoder.check()?;
    if decoder.input != scene.feature_dim || decoder.output != codebook.entries {
        return Err(Error::Shape(format!(
            "decoder {}→{} for feature dim {} and {} codebook entries",
            decoder.input, decoder.output, scene.feature_dim, codebook.entries
        )));
    }
    for f in &sup.frames {
        if let Some(idx) = &f.index {
            if let Some(&bad) = idx.iter().find(|&&i| i != INVALID_INDEX && (i < 0 || i as usize >= codebook.entries)) {
                return Err(Error::Invalid(format!("index map value {bad} outside the codebook")));
            }
        }
    }
    let mut scene = scene.clone();
    let mut sup = sup.clone();
    let sup = &mut sup;
    let mut mlp = Mlp::from(decoder);
    let mut opt = Optimizer::new(&scene, mlp.params.len(), &cfg.lr);
    let mut densify_state = densify::Accumulator::new(scene.len());
    let mut densify_log = Vec::new();
    let mut lineage: Vec<usize> = (0..scene.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let frames = sup.frames.len();
    let total_steps = cfg.epochs * frames;
    let mut step = 0usize;
    let mask = StepMask {
        gaussians: None,
        geometry: true,
        opacity: true,
        appearance: true,
        features: cfg.lambda_lang > 0.0,
        motion: true,
        decoder: cfg.lambda_lang > 0.0,
    };
    for epoch in 0..cfg.epochs {
        let mut acc = StepLoss::default();
        for t in 0..frames {
            let (loss, g) = step_gradients(&scene, &mlp, sup, t, cfg)?;
            if let Some(name) = first_non_finite(&loss, &g) {
                return Err(Error::NonFinite {
                    tensor: name.to_string(),
                    step,
                });
            }
            densify_state.record(&g);
            apply_step(&mut scene, &mut mlp, &mut opt, &g, &mask);
            acc.total += loss.total / frames as f64;
            acc.lang += loss.lang / frames as f64;
            acc.rec.total += loss.rec.total / frames as f64;
            acc.rec.rgb += loss.rec.rgb / frames as f64;
            acc.rec.mask += loss.rec.mask / frames as f64;
            acc.rec.depth += loss.rec.depth / frames as f64;
            acc.rec.track += loss.rec.track / frames as f64;
            step += 1;
            if cfg.densify.due(step, total_steps) {
                let (stats, rows, parents) =
                    densify::densify_and_prune_with(&mut scene, &mut opt, &densify_state, &cfg.densify, cfg.seed ^ step as u64);
                lineage = parents.iter().map(|&p| lineage[p]).collect();
                remap_tracks(&mut sup.tracks, &rows);
                densify_state.reset(scene.len());
                densify_log.push(stats);
            }
        }
        let log = EpochLog {
            epoch,
            loss: acc,
            gaussians: scene.len(),
        };
        on_epoch(&log);
        epochs.push(log);
    }
    Ok(TrainOutcome {
        scene,
        decoder: Decoder::from(&mlp),
        epochs,
        densify: densify_log,
        lineage,
    })
}
