//! Point-level localization of Gaussians for a query embedding, with
//! recall- and precision-oriented refinement of per-Gaussian features.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::motion;
use crate::optim::Adam;
use crate::quantizer::{Codebook, IndexStack, INVALID_INDEX};
use crate::raster::{self, Channels, RenderConfig, RenderGrads, RenderOutput, SplatParams};
use crate::scene::{Camera, GaussianScene};
use crate::semantics::{self, Mlp};

/// Blending weight above which a contribution counts for eligibility.
pub const CONTRIBUTION_EPS: f64 = 1e-3;

/// Pixels with rendered alpha below this are invalid in relevance maps.
pub const VALID_ALPHA: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct QueryEmbedding {
    pub label: String,
    /// Unit-norm embedding.
    pub vector: Vec<f64>,
}

impl QueryEmbedding {
    /// Normalizes `vector`; a zero or non-finite vector is rejected.
    pub fn new(label: impl Into<String>, vector: Vec<f64>) -> Result<Self> {
        let n = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Invalid("query embedding must be non-zero and finite".into()));
        }
        Ok(QueryEmbedding {
            label: label.into(),
            vector: vector.into_iter().map(|v| v / n).collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceMap {
    pub t: usize,
    pub width: usize,
    pub height: usize,
    /// Cosine relevance per pixel; -1 where the pixel is invalid.
    pub values: Vec<f64>,
}

/// Everything that stays frozen during localization.
#[derive(Clone, Copy, Debug)]
pub struct Semantics<'a> {
    pub decoder: &'a Mlp,
    pub codebook: &'a Codebook,
}

fn cosine_to(v: &[f64], q: &[f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return 0.0;
    }
    (v.iter().zip(q).map(|(a, b)| a * b).sum::<f64>() / n).clamp(-1.0, 1.0)
}

/// `cos(M̂ · B, F_q)` for every row of decoded feature rows.
fn relevance_rows(features: &[f64], sem: Semantics, query: &QueryEmbedding) -> Result<Vec<f64>> {
    if query.vector.len() != sem.codebook.dim {
        return Err(Error::Shape(format!(
            "query dim {} vs codebook dim {}",
            query.vector.len(),
            sem.codebook.dim
        )));
    }
    let dist = semantics::decode_gaussians(features, sem.decoder)?;
    (0..dist.rows)
        .into_par_iter()
        .map(|r| {
            let e = semantics::expected_embedding(dist.row(r), sem.codebook)?;
            Ok(cosine_to(&e, &query.vector))
        })
        .collect()
}

/// Relevance of a rendered feature image.
pub fn relevance_from_render(out: &RenderOutput, t: usize, sem: Semantics, query: &QueryEmbedding) -> Result<RelevanceMap> {
    if !out.channels.has_feature() {
        return Err(Error::Invalid("relevance needs a feature render".into()));
    }
    let mut values = relevance_rows(&out.feature, sem, query)?;
    for (v, &a) in values.iter_mut().zip(&out.alpha) {
        if a < VALID_ALPHA {
            *v = -1.0;
        }
    }
    Ok(RelevanceMap {
        t,
        width: out.width,
        height: out.height,
        values,
    })
}

pub fn relevance_map(
    scene: &GaussianScene,
    sem: Semantics,
    query: &QueryEmbedding,
    t: usize,
    cam: &Camera,
    cfg: &RenderConfig,
) -> Result<RelevanceMap> {
    let out = raster::render(scene, t, cam, Channels::Feature, cfg)?;
    relevance_from_render(&out, t, sem, query)
}

/// `R(p) > τ`.
pub fn mask_2d(map: &RelevanceMap, tau: f64) -> Vec<bool> {
    map.values.iter().map(|&r| r > tau).collect()
}

/// Per-Gaussian relevance `cos(f̃_i, F_q)`.
pub fn gaussian_scores(scene: &GaussianScene, sem: Semantics, query: &QueryEmbedding) -> Result<Vec<f64>> {
    let f: Vec<f64> = scene
        .gaussians
        .iter()
        .flat_map(|g| g.feature.iter().map(|&v| v as f64))
        .collect();
    if scene.is_empty() {
        return Ok(Vec::new());
    }
    relevance_rows(&f, sem, query)
}

pub fn select(scores: &[f64], tau: f64) -> Vec<usize> {
    (0..scores.len()).filter(|&i| scores[i] > tau).collect()
}

#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StageLog {
    pub stage: String,
    pub epochs: usize,
    /// `|L_3D|` before the first epoch and after every epoch.
    pub set_sizes: Vec<usize>,
    pub losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationResult {
    pub label: String,
    pub tau: f64,
    pub scores: Vec<f64>,
    pub selected: Vec<usize>,
    pub log: Vec<StageLog>,
}

pub fn localize(scene: &GaussianScene, sem: Semantics, query: &QueryEmbedding, tau: f64) -> Result<LocalizationResult> {
    let scores = gaussian_scores(scene, sem, query)?;
    let selected = select(&scores, tau);
    if selected.is_empty() {
        log::warn!("no Gaussian exceeds relevance threshold {tau} for query '{}'", query.label);
    }
    Ok(LocalizationResult {
        label: query.label.clone(),
        tau,
        scores,
        selected,
        log: Vec::new(),
    })
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub tau: f64,
    pub recall_epochs: usize,
    pub precision_epochs: usize,
    /// Number of recall-then-precision rounds.
    pub alternations: usize,
    pub lr: f64,
    /// Adam epsilon. Large enough that the faint tails a Gaussian leaves
    /// outside the mask do not get full-size steps.
    pub adam_eps: f64,
    pub render: RenderConfig,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            tau: 0.95,
            recall_epochs: 50,
            precision_epochs: 10,
            alternations: 1,
            lr: 3e-2,
            adam_eps: 1e-6,
            render: RenderConfig::default(),
        }
    }
}

/// Observations used by refinement: cameras and index maps per frame.
#[derive(Clone, Copy, Debug)]
pub struct Views<'a> {
    pub cameras: &'a [Camera],
    pub index_maps: &'a IndexStack,
}

impl Views<'_> {
    fn check(&self, scene: &GaussianScene) -> Result<()> {
        if self.cameras.len() != self.index_maps.frames || self.cameras.len() > scene.frames() {
            return Err(Error::Shape(format!(
                "{} cameras, {} index frames, {} scene frames",
                self.cameras.len(),
                self.index_maps.frames,
                scene.frames()
            )));
        }
        for c in self.cameras {
            if c.width != self.index_maps.width || c.height != self.index_maps.height {
                return Err(Error::Shape("camera size differs from index maps".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Stage {
    Recall,
    Precision,
}

fn scene_features(scene: &GaussianScene) -> Vec<f64> {
    scene
        .gaussians
        .iter()
        .flat_map(|g| g.feature.iter().map(|&v| v as f64))
        .collect()
}

fn store_features(scene: &mut GaussianScene, f: &[f64], update: &[bool]) {
    let d = scene.feature_dim;
    for (i, g) in scene.gaussians.iter_mut().enumerate() {
        if update[i] {
            for k in 0..d {
                g.feature[k] = f[i * d + k] as f32;
            }
        }
    }
}

fn refine_stage(
    scene: &mut GaussianScene,
    sem: Semantics,
    query: &QueryEmbedding,
    views: Views,
    cfg: &RefineConfig,
    stage: Stage,
    epochs: usize,
) -> Result<StageLog> {
    views.check(scene)?;
    let mut log = StageLog {
        stage: match stage {
            Stage::Recall => "recall".into(),
            Stage::Precision => "precision".into(),
        },
        epochs,
        ..Default::default()
    };
    let tau = cfg.tau;
    let mut selected = select(&gaussian_scores(scene, sem, query)?, tau);
    log.set_sizes.push(selected.len());
    if epochs == 0 {
        return Ok(log);
    }
    let n = scene.len();
    let d = scene.feature_dim;
    let posed: Vec<SplatParams> = (0..views.cameras.len())
        .map(|t| Ok(SplatParams::from_posed(scene, &motion::pose_at(scene, t)?)))
        .collect::<Result<_>>()?;
    let masks: Vec<Vec<bool>> = (0..views.cameras.len())
        .map(|t| {
            let out = raster::render_params(&posed[t], &views.cameras[t], &cfg.render, Channels::Feature, None)?;
            Ok(mask_2d(&relevance_from_render(&out, t, sem, query)?, tau))
        })
        .collect::<Result<_>>()?;
    if masks.iter().all(|m| !m.iter().any(|&v| v)) {
        log::warn!("{} refinement skipped: the 2D mask is empty in every frame", log.stage);
        return Ok(log);
    }

    let mut adam = Adam::new(n * d, cfg.lr);
    adam.eps = cfg.adam_eps;
    for _ in 0..epochs {
        let mut in_set = vec![false; n];
        for &i in &selected {
            in_set[i] = true;
        }
        let mut feats = scene_features(scene);
        let mut touched = vec![false; n];
        let mut epoch_loss = 0.0;
        for (t, cam) in views.cameras.iter().enumerate() {
            let mut params = posed[t].clone();
            params.features.clone_from(&feats);
            let mask = &masks[t];
            let targets = views.index_maps.frame(t);
            let (subset, valid): (Option<Vec<bool>>, Vec<bool>) = match stage {
                Stage::Recall => (
                    Some(in_set.iter().map(|&s| !s).collect()),
                    (0..mask.len()).map(|p| mask[p] && targets[p] != INVALID_INDEX).collect(),
                ),
                Stage::Precision => (
                    None,
                    (0..mask.len()).map(|p| !mask[p] && targets[p] != INVALID_INDEX).collect(),
                ),
            };
            if !valid.iter().any(|&v| v) {
                continue;
            }
            let out = raster::render_params(&params, cam, &cfg.render, Channels::Feature, subset.as_deref())?;
            let lg = semantics::lang_loss_grad(&out.feature, sem.decoder, targets, &valid)?;
            epoch_loss += lg.loss;
            let grads = RenderGrads {
                feature: Some(lg.inputs),
                ..Default::default()
            };
            let g = raster::render_backward(&params, cam, &cfg.render, &out, &grads)?;

            let update: Vec<bool> = match stage {
                Stage::Recall => in_set.iter().map(|&s| !s).collect(),
                Stage::Precision => {
                    let mut e = vec![false; n];
                    for p in 0..mask.len() {
                        if mask[p] {
                            continue;
                        }
                        for c in out.contributors_at(p) {
                            if c.weight > CONTRIBUTION_EPS && in_set[c.gaussian as usize] {
                                e[c.gaussian as usize] = true;
                            }
                        }
                    }
                    e
                }
            };
            let elem_mask: Vec<bool> = (0..n * d).map(|k| update[k / d]).collect();
            adam.step(&mut feats, &g.features, Some(&elem_mask));
            for i in 0..n {
                touched[i] |= update[i];
            }
        }
        store_features(scene, &feats, &touched);
        selected = select(&gaussian_scores(scene, sem, query)?, tau);
        log.set_sizes.push(selected.len());
        log.losses.push(epoch_loss);
    }
    Ok(log)
}

/// Recall-oriented refinement: complement renders supervised inside the mask.
pub fn refine_recall(
    scene: &mut GaussianScene,
    sem: Semantics,
    query: &QueryEmbedding,
    views: Views,
    cfg: &RefineConfig,
) -> Result<StageLog> {
    refine_stage(scene, sem, query, views, cfg, Stage::Recall, cfg.recall_epochs)
}

/// Precision-oriented refinement: full renders supervised outside the mask,
/// updating only selected Gaussians that contribute there.
pub fn refine_precision(
    scene: &mut GaussianScene,
    sem: Semantics,
    query: &QueryEmbedding,
    views: Views,
    cfg: &RefineConfig,
) -> Result<StageLog> {
    refine_stage(scene, sem, query, views, cfg, Stage::Precision, cfg.precision_epochs)
}

/// Recall then precision refinement (repeated `alternations` times), then a
/// final [`localize`].
pub fn localize_refined(
    scene: &mut GaussianScene,
    sem: Semantics,
    query: &QueryEmbedding,
    views: Views,
    cfg: &RefineConfig,
) -> Result<LocalizationResult> {
    let mut logs = Vec::new();
    for _ in 0..cfg.alternations {
        logs.push(refine_recall(scene, sem, query, views, cfg)?);
        logs.push(refine_precision(scene, sem, query, views, cfg)?);
    }
    let mut result = localize(scene, sem, query, cfg.tau)?;
    result.log = logs;
    Ok(result)
}
