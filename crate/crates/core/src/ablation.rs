//! Planted-error localization fixture and the refinement ablation.
//!
//! The fixture starts from a synthetic world whose Gaussians carry clean
//! per-label features, learns a codebook and decoder on it, then corrupts a
//! fraction of the features: some target-cluster Gaussians get the backdrop
//! feature (false negatives) and as many Gaussians of the other clusters get
//! the target feature (false positives).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{self, MetricReport};
use crate::localization::{self, QueryEmbedding, RefineConfig, Semantics, Views};
use crate::optim::Adam;
use crate::quantizer::{self, Codebook, IndexStack, QuantizerConfig, INVALID_INDEX};
use crate::raster::{self, Channels, RenderConfig};
use crate::scene::{Camera, GaussianScene};
use crate::semantics::{self, Decoder, Mlp};
use crate::synthetic::{self, SyntheticSpec, SyntheticWorld};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantedSpec {
    pub world: SyntheticSpec,
    /// Cluster the query targets.
    pub target: usize,
    /// Share of the target cluster planted as false negatives; the same
    /// count of false positives is drawn from the visible Gaussians of the
    /// other clusters.
    pub fraction: f64,
    pub hidden: usize,
    pub decoder_epochs: usize,
    pub decoder_lr: f64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        PlantedSpec {
            world: SyntheticSpec::default(),
            target: 0,
            fraction: 0.1,
            hidden: 32,
            decoder_epochs: 150,
            decoder_lr: 1e-2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PlantedFixture {
    pub world: SyntheticWorld,
    /// World scene with the planted features.
    pub scene: GaussianScene,
    pub decoder: Decoder,
    pub codebook: Codebook,
    pub index_maps: IndexStack,
    pub query: QueryEmbedding,
    pub target: usize,
    /// Ground-truth members of the target cluster.
    pub members: Vec<usize>,
    pub planted_fn: Vec<usize>,
    pub planted_fp: Vec<usize>,
    /// Per frame, pixels labelled with the target cluster.
    pub query_masks: Vec<Vec<bool>>,
}

impl PlantedFixture {
    pub fn cameras(&self) -> &[Camera] {
        &self.world.cameras
    }

    pub fn views(&self) -> Views<'_> {
        Views {
            cameras: &self.world.cameras,
            index_maps: &self.index_maps,
        }
    }
}

/// Peak blending weight a false positive must reach in some view. Planted
/// features hidden inside a cluster leave the renders unchanged, so no
/// image-space signal can find them.
pub const VISIBLE_WEIGHT: f64 = 0.3;

/// Largest blending weight of every Gaussian over all views.
pub fn peak_weights(scene: &GaussianScene, cameras: &[Camera]) -> Result<Vec<f64>> {
    let cfg = RenderConfig::default();
    let mut peak = vec![0.0f64; scene.len()];
    for (t, cam) in cameras.iter().enumerate() {
        let out = raster::render(scene, t, cam, Channels::Color, &cfg)?;
        for c in &out.contributors {
            let w = &mut peak[c.gaussian as usize];
            *w = w.max(c.weight);
        }
    }
    Ok(peak)
}

/// Fits a decoder to the feature renders of `scene`, supervising pixels
/// with alpha ≥ 0.5 and a valid index.
pub fn fit_decoder(
    scene: &GaussianScene,
    cameras: &[Camera],
    index_maps: &IndexStack,
    entries: usize,
    hidden: usize,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<Decoder> {
    let cfg = RenderConfig::default();
    let frames: Vec<(Vec<f64>, Vec<bool>)> = cameras
        .iter()
        .enumerate()
        .map(|(t, cam)| {
            let out = raster::render(scene, t, cam, Channels::Feature, &cfg)?;
            let targets = index_maps.frame(t);
            let valid = (0..out.pixel_count())
                .map(|p| out.alpha[p] >= 0.5 && targets[p] != INVALID_INDEX)
                .collect();
            Ok((out.feature, valid))
        })
        .collect::<Result<_>>()?;
    let mut mlp = Mlp::from(&Decoder::random(scene.feature_dim, hidden, entries, seed));
    let mut adam = Adam::new(mlp.params.len(), lr);
    for _ in 0..epochs {
        for (t, (features, valid)) in frames.iter().enumerate() {
            let g = semantics::lang_loss_grad(features, &mlp, index_maps.frame(t), valid)?;
            if g.valid > 0 {
                adam.step(&mut mlp.params, &g.params, None);
            }
        }
    }
    Ok(Decoder::from(&mlp))
}

pub fn planted_fixture(spec: &PlantedSpec) -> Result<PlantedFixture> {
    let ws = &spec.world;
    if spec.target >= ws.clusters || ws.clusters < 2 {
        return Err(Error::Invalid("planted fixture needs a target among at least two clusters".into()));
    }
    if ws.static_grid == 0 {
        return Err(Error::Invalid("planted fixture needs the static backdrop".into()));
    }
    if !(0.0..=1.0).contains(&spec.fraction) {
        return Err(Error::Invalid("planted fraction must lie in [0, 1]".into()));
    }
    let world = synthetic::world(ws)?;
    let labels = synthetic::label_maps(&world, &world.scene, &world.labels, &world.cameras)?;
    let features = synthetic::embed_labels(&labels, &world.prototypes, ws.noise_deg, (ws.size, ws.size), ws.seed ^ 0x5eed)?;
    let query_masks = labels
        .iter()
        .map(|frame| frame.iter().map(|&l| l == Some(spec.target)).collect())
        .collect();
    let qcfg = QuantizerConfig {
        entries: ws.labels(),
        seed: ws.seed,
        ..Default::default()
    };
    let (codebook, index_maps, _) = quantizer::learn_codebook(&features, &qcfg)?;
    let decoder = fit_decoder(
        &world.scene,
        &world.cameras,
        &index_maps,
        codebook.entries,
        spec.hidden,
        spec.decoder_epochs,
        spec.decoder_lr,
        ws.seed ^ 0xdec,
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(ws.seed ^ 0x91a7);
    let members = world.members(spec.target);
    let count = (spec.fraction * members.len() as f64).round() as usize;
    let mut planted_fn = members.clone();
    planted_fn.shuffle(&mut rng);
    planted_fn.truncate(count);
    planted_fn.sort_unstable();
    let peak = peak_weights(&world.scene, &world.cameras)?;
    let mut others: Vec<usize> = (0..world.labels.len())
        .filter(|&i| world.labels[i] != spec.target && world.labels[i] != ws.backdrop_label())
        .filter(|&i| peak[i] >= VISIBLE_WEIGHT)
        .collect();
    others.shuffle(&mut rng);
    others.truncate(count);
    others.sort_unstable();

    let mut scene = world.scene.clone();
    let backdrop_feature = scene.gaussians[world.members(ws.backdrop_label())[0]].feature.clone();
    let target_feature = scene.gaussians[members[0]].feature.clone();
    for &i in &planted_fn {
        scene.gaussians[i].feature.clone_from(&backdrop_feature);
    }
    for &i in &others {
        scene.gaussians[i].feature.clone_from(&target_feature);
    }
    Ok(PlantedFixture {
        query: world.query(spec.target),
        target: spec.target,
        world,
        scene,
        decoder,
        codebook,
        index_maps,
        members,
        planted_fn,
        planted_fp: others,
        query_masks,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoRecall,
    NoPrecision,
    NoRefinement,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoRecall, Variant::NoPrecision, Variant::NoRefinement];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoRecall => "no-recall",
            Variant::NoPrecision => "no-precision",
            Variant::NoRefinement => "no-refinement",
        }
    }
}

/// Selection produced by `variant` on a copy of the fixture scene.
pub fn localize_variant(fix: &PlantedFixture, variant: Variant, cfg: &RefineConfig) -> Result<Vec<usize>> {
    let mlp = Mlp::from(&fix.decoder);
    let sem = Semantics {
        decoder: &mlp,
        codebook: &fix.codebook,
    };
    let mut scene = fix.scene.clone();
    let mut cfg = cfg.clone();
    match variant {
        Variant::Full => {}
        Variant::NoRecall => cfg.recall_epochs = 0,
        Variant::NoPrecision => cfg.precision_epochs = 0,
        Variant::NoRefinement => return Ok(localization::localize(&scene, sem, &fix.query, cfg.tau)?.selected),
    }
    Ok(localization::localize_refined(&mut scene, sem, &fix.query, fix.views(), &cfg)?.selected)
}

/// PSNR between the render of `selected` alone and the full render of the
/// unplanted scene, over the query mask. Returns the pooled value and one
/// value per frame with a non-empty mask.
pub fn query_psnr(fix: &PlantedFixture, selected: &[usize], render: &RenderConfig) -> Result<(f64, Vec<f64>)> {
    let world = &fix.world;
    let (mut all_a, mut all_b, mut all_m) = (Vec::new(), Vec::new(), Vec::new());
    let mut per_frame = Vec::new();
    for (t, cam) in world.cameras.iter().enumerate() {
        let full = raster::render(&world.scene, t, cam, Channels::Color, render)?.color;
        let part = raster::render_subset(&world.scene, t, cam, Channels::Color, render, selected)?.color;
        let mask = &fix.query_masks[t];
        if mask.iter().any(|&m| m) {
            per_frame.push(eval::psnr(&part, &full, 3, Some(mask))?.capped());
        }
        all_a.extend(part);
        all_b.extend(full);
        all_m.extend_from_slice(mask);
    }
    if !all_m.iter().any(|&m| m) {
        return Err(Error::Invalid("query mask is empty in every frame".into()));
    }
    Ok((eval::psnr(&all_a, &all_b, 3, Some(&all_m))?.capped(), per_frame))
}

pub fn run_variant(fix: &PlantedFixture, variant: Variant, cfg: &RefineConfig) -> Result<MetricReport> {
    let selected = localize_variant(fix, variant, cfg)?;
    let iou = eval::iou_sets(&selected, &fix.members);
    let (psnr_db, per_frame_psnr) = query_psnr(fix, &selected, &cfg.render)?;
    Ok(MetricReport {
        variant: variant.name().into(),
        query: fix.query.label.clone(),
        psnr_db,
        miou: iou.value,
        miou_both_empty: iou.both_empty,
        per_frame_psnr,
    })
}

/// One report per variant, in [`Variant::ALL`] order.
pub fn ablation(fix: &PlantedFixture, cfg: &RefineConfig) -> Result<Vec<MetricReport>> {
    Variant::ALL.iter().map(|&v| run_variant(fix, v, cfg)).collect()
}
