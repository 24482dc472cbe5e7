//! Tile-based differentiable splatting of posed Gaussians into color,
//! feature, alpha, depth and dynamic-alpha images.
//!
//! Splats are sorted once by camera depth of their center (ties by Gaussian
//! index) and binned into 16×16 tiles. Each pixel is composited front to back
//! sequentially, so images do not depend on how tiles are scheduled. The
//! backward pass merges per-tile partial sums in tile order.
//!
//! All channels share one set of blending weights: per pixel the composited
//! value of channel `v` is `Σ_i v_i α_i Π_{j<i} (1 - α_j)`. The alpha map is
//! `1 - Π (1 - α_j)`, depth composites the camera z of each center, and the
//! dynamic-alpha map composites an indicator that is 1 for dynamic Gaussians.

mod project;

pub use project::{project_point, project_point_backward, Cull, Splat};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::math::Quat;
use crate::motion::{self, PosedGaussians};
use crate::scene::{Camera, GaussianScene};
use project::{Frame, ScreenGrad};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub tile_size: usize,
    /// Added to the diagonal of every 2D covariance (px²).
    pub blur: f64,
    /// Per-splat alpha below which a pixel is skipped.
    pub alpha_min: f64,
    /// Per-splat alpha clamp.
    pub alpha_max: f64,
    /// Compositing stops once transmittance drops below this.
    pub transmittance_min: f64,
    pub z_near: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            tile_size: 16,
            blur: 0.3,
            alpha_min: 1.0 / 255.0,
            alpha_max: 0.999,
            transmittance_min: 1e-4,
            z_near: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Channels {
    Color,
    Feature,
    Both,
}

impl Channels {
    pub fn has_feature(self) -> bool {
        matches!(self, Channels::Feature | Channels::Both)
    }
}

/// Working-precision per-Gaussian parameters consumed by the rasterizer.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatParams {
    pub centers: Vec<[f64; 3]>,
    pub rotations: Vec<Quat>,
    pub log_scales: Vec<[f64; 3]>,
    pub opacity_logits: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
    /// Row-major `len × feature_dim`.
    pub features: Vec<f64>,
    pub feature_dim: usize,
    pub dynamic: Vec<bool>,
}

impl SplatParams {
    /// Parameters of `scene` with centers/rotations taken from `posed`.
    pub fn from_posed(scene: &GaussianScene, posed: &PosedGaussians) -> Self {
        let mut p = Self::canonical(scene);
        p.centers.clone_from(&posed.centers);
        p.rotations.clone_from(&posed.rotations);
        p
    }

    /// Canonical (un-posed) parameters of `scene`.
    pub fn canonical(scene: &GaussianScene) -> Self {
        let gs = &scene.gaussians;
        SplatParams {
            centers: gs.iter().map(|g| g.center.map(f64::from)).collect(),
            rotations: gs.iter().map(|g| g.rotation.map(f64::from)).collect(),
            log_scales: gs.iter().map(|g| g.log_scale.map(f64::from)).collect(),
            opacity_logits: gs.iter().map(|g| g.opacity_logit as f64).collect(),
            colors: gs.iter().map(|g| g.color.map(f64::from)).collect(),
            features: gs
                .iter()
                .flat_map(|g| g.feature.iter().map(|&v| v as f64))
                .collect(),
            feature_dim: scene.feature_dim,
            dynamic: gs.iter().map(|g| g.dynamic).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    /// All continuous parameters in the order centers, rotations,
    /// log-scales, opacity logits, colors, features.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len() * (14 + self.feature_dim));
        v.extend(self.centers.iter().flatten());
        v.extend(self.rotations.iter().flatten());
        v.extend(self.log_scales.iter().flatten());
        v.extend(&self.opacity_logits);
        v.extend(self.colors.iter().flatten());
        v.extend(&self.features);
        v
    }

    /// Inverse of [`SplatParams::flatten`], keeping `dynamic` and sizes.
    pub fn unflatten(&self, v: &[f64]) -> SplatParams {
        let n = self.len();
        let mut it = v.iter().copied();
        let take3 = |it: &mut dyn Iterator<Item = f64>| -> Vec<[f64; 3]> {
            (0..n).map(|_| [0; 3].map(|_| it.next().unwrap())).collect()
        };
        let centers = take3(&mut it);
        let rotations = (0..n).map(|_| [0; 4].map(|_| it.next().unwrap())).collect();
        let log_scales = take3(&mut it);
        let opacity_logits = (0..n).map(|_| it.next().unwrap()).collect();
        let colors = take3(&mut it);
        let features = it.collect();
        SplatParams {
            centers,
            rotations,
            log_scales,
            opacity_logits,
            colors,
            features,
            feature_dim: self.feature_dim,
            dynamic: self.dynamic.clone(),
        }
    }

    fn check(&self) -> Result<()> {
        let n = self.len();
        let ok = self.rotations.len() == n
            && self.log_scales.len() == n
            && self.opacity_logits.len() == n
            && self.colors.len() == n
            && self.dynamic.len() == n
            && self.features.len() == n * self.feature_dim;
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("inconsistent splat parameter lengths".into()))
        }
    }
}

/// One entry of a pixel's contributor list, in compositing order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contributor {
    pub gaussian: u32,
    /// Blending weight `α_i · T_i`.
    pub weight: f64,
    /// Clamped per-splat alpha `α_i`.
    pub alpha: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RenderStats {
    pub visible: usize,
    pub culled_behind: usize,
    pub culled_offscreen: usize,
    pub culled_transparent: usize,
    pub degenerate: usize,
    pub excluded: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    pub feature_dim: usize,
    pub channels: Channels,
    /// `H × W × 3`.
    pub color: Vec<f64>,
    /// `H × W × feature_dim`; empty unless features were requested.
    pub feature: Vec<f64>,
    pub alpha: Vec<f64>,
    pub depth: Vec<f64>,
    pub dynamic_alpha: Vec<f64>,
    /// Pixel `p` owns `contributors[offsets[p]..offsets[p + 1]]`.
    pub contributor_offsets: Vec<usize>,
    pub contributors: Vec<Contributor>,
    pub stats: RenderStats,
    /// Visible splats in compositing (depth) order.
    pub splats: Vec<Splat>,
}

impl RenderOutput {
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn contributors_at(&self, pixel: usize) -> &[Contributor] {
        &self.contributors[self.contributor_offsets[pixel]..self.contributor_offsets[pixel + 1]]
    }

    pub fn feature_at(&self, pixel: usize) -> &[f64] {
        &self.feature[pixel * self.feature_dim..(pixel + 1) * self.feature_dim]
    }
}

// Per-splat payload layout: [alpha(=1), dynamic indicator, depth, rgb, features...]
const SLOT_ALPHA: usize = 0;
const SLOT_DYN: usize = 1;
const SLOT_DEPTH: usize = 2;
const SLOT_COLOR: usize = 3;
const SLOT_FEATURE: usize = 6;

fn payload_width(params: &SplatParams, channels: Channels) -> usize {
    SLOT_FEATURE + if channels.has_feature() { params.feature_dim } else { 0 }
}

struct Binned {
    splats: Vec<Splat>,
    payload: Vec<f64>,
    width: usize,
    tiles_x: usize,
    tiles_y: usize,
    tile_lists: Vec<Vec<u32>>,
    stats: RenderStats,
}

fn bin(
    params: &SplatParams,
    cam: &Camera,
    cfg: &RenderConfig,
    channels: Channels,
    subset: Option<&[bool]>,
) -> Result<Binned> {
    params.check()?;
    if let Some(mask) = subset {
        if mask.len() != params.len() {
            return Err(Error::Shape("subset mask length".into()));
        }
    }
    cam.check().map_err(Error::Invalid)?;
    if cfg.tile_size == 0 {
        return Err(Error::Invalid("tile size must be positive".into()));
    }
    let frame = Frame::new(cam);
    let projected: Vec<Option<std::result::Result<Splat, Cull>>> = (0..params.len())
        .into_par_iter()
        .map(|i| {
            if subset.is_some_and(|m| !m[i]) {
                return None;
            }
            Some(project::project_one(
                &frame,
                cfg,
                i,
                &params.centers[i],
                &params.rotations[i],
                &params.log_scales[i],
                params.opacity_logits[i],
            ))
        })
        .collect();

    let mut stats = RenderStats::default();
    let mut splats = Vec::new();
    for p in projected {
        match p {
            None => stats.excluded += 1,
            Some(Ok(s)) => splats.push(s),
            Some(Err(Cull::Behind)) => stats.culled_behind += 1,
            Some(Err(Cull::Offscreen)) => stats.culled_offscreen += 1,
            Some(Err(Cull::Transparent)) => stats.culled_transparent += 1,
            Some(Err(Cull::Degenerate)) => stats.degenerate += 1,
        }
    }
    stats.visible = splats.len();
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));

    let k = payload_width(params, channels);
    let mut payload = vec![0.0; splats.len() * k];
    for (s, row) in splats.iter().zip(payload.chunks_mut(k)) {
        let i = s.index;
        row[SLOT_ALPHA] = 1.0;
        row[SLOT_DYN] = if params.dynamic[i] { 1.0 } else { 0.0 };
        row[SLOT_DEPTH] = s.depth;
        row[SLOT_COLOR..SLOT_COLOR + 3].copy_from_slice(&params.colors[i]);
        if channels.has_feature() {
            row[SLOT_FEATURE..].copy_from_slice(params.feature(i));
        }
    }

    let ts = cfg.tile_size;
    let tiles_x = cam.width.div_ceil(ts);
    let tiles_y = cam.height.div_ceil(ts);
    let mut tile_lists = vec![Vec::new(); tiles_x * tiles_y];
    for (pos, s) in splats.iter().enumerate() {
        let [x0, y0, x1, y1] = s.rect;
        for ty in y0 / ts..=y1 / ts {
            for tx in x0 / ts..=x1 / ts {
                tile_lists[ty * tiles_x + tx].push(pos as u32);
            }
        }
    }
    Ok(Binned {
        splats,
        payload,
        width: cam.width,
        tiles_x,
        tiles_y,
        tile_lists,
        stats,
    })
}

fn tile_pixels(b: &Binned, cfg: &RenderConfig, tile: usize, height: usize) -> impl Iterator<Item = (usize, usize)> {
    let ts = cfg.tile_size;
    let (tx, ty) = (tile % b.tiles_x, tile / b.tiles_x);
    let x_end = ((tx + 1) * ts).min(b.width);
    let y_end = ((ty + 1) * ts).min(height);
    (ty * ts..y_end).flat_map(move |y| (tx * ts..x_end).map(move |x| (x, y)))
}

#[inline]
fn splat_alpha(s: &Splat, px: f64, py: f64, cfg: &RenderConfig) -> Option<(f64, f64, f64, bool)> {
    let dx = px - s.mean[0];
    let dy = py - s.mean[1];
    let [a, b, c] = s.conic;
    let power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy;
    if power > 0.0 {
        return None;
    }
    let raw = s.opacity * power.exp();
    let clamped = raw > cfg.alpha_max;
    let alpha = if clamped { cfg.alpha_max } else { raw };
    if alpha < cfg.alpha_min {
        return None;
    }
    Some((alpha, dx, dy, clamped))
}

#[inline]
fn in_rect(s: &Splat, x: usize, y: usize) -> bool {
    let [x0, y0, x1, y1] = s.rect;
    x >= x0 && x <= x1 && y >= y0 && y <= y1
}

struct TilePixel {
    pixel: usize,
    values: Vec<f64>,
    transmittance: f64,
    contributors: Vec<Contributor>,
}

/// Renders `params` through `cam`. Gaussians with `subset[i] == false` are
/// excluded from compositing.
pub fn render_params(
    params: &SplatParams,
    cam: &Camera,
    cfg: &RenderConfig,
    channels: Channels,
    subset: Option<&[bool]>,
) -> Result<RenderOutput> {
    let b = bin(params, cam, cfg, channels, subset)?;
    let k = payload_width(params, channels);
    let height = cam.height;

    let tiles: Vec<Vec<TilePixel>> = (0..b.tiles_x * b.tiles_y)
        .into_par_iter()
        .map(|tile| {
            let list = &b.tile_lists[tile];
            tile_pixels(&b, cfg, tile, height)
                .map(|(x, y)| {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let mut values = vec![0.0; k];
                    let mut t = 1.0;
                    let mut contributors = Vec::new();
                    for &pos in list {
                        let s = &b.splats[pos as usize];
                        if !in_rect(s, x, y) {
                            continue;
                        }
                        let Some((alpha, _, _, _)) = splat_alpha(s, px, py, cfg) else {
                            continue;
                        };
                        let w = alpha * t;
                        let row = &b.payload[pos as usize * k..(pos as usize + 1) * k];
                        for (v, r) in values.iter_mut().zip(row) {
                            *v += w * r;
                        }
                        contributors.push(Contributor {
                            gaussian: s.index as u32,
                            weight: w,
                            alpha,
                        });
                        t *= 1.0 - alpha;
                        if t < cfg.transmittance_min {
                            break;
                        }
                    }
                    TilePixel {
                        pixel: y * b.width + x,
                        values,
                        transmittance: t,
                        contributors,
                    }
                })
                .collect()
        })
        .collect();

    let npix = cam.pixel_count();
    let fdim = if channels.has_feature() { params.feature_dim } else { 0 };
    let mut out = RenderOutput {
        width: cam.width,
        height: cam.height,
        feature_dim: params.feature_dim,
        channels,
        color: vec![0.0; npix * 3],
        feature: vec![0.0; npix * fdim],
        alpha: vec![0.0; npix],
        depth: vec![0.0; npix],
        dynamic_alpha: vec![0.0; npix],
        contributor_offsets: vec![0; npix + 1],
        contributors: Vec::new(),
        stats: b.stats,
        splats: Vec::new(),
    };
    let mut lists: Vec<Vec<Contributor>> = vec![Vec::new(); npix];
    for tp in tiles.into_iter().flatten() {
        let p = tp.pixel;
        out.alpha[p] = 1.0 - tp.transmittance;
        out.dynamic_alpha[p] = tp.values[SLOT_DYN];
        out.depth[p] = tp.values[SLOT_DEPTH];
        out.color[p * 3..p * 3 + 3].copy_from_slice(&tp.values[SLOT_COLOR..SLOT_COLOR + 3]);
        if fdim > 0 {
            out.feature[p * fdim..(p + 1) * fdim].copy_from_slice(&tp.values[SLOT_FEATURE..]);
        }
        lists[p] = tp.contributors;
    }
    for (p, list) in lists.into_iter().enumerate() {
        out.contributors.extend(list);
        out.contributor_offsets[p + 1] = out.contributors.len();
    }
    out.splats = b.splats;
    Ok(out)
}

/// Renders `scene` at frame `t`.
pub fn render(
    scene: &GaussianScene,
    t: usize,
    cam: &Camera,
    channels: Channels,
    cfg: &RenderConfig,
) -> Result<RenderOutput> {
    let posed = motion::pose_at(scene, t)?;
    render_params(&SplatParams::from_posed(scene, &posed), cam, cfg, channels, None)
}

/// Renders only the Gaussians listed in `subset`.
pub fn render_subset(
    scene: &GaussianScene,
    t: usize,
    cam: &Camera,
    channels: Channels,
    cfg: &RenderConfig,
    subset: &[usize],
) -> Result<RenderOutput> {
    let posed = motion::pose_at(scene, t)?;
    let mut mask = vec![false; scene.len()];
    for &i in subset {
        if i >= mask.len() {
            return Err(Error::Shape(format!("subset index {i} out of range")));
        }
        mask[i] = true;
    }
    render_params(
        &SplatParams::from_posed(scene, &posed),
        cam,
        cfg,
        channels,
        Some(&mask),
    )
}

/// Upstream gradients on the rendered images. Missing channels are zero.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RenderGrads {
    pub color: Option<Vec<f64>>,
    pub feature: Option<Vec<f64>>,
    pub alpha: Option<Vec<f64>>,
    pub depth: Option<Vec<f64>>,
    pub dynamic_alpha: Option<Vec<f64>>,
}

/// Gradients with respect to [`SplatParams`] (centers/rotations are the posed ones).
#[derive(Clone, Debug, PartialEq)]
pub struct SplatGrads {
    pub centers: Vec<[f64; 3]>,
    pub rotations: Vec<Quat>,
    pub log_scales: Vec<[f64; 3]>,
    pub opacity_logits: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
    pub features: Vec<f64>,
    pub feature_dim: usize,
    /// dL/d(screen-space mean) in pixels; zero for culled Gaussians.
    pub means_2d: Vec<[f64; 2]>,
}

impl SplatGrads {
    pub fn zeros(n: usize, feature_dim: usize) -> Self {
        SplatGrads {
            centers: vec![[0.0; 3]; n],
            rotations: vec![[0.0; 4]; n],
            log_scales: vec![[0.0; 3]; n],
            opacity_logits: vec![0.0; n],
            colors: vec![[0.0; 3]; n],
            features: vec![0.0; n * feature_dim],
            feature_dim,
            means_2d: vec![[0.0; 2]; n],
        }
    }
}

impl SplatGrads {
    /// Same layout as [`SplatParams::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::new();
        v.extend(self.centers.iter().flatten());
        v.extend(self.rotations.iter().flatten());
        v.extend(self.log_scales.iter().flatten());
        v.extend(&self.opacity_logits);
        v.extend(self.colors.iter().flatten());
        v.extend(&self.features);
        v
    }
}

fn check_grad(name: &str, g: &Option<Vec<f64>>, len: usize) -> Result<()> {
    match g {
        Some(v) if v.len() != len => Err(Error::Shape(format!(
            "{name} gradient has {} values, expected {len}",
            v.len()
        ))),
        _ => Ok(()),
    }
}

struct TileGrad {
    screen: Vec<ScreenGrad>,
    payload: Vec<f64>,
}

/// Backward pass of [`render_params`] for the forward output `out`.
pub fn render_backward(
    params: &SplatParams,
    cam: &Camera,
    cfg: &RenderConfig,
    out: &RenderOutput,
    grads: &RenderGrads,
) -> Result<SplatGrads> {
    let npix = out.pixel_count();
    let fdim = if out.channels.has_feature() { params.feature_dim } else { 0 };
    check_grad("color", &grads.color, npix * 3)?;
    check_grad("alpha", &grads.alpha, npix)?;
    check_grad("depth", &grads.depth, npix)?;
    check_grad("dynamic alpha", &grads.dynamic_alpha, npix)?;
    if grads.feature.is_some() && fdim == 0 {
        return Err(Error::Shape("feature gradient for a color-only render".into()));
    }
    check_grad("feature", &grads.feature, npix * fdim)?;

    let channels = out.channels;
    let k = payload_width(params, channels);
    let splats = &out.splats;
    let mut slot_of = vec![u32::MAX; params.len()];
    for (pos, s) in splats.iter().enumerate() {
        slot_of[s.index] = pos as u32;
    }
    let mut payload = vec![0.0; splats.len() * k];
    for (s, row) in splats.iter().zip(payload.chunks_mut(k)) {
        row[SLOT_ALPHA] = 1.0;
        row[SLOT_DYN] = if params.dynamic[s.index] { 1.0 } else { 0.0 };
        row[SLOT_DEPTH] = s.depth;
        row[SLOT_COLOR..SLOT_COLOR + 3].copy_from_slice(&params.colors[s.index]);
        if fdim > 0 {
            row[SLOT_FEATURE..].copy_from_slice(params.feature(s.index));
        }
    }

    let ts = cfg.tile_size;
    let tiles_x = out.width.div_ceil(ts);
    let tiles_y = out.height.div_ceil(ts);

    let pixel_grad = |p: usize, g: &mut [f64]| {
        g.fill(0.0);
        if let Some(v) = &grads.alpha {
            g[SLOT_ALPHA] = v[p];
        }
        if let Some(v) = &grads.dynamic_alpha {
            g[SLOT_DYN] = v[p];
        }
        if let Some(v) = &grads.depth {
            g[SLOT_DEPTH] = v[p];
        }
        if let Some(v) = &grads.color {
            g[SLOT_COLOR..SLOT_COLOR + 3].copy_from_slice(&v[p * 3..p * 3 + 3]);
        }
        if let Some(v) = &grads.feature {
            g[SLOT_FEATURE..].copy_from_slice(&v[p * fdim..(p + 1) * fdim]);
        }
    };

    // Per tile: sparse accumulation keyed by splat position, merged in tile order.
    let tile_grads: Vec<(Vec<u32>, TileGrad)> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|tile| {
            let (tx, ty) = (tile % tiles_x, tile / tiles_x);
            let mut touched: Vec<u32> = Vec::new();
            let mut local_of = std::collections::HashMap::new();
            let mut acc = TileGrad {
                screen: Vec::new(),
                payload: Vec::new(),
            };
            let mut g = vec![0.0; k];
            let mut trans = Vec::new();
            for y in ty * ts..((ty + 1) * ts).min(out.height) {
                for x in tx * ts..((tx + 1) * ts).min(out.width) {
                    let p = y * out.width + x;
                    let list = out.contributors_at(p);
                    if list.is_empty() {
                        continue;
                    }
                    pixel_grad(p, &mut g);
                    if g.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    trans.clear();
                    let mut t = 1.0;
                    for c in list {
                        trans.push(t);
                        t *= 1.0 - c.alpha;
                    }
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let mut suffix = 0.0;
                    for (ci, c) in list.iter().enumerate().rev() {
                        let pos = slot_of[c.gaussian as usize];
                        let local = *local_of.entry(pos).or_insert_with(|| {
                            touched.push(pos);
                            acc.screen.push(ScreenGrad::default());
                            acc.payload.extend(std::iter::repeat_n(0.0, k));
                            touched.len() - 1
                        });
                        let row = &payload[pos as usize * k..(pos as usize + 1) * k];
                        let gv: f64 = row.iter().zip(&g).map(|(a, b)| a * b).sum();
                        let d_alpha = trans[ci] * gv - suffix / (1.0 - c.alpha);
                        suffix += c.weight * gv;

                        let dst = &mut acc.payload[local * k..(local + 1) * k];
                        for (d, gg) in dst.iter_mut().zip(&g) {
                            *d += c.weight * gg;
                        }
                        let s = &splats[pos as usize];
                        let (alpha, dx, dy, clamped) = splat_alpha(s, px, py, cfg)
                            .expect("contributor alpha above cutoff");
                        if clamped {
                            continue;
                        }
                        let sg = &mut acc.screen[local];
                        sg.opacity += d_alpha * alpha / s.opacity;
                        let d_power = d_alpha * alpha;
                        let [a, b, cc] = s.conic;
                        sg.mean[0] += d_power * (a * dx + b * dy);
                        sg.mean[1] += d_power * (b * dx + cc * dy);
                        sg.conic[0] += d_power * (-0.5 * dx * dx);
                        sg.conic[1] += d_power * (-dx * dy);
                        sg.conic[2] += d_power * (-0.5 * dy * dy);
                    }
                }
            }
            (touched, acc)
        })
        .collect();

    let mut screen = vec![ScreenGrad::default(); splats.len()];
    let mut value_grads = vec![0.0; splats.len() * k];
    for (touched, acc) in tile_grads {
        for (local, &pos) in touched.iter().enumerate() {
            let pos = pos as usize;
            screen[pos].add(&acc.screen[local]);
            let src = &acc.payload[local * k..(local + 1) * k];
            for (d, s) in value_grads[pos * k..(pos + 1) * k].iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    let frame = Frame::new(cam);
    let geometry: Vec<_> = splats
        .par_iter()
        .enumerate()
        .map(|(pos, s)| {
            let mut sg = screen[pos];
            sg.depth += value_grads[pos * k + SLOT_DEPTH];
            project::project_one_backward(
                &frame,
                s,
                &params.rotations[s.index],
                &params.log_scales[s.index],
                &sg,
            )
        })
        .collect();

    let mut result = SplatGrads::zeros(params.len(), params.feature_dim);
    for ((pos, s), geo) in splats.iter().enumerate().zip(geometry) {
        let i = s.index;
        result.means_2d[i] = screen[pos].mean;
        result.centers[i] = geo.center;
        result.rotations[i] = geo.rotation;
        result.log_scales[i] = geo.log_scale;
        result.opacity_logits[i] = geo.opacity_logit;
        let row = &value_grads[pos * k..(pos + 1) * k];
        result.colors[i].copy_from_slice(&row[SLOT_COLOR..SLOT_COLOR + 3]);
        if fdim > 0 {
            result.features[i * fdim..(i + 1) * fdim].copy_from_slice(&row[SLOT_FEATURE..]);
        }
    }
    Ok(result)
}

#[cfg(test)]
mod tests;
