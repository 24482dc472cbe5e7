//! Edit optimization restricted to a localized Gaussian set.

use serde::{Deserialize, Serialize};

use super::{apply_step, LearningRates, Optimizer, SceneGrads, StepMask};
use crate::error::{Error, Result};
use crate::motion;
use crate::raster::{self, Channels, RenderConfig, RenderGrads, SplatParams};
use crate::scene::{Camera, GaussianScene};
use crate::semantics::Mlp;

use super::loss::edit_loss;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EditMode {
    /// Color, feature, opacity, scale, canonical center and rotation.
    Full,
    ColorOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditConfig {
    pub epochs: usize,
    pub mode: EditMode,
    pub lr: LearningRates,
    pub render: RenderConfig,
}

impl Default for EditConfig {
    fn default() -> Self {
        EditConfig {
            epochs: 500,
            mode: EditMode::Full,
            lr: LearningRates::default(),
            render: RenderConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EditReport {
    /// Frame-averaged edit loss per epoch.
    pub losses: Vec<f64>,
}

/// Optimizes the Gaussians in `selected` so renders from `cameras` match
/// `targets` (`H × W × 3` per frame). Nothing outside `selected` changes.
pub fn edit(
    scene: &GaussianScene,
    selected: &[usize],
    targets: &[Vec<f64>],
    cameras: &[Camera],
    cfg: &EditConfig,
) -> Result<(GaussianScene, EditReport)> {
    if targets.len() != cameras.len() || cameras.len() > scene.frames() {
        return Err(Error::Shape(format!(
            "{} edit frames for {} cameras and {} scene frames",
            targets.len(),
            cameras.len(),
            scene.frames()
        )));
    }
    for (t, (v, c)) in targets.iter().zip(cameras).enumerate() {
        if v.len() != c.pixel_count() * 3 {
            return Err(Error::Shape(format!("edit frame {t} size")));
        }
    }
    let mut scene = scene.clone();
    let mut report = EditReport::default();
    let n = scene.len();
    let mut member = vec![false; n];
    for &i in selected {
        if i >= n {
            return Err(Error::Invalid(format!("selected index {i} out of range")));
        }
        member[i] = true;
    }
    if selected.is_empty() {
        log::warn!("edit with an empty Gaussian set leaves the scene unchanged");
        return Ok((scene, report));
    }
    let full = cfg.mode == EditMode::Full;
    let mask = StepMask {
        gaussians: Some(&member),
        geometry: full,
        opacity: full,
        appearance: true,
        features: full,
        motion: false,
        decoder: false,
    };
    let mut mlp = Mlp {
        input: 0,
        hidden: 0,
        output: 0,
        params: Vec::new(),
    };
    let mut opt = Optimizer::new(&scene, 0, &cfg.lr);
    let d = scene.feature_dim;
    let nb = scene.bases();
    for _ in 0..cfg.epochs {
        let mut total = 0.0;
        for (t, cam) in cameras.iter().enumerate() {
            let posed = motion::pose_at(&scene, t)?;
            let params = SplatParams::from_posed(&scene, &posed);
            let out = raster::render_params(&params, cam, &cfg.render, Channels::Color, None)?;
            let (loss, grad) = edit_loss(&out.color, &targets[t])?;
            total += loss;
            let sg = raster::render_backward(
                &params,
                cam,
                &cfg.render,
                &out,
                &RenderGrads {
                    color: Some(grad),
                    ..Default::default()
                },
            )?;
            let mg = motion::motion_gradients(&scene, t, &sg.centers, &sg.rotations)?;
            let g = SceneGrads {
                centers: mg.centers.iter().flatten().copied().collect(),
                rotations: mg.rotations.iter().flatten().copied().collect(),
                log_scales: sg.log_scales.iter().flatten().copied().collect(),
                opacity_logits: sg.opacity_logits,
                colors: sg.colors.iter().flatten().copied().collect(),
                features: vec![0.0; n * d],
                weight_logits: vec![0.0; n * nb],
                t,
                bases: Vec::new(),
                decoder: Vec::new(),
                visible: Vec::new(),
                screen_grad_norms: Vec::new(),
            };
            apply_step(&mut scene, &mut mlp, &mut opt, &g, &mask);
        }
        report.losses.push(total / cameras.len().max(1) as f64);
    }
    Ok((scene, report))
}
