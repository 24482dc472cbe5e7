//! Reconstruction, language and edit losses with their image-space gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{self, RenderGrads, RenderOutput};
use crate::scene::Camera;

use super::{SupervisionFrame, Track};

/// Sub-weights of the reconstruction loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecWeights {
    pub rgb: f64,
    pub mask: f64,
    pub depth: f64,
    pub track: f64,
}

impl Default for RecWeights {
    fn default() -> Self {
        RecWeights {
            rgb: 1.0,
            mask: 0.5,
            depth: 0.5,
            track: 2.0,
        }
    }
}

/// Unweighted sub-losses and their weighted total.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RecBreakdown {
    pub total: f64,
    pub rgb: f64,
    pub mask: f64,
    pub depth: f64,
    pub track: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecLoss {
    pub breakdown: RecBreakdown,
    /// Gradients of `total` with respect to the rendered images.
    pub image: RenderGrads,
    /// Gradients of `total` with respect to the posed centers of track anchors.
    pub anchors: Vec<(usize, [f64; 3])>,
}

fn l1_sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Reconstruction loss of frame `t`. `posed_centers` are the centers the
/// render was produced from; they locate the track anchors.
pub fn rec_loss(
    out: &RenderOutput,
    frame: &SupervisionFrame,
    tracks: &[Track],
    t: usize,
    posed_centers: &[[f64; 3]],
    cam: &Camera,
    weights: &RecWeights,
) -> Result<RecLoss> {
    let npix = out.pixel_count();
    if frame.rgb.len() != npix * 3 {
        return Err(Error::Shape("ground-truth RGB size".into()));
    }
    let mut b = RecBreakdown::default();
    let mut image = RenderGrads::default();

    let scale = weights.rgb / (npix * 3) as f64;
    let mut g = vec![0.0; npix * 3];
    for (k, (r, y)) in out.color.iter().zip(&frame.rgb).enumerate() {
        b.rgb += (r - y).abs();
        g[k] = scale * l1_sign(r - y);
    }
    b.rgb /= (npix * 3) as f64;
    image.color = Some(g);

    match &frame.mask {
        Some(mask) if mask.len() == npix => {
            let scale = weights.mask / npix as f64;
            let mut g = vec![0.0; npix];
            for p in 0..npix {
                let d = out.dynamic_alpha[p] - mask[p];
                b.mask += d.abs();
                g[p] = scale * l1_sign(d);
            }
            b.mask /= npix as f64;
            image.dynamic_alpha = Some(g);
        }
        Some(_) => return Err(Error::Shape("dynamic mask size".into())),
        None => log::warn!("frame {t}: no dynamic mask, mask term skipped"),
    }

    match &frame.depth {
        Some(depth) if depth.len() == npix => {
            let valid = depth.iter().filter(|&&d| d > 0.0).count();
            if valid > 0 {
                let scale = weights.depth / valid as f64;
                let mut g = vec![0.0; npix];
                for p in 0..npix {
                    if depth[p] > 0.0 {
                        let d = out.depth[p] - depth[p];
                        b.depth += d.abs();
                        g[p] = scale * l1_sign(d);
                    }
                }
                b.depth /= valid as f64;
                image.depth = Some(g);
            }
        }
        Some(_) => return Err(Error::Shape("depth map size".into())),
        None => log::warn!("frame {t}: no depth map, depth term skipped"),
    }

    let mut anchors = Vec::new();
    let visible: Vec<&Track> = tracks.iter().filter(|tr| tr.visible.get(t).copied().unwrap_or(false)).collect();
    if !visible.is_empty() {
        let norm = out.width.max(out.height) as f64;
        let scale = weights.track / (visible.len() as f64 * norm);
        for tr in visible {
            let c = posed_centers
                .get(tr.gaussian)
                .ok_or_else(|| Error::Invalid(format!("track anchor {} out of range", tr.gaussian)))?;
            let Some(px) = raster::project_point(cam, *c, 1e-6) else {
                continue;
            };
            let d = [px[0] - tr.pixels[t][0], px[1] - tr.pixels[t][1]];
            let dist = d[0].hypot(d[1]);
            b.track += dist / norm;
            if dist > 0.0 {
                let gp = [scale * d[0] / dist, scale * d[1] / dist];
                anchors.push((tr.gaussian, raster::project_point_backward(cam, *c, gp)));
            }
        }
        b.track /= tracks.iter().filter(|tr| tr.visible.get(t).copied().unwrap_or(false)).count() as f64;
    }

    b.total = weights.rgb * b.rgb + weights.mask * b.mask + weights.depth * b.depth + weights.track * b.track;
    Ok(RecLoss {
        breakdown: b,
        image,
        anchors,
    })
}

/// Mean squared error and its gradient with respect to `render`.
pub fn edit_loss(render: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if render.len() != target.len() || render.is_empty() {
        return Err(Error::Shape(format!(
            "edit loss between {} and {} values",
            render.len(),
            target.len()
        )));
    }
    let n = render.len() as f64;
    let mut loss = 0.0;
    let grad = render
        .iter()
        .zip(target)
        .map(|(a, b)| {
            let d = a - b;
            loss += d * d;
            2.0 * d / n
        })
        .collect();
    Ok((loss / n, grad))
}
