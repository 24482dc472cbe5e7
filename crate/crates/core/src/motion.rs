//! Pose of canonical Gaussians at frame `t` from a weighted blend of global
//! rigid motion bases.
//!
//! Translations blend linearly. Rotations blend as a sign-aligned weighted
//! quaternion sum followed by normalization; each basis quaternion is flipped
//! to have a non-negative dot product with basis 0 (a zero dot product keeps
//! its sign). One-hot weights reproduce the selected basis exactly.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::math::{self, Quat};
use crate::scene::{GaussianScene, Rigid};

/// Smallest admissible norm of the weighted quaternion sum.
pub const BLEND_DEGENERACY_EPS: f64 = 1e-12;

/// Canonical Gaussians moved to frame `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct PosedGaussians {
    pub t: usize,
    pub centers: Vec<[f64; 3]>,
    pub rotations: Vec<Quat>,
}

/// Intermediate values of a blend, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct Blend {
    pub rigid: Rigid,
    raw_rotation: Quat,
    /// `rotation = output_sign · raw / |raw|`; -1 only when a one-hot weight
    /// selects a basis that was flipped for alignment.
    output_sign: f64,
    signs: Vec<f64>,
}

fn alignment_signs(bases: &[Rigid]) -> Vec<f64> {
    let reference = bases[0].rotation;
    bases
        .iter()
        .map(|b| {
            if math::dot4(&b.rotation, &reference) < 0.0 {
                -1.0
            } else {
                1.0
            }
        })
        .collect()
}

pub fn blend_with_cache(weights: &[f64], bases: &[Rigid]) -> Result<Blend> {
    if weights.len() != bases.len() || bases.is_empty() {
        return Err(Error::Shape(format!(
            "{} weights for {} bases",
            weights.len(),
            bases.len()
        )));
    }
    let signs = alignment_signs(bases);
    let mut raw = [0.0; 4];
    let mut translation = [0.0; 3];
    for ((w, s), b) in weights.iter().zip(&signs).zip(bases) {
        if *w == 0.0 {
            continue;
        }
        for k in 0..4 {
            raw[k] += w * s * b.rotation[k];
        }
        for k in 0..3 {
            translation[k] += w * b.translation[k];
        }
    }
    let n = math::norm4(&raw);
    if !(n > BLEND_DEGENERACY_EPS) {
        return Err(Error::DegenerateBlend(n));
    }
    let mut rigid = Rigid {
        rotation: [raw[0] / n, raw[1] / n, raw[2] / n, raw[3] / n],
        translation,
    };
    let mut output_sign = 1.0;
    // One-hot weights select the basis verbatim.
    if let Some(b) = one_hot(weights) {
        rigid = bases[b];
        output_sign = signs[b];
    }
    Ok(Blend {
        rigid,
        raw_rotation: raw,
        output_sign,
        signs,
    })
}

/// Blends `bases` with simplex weights `weights` into one rigid transform.
pub fn blend_bases(weights: &[f64], bases: &[Rigid]) -> Result<Rigid> {
    Ok(blend_with_cache(weights, bases)?.rigid)
}

fn one_hot(weights: &[f64]) -> Option<usize> {
    let mut hit = None;
    for (b, &w) in weights.iter().enumerate() {
        if w == 1.0 && hit.is_none() {
            hit = Some(b);
        } else if w != 0.0 {
            return None;
        }
    }
    hit
}

/// Moves one dynamic Gaussian by a blended transform: `μ_t = R μ + t`,
/// `q_t = q_blend ⊗ q`.
pub fn apply_blend(blend: &Rigid, center: [f64; 3], rotation: Quat) -> ([f64; 3], Quat) {
    (blend.apply(center), math::quat_mul(&blend.rotation, &rotation))
}

/// Gradients of one dynamic Gaussian's posed center/rotation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianMotionGrad {
    pub center: [f64; 3],
    pub rotation: Quat,
    /// dL/dw (simplex weights, before the softmax).
    pub weights: Vec<f64>,
    pub basis_rotations: Vec<Quat>,
    pub basis_translations: Vec<[f64; 3]>,
}

pub fn pose_dynamic(
    center: [f64; 3],
    rotation: Quat,
    weights: &[f64],
    bases: &[Rigid],
) -> Result<([f64; 3], Quat)> {
    let blend = blend_bases(weights, bases)?;
    Ok(apply_blend(&blend, center, rotation))
}

/// Backward of [`pose_dynamic`] for upstream gradients on `μ_t` and `q_t`.
pub fn pose_dynamic_backward(
    center: [f64; 3],
    rotation: Quat,
    weights: &[f64],
    bases: &[Rigid],
    grad_center: [f64; 3],
    grad_rotation: Quat,
) -> Result<GaussianMotionGrad> {
    let blend = blend_with_cache(weights, bases)?;
    let qb = blend.rigid.rotation;
    let r = math::quat_to_mat(&qb);
    let g_mu = Vector3::from(grad_center);

    let outer = g_mu * Vector3::from(center).transpose();
    let mut g_qb = math::quat_to_mat_backward(&qb, &outer);
    let (ga, g_q) = math::quat_mul_backward(&qb, &rotation, &grad_rotation);
    for k in 0..4 {
        g_qb[k] += ga[k];
    }
    let d_center = r.transpose() * g_mu;
    let g_raw = math::normalize4_backward(&blend.raw_rotation, &g_qb)
        .map(|v| v * blend.output_sign);

    let nb = bases.len();
    let mut out = GaussianMotionGrad {
        center: [d_center.x, d_center.y, d_center.z],
        rotation: g_q,
        weights: vec![0.0; nb],
        basis_rotations: vec![[0.0; 4]; nb],
        basis_translations: vec![[0.0; 3]; nb],
    };
    for b in 0..nb {
        let s = blend.signs[b];
        let base = &bases[b];
        out.weights[b] = s * math::dot4(&base.rotation, &g_raw)
            + base.translation[0] * grad_center[0]
            + base.translation[1] * grad_center[1]
            + base.translation[2] * grad_center[2];
        for k in 0..4 {
            out.basis_rotations[b][k] = weights[b] * s * g_raw[k];
        }
        for k in 0..3 {
            out.basis_translations[b][k] = weights[b] * grad_center[k];
        }
    }
    Ok(out)
}

fn frame_bases(scene: &GaussianScene, t: usize) -> Result<Vec<Rigid>> {
    if t >= scene.frames() {
        return Err(Error::FrameOutOfRange {
            t,
            frames: scene.frames(),
        });
    }
    Ok(scene.motion.frame(t).iter().map(|b| b.to_rigid()).collect())
}

/// Poses every Gaussian of `scene` at frame `t`. Static Gaussians pass through.
pub fn pose_at(scene: &GaussianScene, t: usize) -> Result<PosedGaussians> {
    let bases = frame_bases(scene, t)?;
    let posed: Result<Vec<([f64; 3], Quat)>> = scene
        .gaussians
        .par_iter()
        .map(|g| {
            let center = g.center.map(|v| v as f64);
            let rotation = g.rotation.map(|v| v as f64);
            if !g.dynamic {
                return Ok((center, rotation));
            }
            pose_dynamic(center, rotation, &g.basis_weights(), &bases)
        })
        .collect();
    let (centers, rotations) = posed?.into_iter().unzip();
    Ok(PosedGaussians {
        t,
        centers,
        rotations,
    })
}

/// Gradients of a loss with respect to the motion-dependent parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionGrads {
    pub t: usize,
    /// Canonical centers (all Gaussians; static ones receive the upstream gradient).
    pub centers: Vec<[f64; 3]>,
    /// Canonical rotations.
    pub rotations: Vec<Quat>,
    /// Basis-weight logits per Gaussian; empty for static Gaussians.
    pub weight_logits: Vec<Vec<f64>>,
    /// Basis rotations at frame `t`.
    pub basis_rotations: Vec<Quat>,
    /// Basis translations at frame `t`.
    pub basis_translations: Vec<[f64; 3]>,
}

/// Chain rule through [`pose_at`]. Basis gradients are summed over Gaussians
/// in index order.
pub fn motion_gradients(
    scene: &GaussianScene,
    t: usize,
    grad_centers: &[[f64; 3]],
    grad_rotations: &[Quat],
) -> Result<MotionGrads> {
    let n = scene.len();
    if grad_centers.len() != n || grad_rotations.len() != n {
        return Err(Error::Shape(format!(
            "upstream gradients for {}/{} Gaussians, scene has {n}",
            grad_centers.len(),
            grad_rotations.len()
        )));
    }
    let bases = frame_bases(scene, t)?;
    let nb = bases.len();

    let per: Result<Vec<Option<(GaussianMotionGrad, Vec<f64>)>>> = scene
        .gaussians
        .par_iter()
        .enumerate()
        .map(|(i, g)| {
            if !g.dynamic {
                return Ok(None);
            }
            let w = g.basis_weights();
            let grad = pose_dynamic_backward(
                g.center.map(|v| v as f64),
                g.rotation.map(|v| v as f64),
                &w,
                &bases,
                grad_centers[i],
                grad_rotations[i],
            )?;
            let logits = math::softmax_backward(&w, &grad.weights);
            Ok(Some((grad, logits)))
        })
        .collect();

    let mut out = MotionGrads {
        t,
        centers: Vec::with_capacity(n),
        rotations: Vec::with_capacity(n),
        weight_logits: Vec::with_capacity(n),
        basis_rotations: vec![[0.0; 4]; nb],
        basis_translations: vec![[0.0; 3]; nb],
    };
    for (i, entry) in per?.into_iter().enumerate() {
        match entry {
            None => {
                out.centers.push(grad_centers[i]);
                out.rotations.push(grad_rotations[i]);
                out.weight_logits.push(Vec::new());
            }
            Some((grad, logits)) => {
                out.centers.push(grad.center);
                out.rotations.push(grad.rotation);
                out.weight_logits.push(logits);
                for b in 0..nb {
                    for k in 0..4 {
                        out.basis_rotations[b][k] += grad.basis_rotations[b][k];
                    }
                    for k in 0..3 {
                        out.basis_translations[b][k] += grad.basis_translations[b][k];
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rigid(q: Quat, t: [f64; 3]) -> Rigid {
        Rigid {
            rotation: math::normalize4(&q),
            translation: t,
        }
    }

    #[test]
    fn one_hot_selects_basis_exactly() {
        let bases = vec![
            rigid([1.0, 0.2, 0.0, 0.1], [0.3, 0.0, 1.0]),
            rigid([-0.5, 0.5, 0.5, 0.1], [1.0, 2.0, 3.0]),
            rigid([0.1, 0.9, -0.3, 0.2], [-1.0, 0.5, 0.25]),
        ];
        let out = blend_bases(&[0.0, 0.0, 1.0], &bases).unwrap();
        assert_eq!(out, bases[2]);
        // Antipodal to basis 0: still returned verbatim.
        let out = blend_bases(&[0.0, 1.0, 0.0], &bases).unwrap();
        assert_eq!(out, bases[1]);
    }

    #[test]
    fn identity_bases_give_identity() {
        let bases = vec![Rigid::IDENTITY; 4];
        let out = blend_bases(&[0.1, 0.2, 0.3, 0.4], &bases).unwrap();
        assert_eq!(out.rotation, math::QUAT_IDENTITY);
        assert_eq!(out.translation, [0.0; 3]);
    }

    #[test]
    fn half_half_translation() {
        let bases = vec![
            rigid([1.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0]),
            rigid([1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0]),
        ];
        let out = blend_bases(&[0.5, 0.5], &bases).unwrap();
        assert_eq!(out.translation, [0.5, 0.5, 0.0]);
        assert_eq!(out.rotation, math::QUAT_IDENTITY);
    }

    #[test]
    fn antipodal_cancellation_is_an_error() {
        let bases = vec![
            rigid([0.0, 1.0, 0.0, 0.0], [0.0; 3]),
            rigid([0.0, -1.0, 0.0, 0.0], [0.0; 3]),
        ];
        // Opposite quaternions are aligned before summing.
        assert!(blend_bases(&[0.5, 0.5], &bases).is_ok());
        let bases = vec![
            rigid([1.0, 0.0, 0.0, 0.0], [0.0; 3]),
            rigid([0.0, 1.0, 0.0, 0.0], [0.0; 3]),
            rigid([0.0, -1.0, 0.0, 0.0], [0.0; 3]),
        ];
        // Zero dot product with basis 0 keeps both signs, so they cancel.
        let err = blend_bases(&[0.0, 0.5, 0.5], &bases).unwrap_err();
        assert!(matches!(err, Error::DegenerateBlend(_)));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let bases = vec![
            rigid([1.0, 0.2, 0.0, 0.1], [0.3, 0.0, 1.0]),
            rigid([0.9, -0.1, 0.3, 0.0], [1.0, 2.0, 3.0]),
        ];
        let g = pose_dynamic_backward(
            [0.1, 0.2, 0.3],
            math::normalize4(&[0.5, 0.5, 0.1, 0.0]),
            &[0.3, 0.7],
            &bases,
            [0.0; 3],
            [0.0; 4],
        )
        .unwrap();
        assert!(g.center.iter().all(|&v| v == 0.0));
        assert!(g.rotation.iter().all(|&v| v == 0.0));
        assert!(g.weights.iter().all(|&v| v == 0.0));
        assert!(g.basis_rotations.iter().flatten().all(|&v| v == 0.0));
        assert!(g.basis_translations.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_bases_pass_center_gradient_through() {
        let bases = vec![Rigid::IDENTITY; 3];
        let w = [0.2, 0.3, 0.5];
        let up = [0.7, -1.1, 0.4];
        let g = pose_dynamic_backward(
            [0.1, 0.2, 0.3],
            math::QUAT_IDENTITY,
            &w,
            &bases,
            up,
            [0.0; 4],
        )
        .unwrap();
        for k in 0..3 {
            assert!((g.center[k] - up[k]).abs() < 1e-15);
            for b in 0..3 {
                assert!((g.basis_translations[b][k] - w[b] * up[k]).abs() < 1e-15);
            }
        }
    }
}
