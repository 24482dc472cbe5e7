//! Canonical Gaussian scene, cameras and motion-basis storage.
//!
//! Persistent parameters are stored as `f32` (the on-disk precision); all
//! kernels convert to `f64` working copies before computing.

use std::fmt;

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::math::{self, Quat};

/// Frame index at which every motion basis is the identity.
pub const CANONICAL_FRAME: usize = 0;

/// One canonical Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    pub center: [f32; 3],
    /// Unit quaternion `[w, x, y, z]`.
    pub rotation: [f32; 4],
    /// Per-axis log standard deviation.
    pub log_scale: [f32; 3],
    /// Pre-activation opacity; activated with a logistic function.
    pub opacity_logit: f32,
    pub color: [f32; 3],
    pub feature: Vec<f32>,
    pub dynamic: bool,
    /// Motion-basis logits (softmax gives the blend weights). Empty for static Gaussians.
    pub weight_logits: Vec<f32>,
}

impl Gaussian {
    pub fn opacity(&self) -> f64 {
        math::sigmoid(self.opacity_logit as f64)
    }

    pub fn scale(&self) -> [f64; 3] {
        self.log_scale.map(|s| (s as f64).exp())
    }

    /// Blend weights on the probability simplex; empty for static Gaussians.
    pub fn basis_weights(&self) -> Vec<f64> {
        if self.weight_logits.is_empty() {
            return Vec::new();
        }
        let logits: Vec<f64> = self.weight_logits.iter().map(|&l| l as f64).collect();
        math::softmax(&logits)
    }

    pub fn renormalize_rotation(&mut self) {
        let q = self.rotation.map(|v| v as f64);
        let n = math::normalize4(&q);
        self.rotation = n.map(|v| v as f32);
    }
}

/// Stored rigid transform of one motion basis at one frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BasisTransform {
    pub rotation: [f32; 4],
    pub translation: [f32; 3],
}

impl BasisTransform {
    pub const IDENTITY: BasisTransform = BasisTransform {
        rotation: [1.0, 0.0, 0.0, 0.0],
        translation: [0.0, 0.0, 0.0],
    };

    pub fn to_rigid(&self) -> Rigid {
        Rigid {
            rotation: self.rotation.map(|v| v as f64),
            translation: self.translation.map(|v| v as f64),
        }
    }
}

/// Working-precision rigid transform `x ↦ R(rotation)·x + translation`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rigid {
    pub rotation: Quat,
    pub translation: [f64; 3],
}

impl Rigid {
    pub const IDENTITY: Rigid = Rigid {
        rotation: math::QUAT_IDENTITY,
        translation: [0.0; 3],
    };

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = math::quat_to_mat(&self.rotation);
        let v = r * Vector3::from(p) + Vector3::from(self.translation);
        [v.x, v.y, v.z]
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let r = math::quat_to_mat(&self.rotation);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m[(0, 3)] = self.translation[0];
        m[(1, 3)] = self.translation[1];
        m[(2, 3)] = self.translation[2];
        m
    }
}

/// `frames × bases` table of rigid transforms shared by all dynamic Gaussians.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionBases {
    pub frames: usize,
    pub bases: usize,
    /// Row-major `[t * bases + b]`.
    pub transforms: Vec<BasisTransform>,
}

impl MotionBases {
    pub fn identity(frames: usize, bases: usize) -> Self {
        MotionBases {
            frames,
            bases,
            transforms: vec![BasisTransform::IDENTITY; frames * bases],
        }
    }

    pub fn at(&self, t: usize, b: usize) -> &BasisTransform {
        &self.transforms[t * self.bases + b]
    }

    pub fn at_mut(&mut self, t: usize, b: usize) -> &mut BasisTransform {
        &mut self.transforms[t * self.bases + b]
    }

    pub fn frame(&self, t: usize) -> &[BasisTransform] {
        &self.transforms[t * self.bases..(t + 1) * self.bases]
    }

    pub fn canonical_frame(&self) -> usize {
        CANONICAL_FRAME
    }
}

/// Pinhole camera with a world-to-camera rigid extrinsic.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    /// Row-major 3×3 intrinsics.
    pub intrinsics: [[f64; 3]; 3],
    /// Row-major 4×4 world-to-camera transform.
    pub world_to_camera: [[f64; 4]; 4],
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        Camera {
            intrinsics: [[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]],
            world_to_camera: [
                [1.0, 0.0, 0.0, 0.0],
                [0.0, 1.0, 0.0, 0.0],
                [0.0, 0.0, 1.0, 0.0],
                [0.0, 0.0, 0.0, 1.0],
            ],
            width,
            height,
        }
    }

    pub fn with_pose(mut self, rotation: Matrix3<f64>, translation: [f64; 3]) -> Self {
        for r in 0..3 {
            for c in 0..3 {
                self.world_to_camera[r][c] = rotation[(r, c)];
            }
            self.world_to_camera[r][3] = translation[r];
        }
        self.world_to_camera[3] = [0.0, 0.0, 0.0, 1.0];
        self
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        let e = &self.world_to_camera;
        Matrix3::new(
            e[0][0], e[0][1], e[0][2], e[1][0], e[1][1], e[1][2], e[2][0], e[2][1], e[2][2],
        )
    }

    pub fn translation(&self) -> Vector3<f64> {
        let e = &self.world_to_camera;
        Vector3::new(e[0][3], e[1][3], e[2][3])
    }

    pub fn fx(&self) -> f64 {
        self.intrinsics[0][0]
    }
    pub fn skew(&self) -> f64 {
        self.intrinsics[0][1]
    }
    pub fn cx(&self) -> f64 {
        self.intrinsics[0][2]
    }
    pub fn fy(&self) -> f64 {
        self.intrinsics[1][1]
    }
    pub fn cy(&self) -> f64 {
        self.intrinsics[1][2]
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Checks the intrinsic and extrinsic invariants, returning a description of
    /// the first violation.
    pub fn check(&self) -> Result<(), String> {
        let k = &self.intrinsics;
        if k[1][0] != 0.0 || k[2][0] != 0.0 || k[2][1] != 0.0 || k[2][2] != 1.0 {
            return Err("intrinsics must be upper-triangular with K[2][2] = 1".into());
        }
        if !(k[0][0] > 0.0 && k[1][1] > 0.0) {
            return Err("focal lengths must be positive".into());
        }
        let r = self.rotation();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > 1e-6 || r.determinant() < 0.0 {
            return Err(format!("extrinsic rotation not orthonormal (error {err:e})"));
        }
        if self.world_to_camera[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err("extrinsic bottom row must be [0, 0, 0, 1]".into());
        }
        if self.width == 0 || self.height == 0 {
            return Err("image size must be non-zero".into());
        }
        Ok(())
    }
}

/// Canonical static + dynamic Gaussians with their motion bases.
///
/// Static Gaussians always precede dynamic ones; global Gaussian indices refer
/// to this ordering.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianScene {
    pub gaussians: Vec<Gaussian>,
    pub motion: MotionBases,
    pub feature_dim: usize,
    pub codebook_ref: String,
    pub seed: u64,
}

impl GaussianScene {
    /// Builds a scene, stable-partitioning static Gaussians first.
    pub fn new(
        gaussians: Vec<Gaussian>,
        motion: MotionBases,
        feature_dim: usize,
        codebook_ref: impl Into<String>,
        seed: u64,
    ) -> Self {
        let (mut statics, dynamics): (Vec<_>, Vec<_>) =
            gaussians.into_iter().partition(|g| !g.dynamic);
        statics.extend(dynamics);
        GaussianScene {
            gaussians: statics,
            motion,
            feature_dim,
            codebook_ref: codebook_ref.into(),
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn frames(&self) -> usize {
        self.motion.frames
    }

    pub fn bases(&self) -> usize {
        self.motion.bases
    }

    /// `(num_static, num_dynamic)`.
    pub fn counts(&self) -> (usize, usize) {
        let dynamic = self.gaussians.iter().filter(|g| g.dynamic).count();
        (self.gaussians.len() - dynamic, dynamic)
    }

    pub fn dynamic_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.gaussians[i].dynamic).collect()
    }

    /// Restriction of the scene to `keep` (indices in ascending order).
    pub fn restricted(&self, keep: &[usize]) -> GaussianScene {
        GaussianScene {
            gaussians: keep.iter().map(|&i| self.gaussians[i].clone()).collect(),
            motion: self.motion.clone(),
            feature_dim: self.feature_dim,
            codebook_ref: self.codebook_ref.clone(),
            seed: self.seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IssueKind {
    QuaternionNorm,
    NonFinite,
    OpacityRange,
    ScaleRange,
    FeatureLength,
    WeightCount,
    WeightSimplex,
    StaticWithWeights,
    Ordering,
    BasisQuaternionNorm,
    CanonicalNotIdentity,
    MotionShape,
}

impl IssueKind {
    pub fn label(self) -> &'static str {
        match self {
            IssueKind::QuaternionNorm => "quaternion norm",
            IssueKind::NonFinite => "non-finite parameter",
            IssueKind::OpacityRange => "opacity range",
            IssueKind::ScaleRange => "scale range",
            IssueKind::FeatureLength => "feature length",
            IssueKind::WeightCount => "basis weight count",
            IssueKind::WeightSimplex => "basis weight simplex",
            IssueKind::StaticWithWeights => "static gaussian carries basis weights",
            IssueKind::Ordering => "static gaussians must precede dynamic ones",
            IssueKind::BasisQuaternionNorm => "basis quaternion norm",
            IssueKind::CanonicalNotIdentity => "canonical basis not identity",
            IssueKind::MotionShape => "motion table shape",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Issue {
    pub kind: IssueKind,
    /// Gaussian index, or `t * bases + b` for motion issues.
    pub index: Option<usize>,
    pub detail: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.index {
            Some(i) => write!(f, "[{i}] {}: {}", self.kind.label(), self.detail),
            None => write!(f, "{}: {}", self.kind.label(), self.detail),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn has(&self, kind: IssueKind, index: usize) -> bool {
        self.issues
            .iter()
            .any(|i| i.kind == kind && i.index == Some(index))
    }

    fn push(&mut self, kind: IssueKind, index: Option<usize>, detail: String) {
        self.issues.push(Issue {
            kind,
            index,
            detail,
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.issues.is_empty() {
            return write!(f, "ok");
        }
        for issue in &self.issues {
            writeln!(f, "{issue}")?;
        }
        Ok(())
    }
}

const NORM_TOL: f64 = 1e-6;

/// Lists every violated scene invariant.
pub fn validate(scene: &GaussianScene) -> ValidationReport {
    let mut report = ValidationReport::default();
    let bases = scene.motion.bases;
    let mut seen_dynamic = false;

    for (i, g) in scene.gaussians.iter().enumerate() {
        let all = g
            .center
            .iter()
            .chain(&g.rotation)
            .chain(&g.log_scale)
            .chain(std::iter::once(&g.opacity_logit))
            .chain(&g.color)
            .chain(&g.feature)
            .chain(&g.weight_logits);
        if all.into_iter().any(|v| !v.is_finite()) {
            report.push(IssueKind::NonFinite, Some(i), "NaN or infinite value".into());
            continue;
        }

        let qn = math::norm4(&g.rotation.map(|v| v as f64));
        if (qn - 1.0).abs() > NORM_TOL {
            report.push(IssueKind::QuaternionNorm, Some(i), format!("|q| = {qn}"));
        }
        if g.scale().iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            report.push(IssueKind::ScaleRange, Some(i), "exp(log_scale) not positive".into());
        }
        let o = g.opacity();
        if !(o > 0.0 && o < 1.0) {
            report.push(IssueKind::OpacityRange, Some(i), format!("opacity {o}"));
        }
        if g.feature.len() != scene.feature_dim {
            report.push(
                IssueKind::FeatureLength,
                Some(i),
                format!("{} != {}", g.feature.len(), scene.feature_dim),
            );
        }

        if g.dynamic {
            seen_dynamic = true;
            if g.weight_logits.len() != bases {
                report.push(
                    IssueKind::WeightCount,
                    Some(i),
                    format!("{} weights for {} bases", g.weight_logits.len(), bases),
                );
            } else {
                let w = g.basis_weights();
                let sum: f64 = w.iter().sum();
                if (sum - 1.0).abs() > NORM_TOL || w.iter().any(|&x| x < 0.0) {
                    report.push(IssueKind::WeightSimplex, Some(i), format!("sum {sum}"));
                }
            }
        } else {
            if seen_dynamic {
                report.push(IssueKind::Ordering, Some(i), "static after dynamic".into());
            }
            if !g.weight_logits.is_empty() {
                report.push(IssueKind::StaticWithWeights, Some(i), String::new());
            }
        }
    }

    let m = &scene.motion;
    if m.transforms.len() != m.frames * m.bases {
        report.push(
            IssueKind::MotionShape,
            None,
            format!("{} transforms for {}×{}", m.transforms.len(), m.frames, m.bases),
        );
        return report;
    }
    for (k, tr) in m.transforms.iter().enumerate() {
        if tr.rotation.iter().chain(&tr.translation).any(|v| !v.is_finite()) {
            report.push(IssueKind::NonFinite, Some(k), "basis transform".into());
            continue;
        }
        let qn = math::norm4(&tr.rotation.map(|v| v as f64));
        if (qn - 1.0).abs() > NORM_TOL {
            report.push(IssueKind::BasisQuaternionNorm, Some(k), format!("|q| = {qn}"));
        }
        if k / m.bases.max(1) == CANONICAL_FRAME && *tr != BasisTransform::IDENTITY {
            report.push(IssueKind::CanonicalNotIdentity, Some(k), String::new());
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian(dynamic: bool, bases: usize) -> Gaussian {
        Gaussian {
            center: [0.0, 0.0, 4.0],
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: [-2.0; 3],
            opacity_logit: 0.0,
            color: [0.5; 3],
            feature: vec![0.0; 4],
            dynamic,
            weight_logits: if dynamic { vec![0.0; bases] } else { vec![] },
        }
    }

    #[test]
    fn new_orders_static_first() {
        let gs = vec![gaussian(true, 2), gaussian(false, 2), gaussian(true, 2)];
        let scene = GaussianScene::new(gs, MotionBases::identity(3, 2), 4, "none", 0);
        assert!(!scene.gaussians[0].dynamic);
        assert_eq!(scene.counts(), (1, 2));
        assert!(validate(&scene).is_empty());
    }

    #[test]
    fn validate_flags_scaled_quaternion() {
        let gs = vec![gaussian(false, 2), gaussian(true, 2)];
        let mut scene = GaussianScene::new(gs, MotionBases::identity(3, 2), 4, "none", 0);
        scene.gaussians[1].rotation = [2.0, 0.0, 0.0, 0.0];
        let report = validate(&scene);
        assert_eq!(report.issues.len(), 1);
        assert!(report.has(IssueKind::QuaternionNorm, 1));
        assert!(report.to_string().contains("quaternion norm"));
    }

    #[test]
    fn validate_flags_bad_motion_and_ordering() {
        let gs = vec![gaussian(false, 2), gaussian(true, 2)];
        let mut scene = GaussianScene::new(gs, MotionBases::identity(3, 2), 4, "none", 0);
        scene.gaussians.swap(0, 1);
        scene.gaussians[1].weight_logits = vec![1.0];
        scene.motion.at_mut(0, 1).translation = [0.1, 0.0, 0.0];
        let report = validate(&scene);
        assert!(report.has(IssueKind::Ordering, 1));
        assert!(report.has(IssueKind::StaticWithWeights, 1));
        assert!(report.has(IssueKind::CanonicalNotIdentity, 1));
    }

    #[test]
    fn camera_check() {
        let cam = Camera::new(50.0, 50.0, 32.0, 32.0, 64, 64);
        assert!(cam.check().is_ok());
        let mut bad = cam.clone();
        bad.world_to_camera[0][0] = 2.0;
        assert!(bad.check().is_err());
        let mut bad = cam;
        bad.intrinsics[1][1] = -1.0;
        assert!(bad.check().is_err());
    }
}
