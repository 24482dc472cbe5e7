//! EWA projection of 3D Gaussians to screen-space splats, and its backward.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};

use super::RenderConfig;
use crate::math::{self, Quat};
use crate::scene::Camera;

/// A projected Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct Splat {
    /// Gaussian index in the parameter arrays.
    pub index: usize,
    /// Screen-space mean in pixels (pixel `x` has its center at `x + 0.5`).
    pub mean: [f64; 2],
    /// 2D covariance `(A, B, C)` = `[[A, B], [B, C]]`, blur included.
    pub cov: [f64; 3],
    /// Inverse covariance `(a, b, c)`.
    pub conic: [f64; 3],
    pub opacity: f64,
    /// Camera-space z of the center.
    pub depth: f64,
    pub cam_point: [f64; 3],
    /// Inclusive pixel rectangle `[x0, y0, x1, y1]` outside which alpha is
    /// below the cutoff.
    pub rect: [usize; 4],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cull {
    Behind,
    Offscreen,
    Transparent,
    Degenerate,
}

pub(crate) struct Frame {
    pub w: Matrix3<f64>,
    pub t: Vector3<f64>,
    pub fx: f64,
    pub fy: f64,
    pub skew: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Frame {
    pub fn new(cam: &Camera) -> Self {
        Frame {
            w: cam.rotation(),
            t: cam.translation(),
            fx: cam.fx(),
            fy: cam.fy(),
            skew: cam.skew(),
            cx: cam.cx(),
            cy: cam.cy(),
            width: cam.width,
            height: cam.height,
        }
    }

    fn jacobian(&self, p: &Vector3<f64>) -> Matrix2x3<f64> {
        let (x, y, z) = (p.x, p.y, p.z);
        let iz = 1.0 / z;
        let iz2 = iz * iz;
        Matrix2x3::new(
            self.fx * iz,
            self.skew * iz,
            -(self.fx * x + self.skew * y) * iz2,
            0.0,
            self.fy * iz,
            -self.fy * y * iz2,
        )
    }

    fn pixel(&self, p: &Vector3<f64>) -> [f64; 2] {
        [
            (self.fx * p.x + self.skew * p.y) / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ]
    }
}

/// Pinhole projection of a world point. Returns `None` behind `z_near`.
pub fn project_point(cam: &Camera, point: [f64; 3], z_near: f64) -> Option<[f64; 2]> {
    let frame = Frame::new(cam);
    let p = frame.w * Vector3::from(point) + frame.t;
    (p.z > z_near).then(|| frame.pixel(&p))
}

/// Backward of [`project_point`]: dL/dworld for an upstream dL/dpixel.
pub fn project_point_backward(cam: &Camera, point: [f64; 3], grad: [f64; 2]) -> [f64; 3] {
    let frame = Frame::new(cam);
    let p = frame.w * Vector3::from(point) + frame.t;
    let j = frame.jacobian(&p);
    let dp = j.transpose() * nalgebra::Vector2::new(grad[0], grad[1]);
    let dw = frame.w.transpose() * dp;
    [dw.x, dw.y, dw.z]
}

fn covariance_3d(rotation: &Quat, log_scale: &[f64; 3]) -> (Matrix3<f64>, Matrix3<f64>, Vector3<f64>) {
    let q = math::normalize4(rotation);
    let r = math::quat_to_mat(&q);
    let s = Vector3::new(log_scale[0].exp(), log_scale[1].exp(), log_scale[2].exp());
    let l = r * Matrix3::from_diagonal(&s);
    (l * l.transpose(), r, s)
}

pub(crate) fn project_one(
    frame: &Frame,
    cfg: &RenderConfig,
    index: usize,
    center: &[f64; 3],
    rotation: &Quat,
    log_scale: &[f64; 3],
    opacity_logit: f64,
) -> Result<Splat, Cull> {
    let p = frame.w * Vector3::from(*center) + frame.t;
    if !(p.z > cfg.z_near) {
        return Err(Cull::Behind);
    }
    let opacity = math::sigmoid(opacity_logit);
    if opacity < cfg.alpha_min {
        return Err(Cull::Transparent);
    }
    let (m3, _, _) = covariance_3d(rotation, log_scale);
    let mc = frame.w * m3 * frame.w.transpose();
    let j = frame.jacobian(&p);
    let cov = j * mc * j.transpose();
    let (ca, cb, cc) = (cov[(0, 0)] + cfg.blur, cov[(0, 1)], cov[(1, 1)] + cfg.blur);
    let det = ca * cc - cb * cb;
    if !(det > 0.0) || !det.is_finite() {
        return Err(Cull::Degenerate);
    }
    let conic = [cc / det, -cb / det, ca / det];
    let mean = frame.pixel(&p);

    // Radius beyond which opacity·exp(-½ dᵀΣ⁻¹d) < alpha_min in every direction.
    let lambda_max = 0.5 * (ca + cc) + (0.25 * (ca - cc) * (ca - cc) + cb * cb).sqrt();
    let radius = (2.0 * (opacity / cfg.alpha_min).ln() * lambda_max).sqrt();
    let x0 = (mean[0] - radius - 0.5).ceil().max(0.0);
    let y0 = (mean[1] - radius - 0.5).ceil().max(0.0);
    let x1 = (mean[0] + radius - 0.5).floor().min(frame.width as f64 - 1.0);
    let y1 = (mean[1] + radius - 0.5).floor().min(frame.height as f64 - 1.0);
    if !(x0 <= x1 && y0 <= y1) {
        return Err(Cull::Offscreen);
    }
    Ok(Splat {
        index,
        mean,
        cov: [ca, cb, cc],
        conic,
        opacity,
        depth: p.z,
        cam_point: [p.x, p.y, p.z],
        rect: [x0 as usize, y0 as usize, x1 as usize, y1 as usize],
    })
}

/// Screen-space gradients accumulated for one splat.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub(crate) struct ScreenGrad {
    pub mean: [f64; 2],
    pub conic: [f64; 3],
    pub opacity: f64,
    pub depth: f64,
}

impl ScreenGrad {
    pub fn add(&mut self, o: &ScreenGrad) {
        self.mean[0] += o.mean[0];
        self.mean[1] += o.mean[1];
        for k in 0..3 {
            self.conic[k] += o.conic[k];
        }
        self.opacity += o.opacity;
        self.depth += o.depth;
    }
}

pub(crate) struct GeometryGrad {
    pub center: [f64; 3],
    pub rotation: Quat,
    pub log_scale: [f64; 3],
    pub opacity_logit: f64,
}

/// Chain rule from screen-space splat gradients to the 3D parameters.
pub(crate) fn project_one_backward(
    frame: &Frame,
    splat: &Splat,
    rotation: &Quat,
    log_scale: &[f64; 3],
    g: &ScreenGrad,
) -> GeometryGrad {
    let o = splat.opacity;
    let opacity_logit = g.opacity * o * (1.0 - o);

    // conic = Σ⁻¹  ⇒  dΣ = -Σ⁻¹ dQ Σ⁻¹ (the off-diagonal b appears twice in Q).
    let [a, b, c] = splat.conic;
    let q = Matrix2::new(a, b, b, c);
    let gq = Matrix2::new(g.conic[0], 0.5 * g.conic[1], 0.5 * g.conic[1], g.conic[2]);
    let gs = -(q * gq * q);

    let p = Vector3::from(splat.cam_point);
    let (m3, r, s) = covariance_3d(rotation, log_scale);
    let mc = frame.w * m3 * frame.w.transpose();
    let j = frame.jacobian(&p);

    let d_j = 2.0 * gs * j * mc;
    let d_mc = j.transpose() * gs * j;
    let d_m3 = frame.w.transpose() * d_mc * frame.w;

    // M3 = L Lᵀ with L = R·diag(s).
    let l = r * Matrix3::from_diagonal(&s);
    let d_l = 2.0 * d_m3 * l;
    let mut d_r = Matrix3::zeros();
    let mut d_log_scale = [0.0; 3];
    for col in 0..3 {
        let mut ds = 0.0;
        for row in 0..3 {
            d_r[(row, col)] = d_l[(row, col)] * s[col];
            ds += d_l[(row, col)] * r[(row, col)];
        }
        d_log_scale[col] = ds * s[col];
    }
    let qn = math::normalize4(rotation);
    let d_qn = math::quat_to_mat_backward(&qn, &d_r);
    let d_rotation = math::normalize4_backward(rotation, &d_qn);

    let (x, y, z) = (p.x, p.y, p.z);
    let (fx, fy, sk) = (frame.fx, frame.fy, frame.skew);
    let iz = 1.0 / z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let [gu, gv] = g.mean;
    let mut dp = Vector3::new(
        gu * fx * iz,
        gu * sk * iz + gv * fy * iz,
        -gu * (fx * x + sk * y) * iz2 - gv * fy * y * iz2 + g.depth,
    );
    dp.x += d_j[(0, 2)] * (-fx * iz2);
    dp.y += d_j[(0, 2)] * (-sk * iz2) + d_j[(1, 2)] * (-fy * iz2);
    dp.z += d_j[(0, 0)] * (-fx * iz2)
        + d_j[(0, 1)] * (-sk * iz2)
        + d_j[(0, 2)] * (2.0 * (fx * x + sk * y) * iz3)
        + d_j[(1, 1)] * (-fy * iz2)
        + d_j[(1, 2)] * (2.0 * fy * y * iz3);
    let d_center = frame.w.transpose() * dp;

    GeometryGrad {
        center: [d_center.x, d_center.y, d_center.z],
        rotation: d_rotation,
        log_scale: d_log_scale,
        opacity_logit,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame() -> (Camera, Frame) {
        let cam = Camera::new(40.0, 44.0, 16.0, 12.0, 32, 24);
        let f = Frame::new(&cam);
        (cam, f)
    }

    #[test]
    fn on_axis_isotropic_projects_to_principal_point() {
        let (_, f) = frame();
        let cfg = RenderConfig::default();
        let s = project_one(&f, &cfg, 0, &[0.0, 0.0, 3.0], &math::QUAT_IDENTITY, &[-2.0; 3], 2.0)
            .unwrap();
        assert_eq!(s.mean, [16.0, 12.0]);
        assert_eq!(s.cov[1], 0.0);
        // Isotropic up to the per-axis focal lengths.
        let sigma2 = (-4.0f64).exp();
        assert!((s.cov[0] - (40.0 / 3.0f64).powi(2) * sigma2 - 0.3).abs() < 1e-12);
        assert!((s.cov[2] - (44.0 / 3.0f64).powi(2) * sigma2 - 0.3).abs() < 1e-12);
    }

    #[test]
    fn behind_near_plane_is_culled() {
        let (_, f) = frame();
        let cfg = RenderConfig::default();
        let r = project_one(&f, &cfg, 0, &[0.0, 0.0, 0.001], &math::QUAT_IDENTITY, &[-2.0; 3], 2.0);
        assert_eq!(r.unwrap_err(), Cull::Behind);
        let r = project_one(&f, &cfg, 0, &[0.0, 0.0, -1.0], &math::QUAT_IDENTITY, &[-2.0; 3], 2.0);
        assert_eq!(r.unwrap_err(), Cull::Behind);
    }

    #[test]
    fn far_off_screen_is_culled() {
        let (_, f) = frame();
        let cfg = RenderConfig::default();
        let r = project_one(&f, &cfg, 0, &[50.0, 0.0, 3.0], &math::QUAT_IDENTITY, &[-2.0; 3], 2.0);
        assert_eq!(r.unwrap_err(), Cull::Offscreen);
    }

    #[test]
    fn point_projection_backward_matches_fd() {
        let (cam, _) = frame();
        let cam = cam.with_pose(
            math::quat_to_mat(&math::normalize4(&[0.9, 0.1, -0.2, 0.05])),
            [0.1, -0.2, 0.5],
        );
        let p = [0.3, -0.4, 3.0];
        let g = [0.7, -1.3];
        let a = project_point_backward(&cam, p, g);
        for k in 0..3 {
            let eps = 1e-6;
            let mut pp = p;
            let mut pm = p;
            pp[k] += eps;
            pm[k] -= eps;
            let fp = project_point(&cam, pp, 0.01).unwrap();
            let fm = project_point(&cam, pm, 0.01).unwrap();
            let n = ((fp[0] - fm[0]) * g[0] + (fp[1] - fm[1]) * g[1]) / (2.0 * eps);
            assert!((a[k] - n).abs() < 1e-6 * n.abs().max(1.0));
        }
    }
}
