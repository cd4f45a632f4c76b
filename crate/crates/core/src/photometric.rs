//! Rolling-shutter projection of host-frame points into target frames and the
//! photometric residual built on top of it.
//!
//! A keyframe's pose at capture time `t` (sensor rows relative to the middle
//! row) is `exp(xi t) T0`. A point observed in the host at pixel `u_h` was
//! seen at the host time `t_h = c(u_h)`; its projection into a target must
//! satisfy `t = c(u(t))`, which is solved by fixed-point iteration and
//! differentiated implicitly.

use crate::camera::{CameraError, CameraModel};
use crate::image::IntensitySampler;
use crate::lie::{exp_se3, hat, se3_left_jacobian, Pose3, Twist6};
use crate::state::KeyframeState;
use nalgebra::{Matrix3, SMatrix, SVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Eight-pixel residual pattern, offsets in pixels.
pub const PATTERN: [[f64; 2]; 8] = [
    [0.0, -2.0],
    [-1.0, -1.0],
    [1.0, -1.0],
    [-2.0, 0.0],
    [0.0, 0.0],
    [2.0, 0.0],
    [-1.0, 1.0],
    [0.0, 1.0],
];
pub const PATTERN_SIZE: usize = PATTERN.len();
/// Pixels the pattern reaches beyond its centre.
pub const PATTERN_RADIUS: f64 = 2.0;

/// Number of parameters touched by one observation.
pub const OBS_DIM: usize = 29;

/// Column offsets inside an observation Jacobian row.
pub mod cols {
    pub const HOST_POSE: usize = 0;
    pub const HOST_TWIST: usize = 6;
    pub const HOST_AFFINE: usize = 12;
    pub const TARGET_POSE: usize = 14;
    pub const TARGET_TWIST: usize = 20;
    pub const TARGET_AFFINE: usize = 26;
    pub const IDEPTH: usize = 28;
    /// Size of the per-frame part (pose, twist, affine).
    pub const FRAME: usize = 14;
}

pub type ObsRow = SVector<f64, OBS_DIM>;
type Matrix2x6 = SMatrix<f64, 2, 6>;
type Matrix3x6 = SMatrix<f64, 3, 6>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhotometricConfig {
    /// Huber threshold in intensity units.
    pub huber_threshold: f64,
    /// Constant of the gradient-dependent weight `c^2 / (c^2 + |grad I|^2)`.
    pub gradient_weight_c: f64,
    pub rs_max_iterations: usize,
    /// Convergence tolerance of the rolling-shutter fixed point, in rows.
    pub rs_tolerance_rows: f64,
    /// Model per-row capture times; when false every time is zero.
    pub rolling_shutter: bool,
}

impl Default for PhotometricConfig {
    fn default() -> Self {
        Self {
            huber_threshold: 9.0,
            gradient_weight_c: 50.0,
            rs_max_iterations: 5,
            rs_tolerance_rows: 1e-3,
            rolling_shutter: true,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProjectionError {
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error("rolling-shutter fixed point did not converge (last step {0:.3e} rows)")]
    NotConverged(f64),
    #[error("projection leaves the image")]
    OutOfImage,
}

/// Pose of a keyframe at capture time `t` (sensor rows).
pub fn pose_at_time(pose: &Pose3, twist: &Twist6, t: f64) -> Pose3 {
    exp_se3(twist, t) * *pose
}

/// Capture time (sensor rows) at which a host pixel was observed.
pub fn host_capture_time(cam: &CameraModel, pixel: &Vector2<f64>, cfg: &PhotometricConfig) -> Result<f64, CameraError> {
    if !cfg.rolling_shutter {
        return Ok(0.0);
    }
    Ok(cam.sensor_time_with_gradient(pixel)?.0)
}

/// Host-side description of a point needed for projection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HostPoint {
    pub pixel: Vector2<f64>,
    pub idepth: f64,
    /// Capture time of `pixel` in the host, sensor rows.
    pub host_time: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct RsProjection {
    pub pixel: Vector2<f64>,
    /// Target capture time, sensor rows.
    pub time: f64,
    pub iterations: usize,
    /// Point in the target camera frame at `time`.
    pub point_target: Vector3<f64>,
    intermediates: Intermediates,
}

#[derive(Clone, Copy, Debug)]
struct Intermediates {
    x_host: Vector3<f64>,
    z: Vector3<f64>,
    y: Vector3<f64>,
}

/// Derivatives of the projected pixel, including the dependence of the
/// capture time on the pixel.
#[derive(Clone, Copy, Debug)]
pub struct ProjectionJacobian {
    pub d_host_pose: Matrix2x6,
    pub d_host_twist: Matrix2x6,
    pub d_target_pose: Matrix2x6,
    pub d_target_twist: Matrix2x6,
    pub d_idepth: Vector2<f64>,
}

fn capture_time(
    cam: &CameraModel,
    u: &Vector2<f64>,
    cfg: &PhotometricConfig,
) -> Result<(f64, Vector2<f64>), CameraError> {
    if cfg.rolling_shutter {
        cam.sensor_time_with_gradient(u)
    } else {
        Ok((0.0, Vector2::zeros()))
    }
}

/// Solves the rolling-shutter constraint for one point.
pub fn project_rs(
    point: &HostPoint,
    host: &KeyframeState,
    target: &KeyframeState,
    cam: &CameraModel,
    cfg: &PhotometricConfig,
) -> Result<RsProjection, ProjectionError> {
    let x_host = cam.unproject(&point.pixel, point.idepth)?;
    let z = exp_se3(&(-host.twist), point.host_time).transform_point(&x_host);
    let x_world = host.pose.inverse().transform_point(&z);
    let y = target.pose.transform_point(&x_world);

    let mut t = capture_time(cam, &cam.project(&y)?, cfg)?.0;
    let mut iterations = 0;
    loop {
        let x_t = exp_se3(&target.twist, t).transform_point(&y);
        let u = cam.project(&x_t)?;
        let (t_new, _) = capture_time(cam, &u, cfg)?;
        iterations += 1;
        let step = (t_new - t).abs();
        t = t_new;
        if step < cfg.rs_tolerance_rows || target.twist == Twist6::zeros() {
            // the pixel must correspond to the converged time
            let x_t = exp_se3(&target.twist, t).transform_point(&y);
            let u = cam.project(&x_t)?;
            return Ok(RsProjection {
                pixel: u,
                time: t,
                iterations,
                point_target: x_t,
                intermediates: Intermediates { x_host, z, y },
            });
        }
        if iterations >= cfg.rs_max_iterations {
            return Err(ProjectionError::NotConverged(step));
        }
    }
}

/// `[I | -[p]x]`: derivative of `exp(delta) p` at `delta = 0`.
fn point_jac(p: &Vector3<f64>) -> Matrix3x6 {
    let mut m = Matrix3x6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-hat(p)));
    m
}

/// Implicitly differentiated Jacobian of a converged projection.
pub fn projection_jacobian(
    proj: &RsProjection,
    point: &HostPoint,
    host: &KeyframeState,
    target: &KeyframeState,
    cam: &CameraModel,
    cfg: &PhotometricConfig,
) -> Result<ProjectionJacobian, ProjectionError> {
    let Intermediates { x_host, z, y } = proj.intermediates;
    let t = proj.time;
    let th = point.host_time;
    let x_t = proj.point_target;
    let (_, jpi) = cam.project_with_jacobian(&x_t)?;
    let (_, grad_c) = capture_time(cam, &proj.pixel, cfg)?;

    let xi_t = target.twist;
    let step_t = exp_se3(&xi_t, t);
    let r_step_t = *step_t.rotation.matrix();
    let step_h = exp_se3(&(-host.twist), th);
    let r_step_h = *step_h.rotation.matrix();
    let m = r_step_t * target.pose.rotation.matrix() * host.pose.rotation.matrix().transpose();

    // d X_t / d t = rho + omega x X_t
    let dx_dt = xi_t.fixed_rows::<3>(0) + xi_t.fixed_rows::<3>(3).cross(&x_t);
    let du_dt = jpi * dx_dt;
    let denom = 1.0 - grad_c.dot(&du_dt);
    if denom.abs() < 1e-6 {
        return Err(ProjectionError::NotConverged(f64::INFINITY));
    }

    let jl_t = se3_left_jacobian(&(xi_t * t));
    let jl_h = se3_left_jacobian(&(-host.twist * th));

    let dx_target_pose: Matrix3x6 = r_step_t * point_jac(&y);
    let dx_target_twist: Matrix3x6 = point_jac(&x_t) * jl_t * t;
    let dx_host_pose: Matrix3x6 = -m * point_jac(&z);
    let dx_host_twist: Matrix3x6 = m * point_jac(&z) * jl_h * (-th);
    let dx_idepth: Vector3<f64> = m * r_step_h * (-x_host / point.idepth);

    // total derivative: du = du_explicit + du_dt * dt, dt = grad_c . du
    let chain6 = |dx: &Matrix3x6| -> Matrix2x6 {
        let explicit = jpi * dx;
        let dt = grad_c.transpose() * explicit / denom;
        explicit + du_dt * dt
    };
    let explicit_d = jpi * dx_idepth;
    let dt_d = grad_c.dot(&explicit_d) / denom;
    Ok(ProjectionJacobian {
        d_host_pose: chain6(&dx_host_pose),
        d_host_twist: chain6(&dx_host_twist),
        d_target_pose: chain6(&dx_target_pose),
        d_target_twist: chain6(&dx_target_twist),
        d_idepth: explicit_d + du_dt * dt_d,
    })
}

/// Huber energy `r^2` inside the threshold, `2k|r| - k^2` outside.
#[inline]
pub fn huber_energy(r: f64, k: f64) -> f64 {
    let a = r.abs();
    if a <= k {
        r * r
    } else {
        2.0 * k * a - k * k
    }
}

/// IRLS weight matching [`huber_energy`].
#[inline]
pub fn huber_weight(r: f64, k: f64) -> f64 {
    let a = r.abs();
    if a <= k {
        1.0
    } else {
        k / a
    }
}

/// Host intensities and gradient weights for a point's pattern.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HostPatch {
    pub intensity: [f64; PATTERN_SIZE],
    pub weight: [f64; PATTERN_SIZE],
}

impl HostPatch {
    pub fn sample<S: IntensitySampler>(image: &S, pixel: &Vector2<f64>, cfg: &PhotometricConfig) -> Option<Self> {
        let mut intensity = [0.0; PATTERN_SIZE];
        let mut weight = [0.0; PATTERN_SIZE];
        let c2 = cfg.gradient_weight_c * cfg.gradient_weight_c;
        for (k, o) in PATTERN.iter().enumerate() {
            let (v, g) = image.sample(pixel.x + o[0], pixel.y + o[1])?;
            intensity[k] = v;
            weight[k] = c2 / (c2 + g.norm_squared());
        }
        Some(Self { intensity, weight })
    }
}

/// Linearized photometric observation. Each pattern pixel contributes one
/// row `rows[k]` with residual `residuals[k]` and combined robust and
/// gradient weight `weights[k]`.
#[derive(Clone, Debug)]
pub struct PhotoLinearization {
    pub residuals: [f64; PATTERN_SIZE],
    pub weights: [f64; PATTERN_SIZE],
    pub rows: [ObsRow; PATTERN_SIZE],
    pub energy: f64,
    pub projection: RsProjection,
}

/// Residuals of one observation without derivatives.
#[derive(Clone, Copy, Debug)]
pub struct PhotoResidual {
    pub residuals: [f64; PATTERN_SIZE],
    pub energy: f64,
    pub projection: RsProjection,
}

fn sample_target<S: IntensitySampler>(
    target_image: &S,
    u: &Vector2<f64>,
) -> Option<[(f64, Vector2<f64>); PATTERN_SIZE]> {
    let mut out = [(0.0, Vector2::zeros()); PATTERN_SIZE];
    for (k, o) in PATTERN.iter().enumerate() {
        out[k] = target_image.sample(u.x + o[0], u.y + o[1])?;
    }
    Some(out)
}

/// Residuals `I_t(u + o) - exp(a_t - a_h) I_h - (b_t - b_h)` and the weighted energy.
pub fn evaluate_observation<S: IntensitySampler>(
    point: &HostPoint,
    patch: &HostPatch,
    host: &KeyframeState,
    target: &KeyframeState,
    target_image: &S,
    cam: &CameraModel,
    cfg: &PhotometricConfig,
) -> Result<PhotoResidual, ProjectionError> {
    let projection = project_rs(point, host, target, cam, cfg)?;
    let samples = sample_target(target_image, &projection.pixel).ok_or(ProjectionError::OutOfImage)?;
    let gain = (target.affine.a - host.affine.a).exp();
    let offset = target.affine.b - host.affine.b;
    let mut residuals = [0.0; PATTERN_SIZE];
    let mut energy = 0.0;
    for k in 0..PATTERN_SIZE {
        let r = samples[k].0 - gain * patch.intensity[k] - offset;
        residuals[k] = r;
        energy += patch.weight[k] * huber_energy(r, cfg.huber_threshold);
    }
    Ok(PhotoResidual {
        residuals,
        energy,
        projection,
    })
}

/// Residuals, weights and Jacobian rows of one observation.
pub fn linearize_observation<S: IntensitySampler>(
    point: &HostPoint,
    patch: &HostPatch,
    host: &KeyframeState,
    target: &KeyframeState,
    target_image: &S,
    cam: &CameraModel,
    cfg: &PhotometricConfig,
) -> Result<PhotoLinearization, ProjectionError> {
    use cols::*;
    let projection = project_rs(point, host, target, cam, cfg)?;
    let samples = sample_target(target_image, &projection.pixel).ok_or(ProjectionError::OutOfImage)?;
    let jac = projection_jacobian(&projection, point, host, target, cam, cfg)?;
    let gain = (target.affine.a - host.affine.a).exp();
    let offset = target.affine.b - host.affine.b;

    let mut residuals = [0.0; PATTERN_SIZE];
    let mut weights = [0.0; PATTERN_SIZE];
    let mut rows = [ObsRow::zeros(); PATTERN_SIZE];
    let mut energy = 0.0;
    for k in 0..PATTERN_SIZE {
        let (value, grad) = samples[k];
        let r = value - gain * patch.intensity[k] - offset;
        residuals[k] = r;
        weights[k] = patch.weight[k] * huber_weight(r, cfg.huber_threshold);
        energy += patch.weight[k] * huber_energy(r, cfg.huber_threshold);

        let g = grad.transpose();
        let row = &mut rows[k];
        row.fixed_rows_mut::<6>(HOST_POSE)
            .copy_from(&(g * jac.d_host_pose).transpose());
        row.fixed_rows_mut::<6>(HOST_TWIST)
            .copy_from(&(g * jac.d_host_twist).transpose());
        row.fixed_rows_mut::<6>(TARGET_POSE)
            .copy_from(&(g * jac.d_target_pose).transpose());
        row.fixed_rows_mut::<6>(TARGET_TWIST)
            .copy_from(&(g * jac.d_target_twist).transpose());
        row[IDEPTH] = grad.dot(&jac.d_idepth);
        let da = gain * patch.intensity[k];
        row[HOST_AFFINE] = da;
        row[HOST_AFFINE + 1] = 1.0;
        row[TARGET_AFFINE] = -da;
        row[TARGET_AFFINE + 1] = -1.0;
    }
    Ok(PhotoLinearization {
        residuals,
        weights,
        rows,
        energy,
        projection,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::RadTan;
    use crate::lie::Rot3;
    use crate::state::AffineBrightness;
    use proptest::prelude::*;

    /// Smooth analytic texture with an exact gradient.
    struct Analytic {
        w: usize,
        h: usize,
    }

    impl IntensitySampler for Analytic {
        fn width(&self) -> usize {
            self.w
        }
        fn height(&self) -> usize {
            self.h
        }
        fn sample(&self, x: f64, y: f64) -> Option<(f64, Vector2<f64>)> {
            if x < 0.0 || y < 0.0 || x > (self.w - 1) as f64 || y > (self.h - 1) as f64 {
                return None;
            }
            let v = 120.0 + 50.0 * (0.11 * x).sin() * (0.07 * y).cos() + 30.0 * (0.05 * x + 0.13 * y).sin();
            let gx = 50.0 * 0.11 * (0.11 * x).cos() * (0.07 * y).cos() + 30.0 * 0.05 * (0.05 * x + 0.13 * y).cos();
            let gy = -50.0 * 0.07 * (0.11 * x).sin() * (0.07 * y).sin() + 30.0 * 0.13 * (0.05 * x + 0.13 * y).cos();
            Some((v, Vector2::new(gx, gy)))
        }
    }

    fn camera(td: f64) -> CameraModel {
        CameraModel::new(
            230.0,
            225.0,
            161.0,
            127.0,
            RadTan {
                k1: -0.05,
                k2: 0.01,
                p1: 1e-3,
                p2: -5e-4,
            },
            320,
            256,
            td,
        )
        .unwrap()
    }

    fn tight() -> PhotometricConfig {
        PhotometricConfig {
            rs_max_iterations: 100,
            rs_tolerance_rows: 1e-13,
            ..Default::default()
        }
    }

    #[test]
    fn pose_at_time_examples() {
        let p = exp_se3(&Twist6::new(0.1, 0.2, -0.3, 0.4, -0.1, 0.2), 1.0);
        let xi = Twist6::new(0.01, -0.02, 0.005, 0.002, 0.003, -0.001);
        assert_eq!(pose_at_time(&p, &xi, 0.0).matrix(), p.matrix());
        assert_eq!(pose_at_time(&p, &Twist6::zeros(), 37.0).matrix(), p.matrix());
        let expected = exp_se3(&(xi * 5.0), 1.0).matrix() * p.matrix();
        assert!((pose_at_time(&p, &xi, 5.0).matrix() - expected).abs().max() < 1e-12);
    }

    #[test]
    fn zero_twist_reduces_to_global_shutter() {
        let cam = camera(3e-5);
        let cfg = PhotometricConfig::default();
        let host = KeyframeState::new(0.0, Pose3::identity());
        let target = KeyframeState::new(0.1, exp_se3(&Twist6::new(0.05, 0.0, 0.02, 0.0, 0.03, 0.0), 1.0));
        let px = Vector2::new(100.0, 80.0);
        let point = HostPoint {
            pixel: px,
            idepth: 0.4,
            host_time: 0.0,
        };
        let proj = project_rs(&point, &host, &target, &cam, &cfg).unwrap();
        let gs = cam
            .project(&target.pose.transform_point(&cam.unproject(&px, 0.4).unwrap()))
            .unwrap();
        assert!((proj.pixel - gs).norm() < 1e-12);
        assert!((proj.time - cam.capture_time(&gs).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn self_projection_is_identity() {
        let cam = camera(3e-5);
        let cfg = PhotometricConfig::default();
        let kf = KeyframeState::new(0.0, exp_se3(&Twist6::new(0.3, 0.1, 0.0, 0.2, 0.0, 0.1), 1.0));
        let px = Vector2::new(200.0, 40.0);
        let point = HostPoint {
            pixel: px,
            idepth: 0.7,
            host_time: host_capture_time(&cam, &px, &cfg).unwrap(),
        };
        let proj = project_rs(&point, &kf, &kf, &cam, &cfg).unwrap();
        assert!((proj.pixel - px).norm() < 1e-10);
    }

    #[test]
    fn moving_self_projection_reproduces_host_time() {
        // A point observed by a moving camera projects back onto itself with
        // the host capture time as the fixed point.
        let cam = camera(3e-5);
        let cfg = tight();
        let mut kf = KeyframeState::new(0.0, Pose3::identity());
        kf.twist = Twist6::new(2e-4, -1e-4, 5e-5, 3e-5, -2e-5, 1e-5);
        let px = Vector2::new(60.0, 30.0);
        let th = host_capture_time(&cam, &px, &cfg).unwrap();
        let point = HostPoint {
            pixel: px,
            idepth: 0.5,
            host_time: th,
        };
        let proj = project_rs(&point, &kf, &kf, &cam, &cfg).unwrap();
        assert!((proj.pixel - px).norm() < 1e-9);
        assert!((proj.time - th).abs() < 1e-9);
    }

    #[test]
    fn identical_frames_have_zero_energy() {
        let cam = camera(3e-5);
        let cfg = PhotometricConfig::default();
        let img = Analytic { w: 320, h: 256 };
        let kf = KeyframeState::new(0.0, Pose3::identity());
        let px = Vector2::new(150.0, 100.0);
        let point = HostPoint {
            pixel: px,
            idepth: 1.0,
            host_time: host_capture_time(&cam, &px, &cfg).unwrap(),
        };
        let patch = HostPatch::sample(&img, &px, &cfg).unwrap();
        let r = evaluate_observation(&point, &patch, &kf, &kf, &img, &cam, &cfg).unwrap();
        assert!(r.energy < 1e-18);
    }

    #[test]
    fn global_shutter_mode_is_bit_identical_to_zero_time() {
        let cam = camera(0.0);
        let rs = PhotometricConfig::default();
        let gs = PhotometricConfig {
            rolling_shutter: false,
            ..rs
        };
        let img = Analytic { w: 320, h: 256 };
        let host = KeyframeState::new(0.0, Pose3::identity());
        let target = KeyframeState::new(0.1, exp_se3(&Twist6::new(0.02, 0.01, 0.0, 0.0, 0.01, 0.0), 1.0));
        let px = Vector2::new(150.0, 100.0);
        let patch = HostPatch::sample(&img, &px, &rs).unwrap();
        let pa = HostPoint {
            pixel: px,
            idepth: 0.5,
            host_time: host_capture_time(&cam, &px, &rs).unwrap(),
        };
        let pb = HostPoint {
            pixel: px,
            idepth: 0.5,
            host_time: host_capture_time(&cam, &px, &gs).unwrap(),
        };
        let a = evaluate_observation(&pa, &patch, &host, &target, &img, &cam, &rs).unwrap();
        let b = evaluate_observation(&pb, &patch, &host, &target, &img, &cam, &gs).unwrap();
        assert_eq!(a.energy.to_bits(), b.energy.to_bits());
    }

    #[test]
    fn huber_examples() {
        assert_eq!(huber_energy(3.0, 9.0), 9.0);
        assert_eq!(huber_energy(-12.0, 9.0), 2.0 * 9.0 * 12.0 - 81.0);
        assert_eq!(huber_weight(12.0, 9.0), 0.75);
        // continuity at the threshold
        assert!((huber_energy(9.0 + 1e-12, 9.0) - 81.0).abs() < 1e-9);
    }

    #[test]
    fn out_of_image_and_behind_camera() {
        let cam = camera(3e-5);
        let cfg = PhotometricConfig::default();
        let img = Analytic { w: 320, h: 256 };
        let host = KeyframeState::new(0.0, Pose3::identity());
        let px = Vector2::new(150.0, 100.0);
        let patch = HostPatch::sample(&img, &px, &cfg).unwrap();
        let point = HostPoint {
            pixel: px,
            idepth: 1.0,
            host_time: 0.0,
        };
        let aside = KeyframeState::new(0.0, Pose3::from_translation(Vector3::new(5.0, 0.0, 0.0)));
        assert!(evaluate_observation(&point, &patch, &host, &aside, &img, &cam, &cfg).is_err());
        let behind = KeyframeState::new(0.0, Pose3::from_translation(Vector3::new(0.0, 0.0, -3.0)));
        assert!(matches!(
            project_rs(&point, &host, &behind, &cam, &cfg),
            Err(ProjectionError::Camera(_))
        ));
    }

    fn frame(a: [f64; 6], twist: [f64; 6], affine: (f64, f64)) -> KeyframeState {
        let mut kf = KeyframeState::new(0.0, exp_se3(&Twist6::from(a), 1.0));
        kf.twist = Twist6::from(twist);
        kf.affine = AffineBrightness {
            a: affine.0,
            b: affine.1,
        };
        kf
    }

    /// Applies a perturbation laid out like an observation row.
    fn perturbed(
        host: &KeyframeState,
        target: &KeyframeState,
        idepth: f64,
        d: &ObsRow,
    ) -> (KeyframeState, KeyframeState, f64) {
        use cols::*;
        let apply = |kf: &KeyframeState, o: usize| {
            let mut k = *kf;
            k.pose = exp_se3(&d.fixed_rows::<6>(o).into_owned(), 1.0) * k.pose;
            k.twist += d.fixed_rows::<6>(o + 6);
            k.affine.a += d[o + 12];
            k.affine.b += d[o + 13];
            k
        };
        (apply(host, HOST_POSE), apply(target, TARGET_POSE), idepth + d[IDEPTH])
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn jacobian_matches_finite_differences(
            rel in prop::array::uniform6(-0.08..0.08f64),
            tw_h in prop::array::uniform6(-3e-4..3e-4f64),
            tw_t in prop::array::uniform6(-3e-4..3e-4f64),
            px in 60.0..260.0f64, py in 50.0..200.0f64,
            idepth in 0.2..1.0f64,
            aff in (-0.2..0.2f64, -5.0..5.0f64),
        ) {
            let cam = camera(3e-5);
            let cfg = tight();
            let img = Analytic { w: 320, h: 256 };
            let host = frame([0.1, -0.2, 0.05, 0.02, 0.1, -0.05], tw_h, (0.05, 1.0));
            let rel_pose = exp_se3(&Twist6::from(rel), 1.0);
            let mut target = frame([0.0; 6], tw_t, aff);
            target.pose = rel_pose * host.pose;
            let pixel = Vector2::new(px, py);
            let th = host_capture_time(&cam, &pixel, &cfg).unwrap();
            let patch = HostPatch::sample(&img, &pixel, &cfg).unwrap();
            let point = HostPoint { pixel, idepth, host_time: th };
            let lin = match linearize_observation(&point, &patch, &host, &target, &img, &cam, &cfg) {
                Ok(l) => l,
                Err(_) => return Ok(()),
            };
            let h = 1e-5;
            // Twist columns move the pose by roughly 100 rows per unit; use a smaller step there.
            for c in 0..OBS_DIM {
                let step = if (6..12).contains(&c) || (20..26).contains(&c) { h * 1e-2 } else { h };
                let mut d = ObsRow::zeros();
                d[c] = step;
                let (hp, tp, ip) = perturbed(&host, &target, idepth, &d);
                let (hm, tm, im) = perturbed(&host, &target, idepth, &(-d));
                let ep = evaluate_observation(&HostPoint { idepth: ip, ..point }, &patch, &hp, &tp, &img, &cam, &cfg);
                let em = evaluate_observation(&HostPoint { idepth: im, ..point }, &patch, &hm, &tm, &img, &cam, &cfg);
                let (Ok(ep), Ok(em)) = (ep, em) else { continue };
                for k in 0..PATTERN_SIZE {
                    let num = (ep.residuals[k] - em.residuals[k]) / (2.0 * step);
                    let ana = lin.rows[k][c];
                    prop_assert!(
                        (num - ana).abs() <= 1e-4 * ana.abs().max(1.0),
                        "col {} pattern {}: num {} ana {}", c, k, num, ana
                    );
                }
            }
        }

        #[test]
        fn fixed_point_converges_quickly(
            rel in prop::array::uniform6(-0.1..0.1f64),
            tw in prop::array::uniform6(-1.0..1.0f64),
            px in 20.0..300.0f64, py in 20.0..236.0f64,
        ) {
            // Per-row twists of fast handheld motion: ~3 m/s and ~5 rad/s at 30 us/row.
            let td = 3e-5;
            let cam = camera(td);
            let cfg = PhotometricConfig::default();
            let host = KeyframeState::new(0.0, Pose3::identity());
            let mut target = KeyframeState::new(0.0, exp_se3(&Twist6::from(rel), 1.0));
            let tw = Twist6::from(tw);
            target.twist = Twist6::new(3.0 * tw[0], 3.0 * tw[1], 3.0 * tw[2], 5.0 * tw[3], 5.0 * tw[4], 5.0 * tw[5]) * td;
            let point = HostPoint { pixel: Vector2::new(px, py), idepth: 0.5, host_time: 0.0 };
            match project_rs(&point, &host, &target, &cam, &cfg) {
                Ok(p) => prop_assert!(p.iterations <= 5),
                Err(ProjectionError::Camera(_)) => {}
                Err(e) => prop_assert!(false, "{}", e),
            }
        }
    }

    #[test]
    fn rotation_only_relative_pose_is_depth_independent() {
        let cam = camera(0.0);
        let cfg = PhotometricConfig::default();
        let host = KeyframeState::new(0.0, Pose3::identity());
        let target = KeyframeState::new(0.0, Pose3::from_rotation(Rot3::ry(0.05)));
        let px = Vector2::new(140.0, 110.0);
        let a = project_rs(
            &HostPoint {
                pixel: px,
                idepth: 0.1,
                host_time: 0.0,
            },
            &host,
            &target,
            &cam,
            &cfg,
        )
        .unwrap();
        let b = project_rs(
            &HostPoint {
                pixel: px,
                idepth: 2.0,
                host_time: 0.0,
            },
            &host,
            &target,
            &cam,
            &cfg,
        )
        .unwrap();
        assert!((a.pixel - b.pixel).norm() < 1e-10);
    }
}
