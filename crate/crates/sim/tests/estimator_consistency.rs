//! The estimator's geometric model evaluated at simulator ground truth must
//! explain the rendered images: projected pixels agree with ray-traced ones
//! and photometric residuals are close to zero.

use nalgebra::Vector2;
use rsvio_core::camera::CameraModel;
use rsvio_core::image::GradientLevel;
use rsvio_core::lie::Pose3;
use rsvio_core::photometric::{
    evaluate_observation, host_capture_time, project_rs, HostPatch, HostPoint, PhotometricConfig,
};
use rsvio_core::state::{imu_pose_metric, Calibration, KeyframeState, ScaleGravity};
use rsvio_core::twist::TwistPriorTerm;
use rsvio_sim::render::{camera_pose, render_rs_image};
use rsvio_sim::{SimSpec, Simulation};

const SCALE: f64 = 2.0;

struct Truth {
    sim: Simulation,
    calib: Calibration,
    sg: ScaleGravity,
    t0: f64,
}

impl Truth {
    fn new() -> Self {
        let sim = Simulation::new(SimSpec::small(3.0)).unwrap();
        let calib = sim.spec.calibration(false).unwrap();
        let t0 = 0.5;
        let r_wc0 = camera_pose(&sim.trajectory, &calib.t_cam_imu, t0).rotation;
        Self {
            sg: ScaleGravity::new(SCALE, r_wc0),
            calib,
            sim,
            t0,
        }
    }

    fn camera_centre(&self, t: f64) -> nalgebra::Vector3<f64> {
        camera_pose(&self.sim.trajectory, &self.calib.t_cam_imu, t).translation
    }

    /// Keyframe state in the estimator's parametrization; the first keyframe
    /// (at `t0`) has the identity pose.
    fn state(&self, t: f64) -> KeyframeState {
        let k = self.sim.trajectory.at(t);
        let r_wc = camera_pose(&self.sim.trajectory, &self.calib.t_cam_imu, t).rotation;
        let rc = r_wc.inverse() * *self.sg.rotation();
        let cf = self
            .sg
            .rotation()
            .inverse()
            .rotate(&(self.camera_centre(t) - self.camera_centre(self.t0)))
            / SCALE;
        let mut st = KeyframeState::new(t, Pose3::new(rc, -rc.rotate(&cf)));
        st.velocity = k.velocity;
        st.twist = TwistPriorTerm::with_default_weight(k.angular_velocity).prior(&st, &self.sg, &self.calib);
        st
    }
}

#[test]
fn metric_chain_reproduces_ground_truth_pose() {
    let tr = Truth::new();
    for t in [0.5, 0.9, 1.7] {
        let est = imu_pose_metric(&tr.state(t), &tr.sg, &tr.calib);
        let gt = tr.sim.trajectory.pose(t);
        let shift = tr.camera_centre(tr.t0);
        assert!((est.translation + shift - gt.translation).norm() < 1e-12);
        assert!((est.rotation.matrix() - gt.rotation.matrix()).norm() < 1e-12);
    }
}

/// Pixel where a world point appears in the rolling-shutter image at `frame`,
/// by fixed-point iteration on the simulator's exact trajectory.
fn ray_traced_pixel(tr: &Truth, cam: &CameraModel, xw: &nalgebra::Vector3<f64>, frame: f64) -> Vector2<f64> {
    let mut u = Vector2::new(cam.cx, cam.cy);
    for _ in 0..20 {
        let t = frame + cam.rows_to_seconds(cam.capture_time(&u).unwrap());
        let pose = camera_pose(&tr.sim.trajectory, &tr.calib.t_cam_imu, t);
        u = cam.project(&pose.inverse().transform_point(xw)).unwrap();
    }
    u
}

#[test]
fn rolling_shutter_projection_matches_ray_tracing() {
    let tr = Truth::new();
    let cam = tr.calib.camera.clone();
    let (th, tt) = (tr.t0, tr.t0 + 0.25);
    let host = tr.state(th);
    let target = tr.state(tt);
    let rendered = render_rs_image(&tr.sim.spec.scene, &tr.sim.trajectory, &cam, &tr.calib.t_cam_imu, th).unwrap();
    let rs = PhotometricConfig::default();
    let gs = PhotometricConfig {
        rolling_shutter: false,
        ..rs
    };
    let (mut worst_rs, mut worst_gs) = (0.0f64, 0.0f64);
    let mut n = 0;
    for y in (20..236).step_by(24) {
        for x in (20..300).step_by(28) {
            let u = Vector2::new(x as f64, y as f64);
            let depth = rendered.depth[y * cam.width + x] as f64;
            let t_h = th + cam.rows_to_seconds(cam.capture_time(&u).unwrap());
            let xw =
                camera_pose(&tr.sim.trajectory, &tr.calib.t_cam_imu, t_h).transform_point(&(cam.bearing(&u) * depth));
            let truth = ray_traced_pixel(&tr, &cam, &xw, tt);
            if !cam.in_image(&truth, 4.0) {
                continue;
            }
            let point = HostPoint {
                pixel: u,
                idepth: SCALE / depth,
                host_time: host_capture_time(&cam, &u, &rs).unwrap(),
            };
            let p = project_rs(&point, &host, &target, &cam, &rs).unwrap();
            worst_rs = worst_rs.max((p.pixel - truth).norm());
            let mut h0 = host;
            let mut t0 = target;
            h0.twist = Default::default();
            t0.twist = Default::default();
            let point_gs = HostPoint {
                host_time: 0.0,
                ..point
            };
            let q = project_rs(&point_gs, &h0, &t0, &cam, &gs).unwrap();
            worst_gs = worst_gs.max((q.pixel - truth).norm());
            n += 1;
        }
    }
    assert!(n > 50, "only {n} points visible");
    assert!(worst_rs < 0.02, "rolling-shutter model error {worst_rs} px");
    assert!(worst_gs > 0.5, "global-shutter model error only {worst_gs} px");
}

#[test]
fn photometric_residuals_vanish_at_ground_truth() {
    let tr = Truth::new();
    let cam = tr.calib.camera.clone();
    let (th, tt) = (tr.t0, tr.t0 + 0.2);
    let host = tr.state(th);
    let target = tr.state(tt);
    let scene = &tr.sim.spec.scene;
    let hr = render_rs_image(scene, &tr.sim.trajectory, &cam, &tr.calib.t_cam_imu, th).unwrap();
    let ti = tr.sim.render(tt, false).unwrap();
    let host_level = GradientLevel::from_image(&hr.image);
    let target_level = GradientLevel::from_image(&ti);
    let cfg = PhotometricConfig::default();
    let mut energies = Vec::new();
    for y in (10..246).step_by(7) {
        for x in (10..310).step_by(7) {
            let u = Vector2::new(x as f64, y as f64);
            if host_level.gradient_sq(x, y) < 64.0 {
                continue;
            }
            let point = HostPoint {
                pixel: u,
                idepth: SCALE / hr.depth[y * cam.width + x] as f64,
                host_time: host_capture_time(&cam, &u, &cfg).unwrap(),
            };
            let patch = HostPatch::sample(&host_level, &u, &cfg).unwrap();
            if let Ok(r) = evaluate_observation(&point, &patch, &host, &target, &target_level, &cam, &cfg) {
                let mean_abs = r.residuals.iter().map(|v| v.abs()).sum::<f64>() / r.residuals.len() as f64;
                energies.push(mean_abs);
            }
        }
    }
    assert!(energies.len() > 100);
    energies.sort_by(f64::total_cmp);
    let median = energies[energies.len() / 2];
    assert!(median < 1.0, "median |r| = {median}");
}
