//! Per-keyframe optimization variables and the coordinate chain between the
//! non-metric visual world and the metric, gravity-aligned IMU world.
//!
//! Frames: `Wm` metric world, `Wf` world with free scale, `Cm`/`Cf` metric and
//! free-scale camera, `I` IMU. Camera poses `T_CfWf` are optimized directly;
//! IMU poses `T_WmI` are derived through `T_WmWf` (scale `s`, rotation `R_g`),
//! the pure scale `T_CmCf = s` and the calibrated extrinsic `T_CmI`.

use crate::camera::CameraModel;
use crate::lie::{hat, Pose3, Rot3, ScaledRot, Twist6};
use nalgebra::{Matrix3, Matrix3x2, Matrix3x6, Vector3, Vector6};
use thiserror::Error;

pub const STANDARD_GRAVITY: f64 = 9.81;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("gravity magnitude {0:.4} m/s^2 outside [9.5, 10.1]")]
    Gravity(f64),
    #[error(transparent)]
    Camera(#[from] crate::camera::CameraError),
}

/// Accelerometer and gyroscope biases.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ImuBias {
    /// m/s^2
    pub acc: Vector3<f64>,
    /// rad/s
    pub gyro: Vector3<f64>,
}

impl ImuBias {
    pub fn new(acc: Vector3<f64>, gyro: Vector3<f64>) -> Self {
        Self { acc, gyro }
    }

    /// `[b_a; b_g]`
    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.acc.x,
            self.acc.y,
            self.acc.z,
            self.gyro.x,
            self.gyro.y,
            self.gyro.z,
        )
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self::new(v.fixed_rows::<3>(0).into_owned(), v.fixed_rows::<3>(3).into_owned())
    }
}

/// Affine brightness transfer `I -> exp(a) I + b` relative to a reference.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AffineBrightness {
    pub a: f64,
    pub b: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KeyframeState {
    /// Seconds since the dataset epoch; the mid-row capture time.
    pub timestamp: f64,
    /// World-to-camera pose at the middle row, `T_CfWf`.
    pub pose: Pose3,
    /// Constant camera twist in free-scale units per row.
    pub twist: Twist6,
    /// IMU velocity in the metric world, m/s.
    pub velocity: Vector3<f64>,
    pub bias: ImuBias,
    pub affine: AffineBrightness,
}

impl KeyframeState {
    pub fn new(timestamp: f64, pose: Pose3) -> Self {
        Self {
            timestamp,
            pose,
            twist: Twist6::zeros(),
            velocity: Vector3::zeros(),
            bias: ImuBias::default(),
            affine: AffineBrightness::default(),
        }
    }
}

/// The metric-from-free world transform `T_WmWf`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ScaleGravity {
    pub transform: ScaledRot,
}

impl ScaleGravity {
    pub fn new(scale: f64, rotation: Rot3) -> Self {
        Self {
            transform: ScaledRot::new(scale, rotation),
        }
    }

    pub fn scale(&self) -> f64 {
        self.transform.scale
    }

    pub fn rotation(&self) -> &Rot3 {
        &self.transform.rotation
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    /// IMU to metric camera, `T_CmI`.
    pub t_cam_imu: Pose3,
    pub camera: CameraModel,
    /// Gravity in the metric world, m/s^2.
    pub gravity: Vector3<f64>,
}

impl Calibration {
    pub fn new(t_cam_imu: Pose3, camera: CameraModel) -> Self {
        Self {
            t_cam_imu,
            camera,
            gravity: Vector3::new(0.0, 0.0, -STANDARD_GRAVITY),
        }
    }

    pub fn validate(&self) -> Result<(), CalibrationError> {
        let g = self.gravity.norm();
        if !(9.5..=10.1).contains(&g) {
            return Err(CalibrationError::Gravity(g));
        }
        self.camera.validate()?;
        Ok(())
    }
}

/// IMU state in the metric world.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricState {
    pub rotation: Rot3,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub bias: ImuBias,
}

/// `T_WmI` of a keyframe from its camera pose and the current scale/gravity.
pub fn imu_pose_metric(kf: &KeyframeState, sg: &ScaleGravity, calib: &Calibration) -> Pose3 {
    let rg = sg.rotation().matrix();
    let rc = kf.pose.rotation.matrix();
    let rci = calib.t_cam_imu.rotation.matrix();
    let rot = rg * rc.transpose() * rci;
    let pos = rg * rc.transpose() * (calib.t_cam_imu.translation - sg.scale() * kf.pose.translation);
    Pose3::new(Rot3::from_matrix_unchecked(rot), pos)
}

/// `R_IWm = R_CmI^-1 R_CmCf R_CfWf R_WmWf^-1` with `R_CmCf = I`.
pub fn rotation_imu_from_world(kf: &KeyframeState, sg: &ScaleGravity, calib: &Calibration) -> Rot3 {
    calib.t_cam_imu.rotation.inverse() * kf.pose.rotation * sg.rotation().inverse()
}

pub fn metric_state(kf: &KeyframeState, sg: &ScaleGravity, calib: &Calibration) -> MetricState {
    let pose = imu_pose_metric(kf, sg, calib);
    MetricState {
        rotation: pose.rotation,
        position: pose.translation,
        velocity: kf.velocity,
        bias: kf.bias,
    }
}

/// Camera pose `T_CfWf` that reproduces a given metric IMU pose.
pub fn camera_pose_from_imu(t_wm_i: &Pose3, sg: &ScaleGravity, calib: &Calibration) -> Pose3 {
    let rg = sg.rotation().matrix();
    let rci = calib.t_cam_imu.rotation.matrix();
    let rc = rci * t_wm_i.rotation.matrix().transpose() * rg;
    let tc = (calib.t_cam_imu.translation - rc * rg.transpose() * t_wm_i.translation) / sg.scale();
    Pose3::new(Rot3::from_matrix(&rc), tc)
}

/// Derivatives of the metric IMU pose w.r.t. the optimized parameters.
///
/// The rotation uses a right perturbation `R exp(theta)`; the position is
/// additive in the metric world. Camera poses are perturbed on the left,
/// the scale through `s exp(sigma)` and the gravity rotation through
/// `exp([g_x, g_y, 0]) R_g`.
#[derive(Clone, Copy, Debug)]
pub struct MetricPoseJacobians {
    pub dtheta_dpose: Matrix3x6<f64>,
    pub dp_dpose: Matrix3x6<f64>,
    pub dp_dlog_scale: Vector3<f64>,
    pub dtheta_dgravity: Matrix3x2<f64>,
    pub dp_dgravity: Matrix3x2<f64>,
}

pub fn metric_pose_jacobians(kf: &KeyframeState, sg: &ScaleGravity, calib: &Calibration) -> MetricPoseJacobians {
    let s = sg.scale();
    let rg = sg.rotation().matrix();
    let rc = kf.pose.rotation.matrix();
    let rci = calib.t_cam_imu.rotation.matrix();
    let rgrct = rg * rc.transpose();
    let imu = imu_pose_metric(kf, sg, calib);

    let mut dtheta_dpose = Matrix3x6::zeros();
    dtheta_dpose.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-rci.transpose()));
    let mut dp_dpose = Matrix3x6::zeros();
    dp_dpose.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-s * rgrct));
    dp_dpose
        .fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(rgrct * hat(&calib.t_cam_imu.translation)));
    let dp_dlog_scale = -s * rgrct * kf.pose.translation;

    let rt: Matrix3<f64> = imu.rotation.matrix().transpose();
    let dtheta_dgravity = rt.fixed_columns::<2>(0).into_owned();
    let dp_dgravity = (-hat(&imu.translation)).fixed_columns::<2>(0).into_owned();
    MetricPoseJacobians {
        dtheta_dpose,
        dp_dpose,
        dp_dlog_scale,
        dtheta_dgravity,
        dp_dgravity,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::exp_se3;
    use nalgebra::Matrix4;
    use proptest::prelude::*;

    fn calib(t_cam_imu: Pose3) -> Calibration {
        Calibration::new(t_cam_imu, CameraModel::pinhole(300.0, 300.0, 160.0, 128.0, 320, 256))
    }

    /// `T_WmI = T_WmWf * T_WfCf * T_CfCm * T_CmI` as plain 4x4 products.
    fn chain_oracle(kf: &KeyframeState, sg: &ScaleGravity, c: &Calibration) -> Matrix4<f64> {
        let t_wm_wf = sg.transform.matrix();
        let t_wf_cf = kf.pose.matrix().try_inverse().unwrap();
        let mut t_cf_cm = Matrix4::identity();
        for i in 0..3 {
            t_cf_cm[(i, i)] = 1.0 / sg.scale();
        }
        t_wm_wf * t_wf_cf * t_cf_cm * c.t_cam_imu.matrix()
    }

    #[test]
    fn chain_collapses_to_extrinsic() {
        let ext = exp_se3(&Twist6::new(0.05, -0.02, 0.01, 0.1, -1.2, 0.3), 1.0);
        let c = calib(ext);
        let kf = KeyframeState::new(0.0, Pose3::identity());
        let p = imu_pose_metric(&kf, &ScaleGravity::default(), &c);
        assert!((p.matrix() - ext.matrix()).abs().max() < 1e-14);
    }

    #[test]
    fn scaled_translation_example() {
        let c = calib(Pose3::identity());
        let kf = KeyframeState::new(0.0, Pose3::from_translation(Vector3::new(1.0, 0.0, 0.0)));
        let sg = ScaleGravity::new(2.0, Rot3::identity());
        let p = imu_pose_metric(&kf, &sg, &c);
        assert_eq!(p.translation, Vector3::new(-2.0, 0.0, 0.0));
        assert!((p.matrix() - chain_oracle(&kf, &sg, &c)).abs().max() < 1e-15);
    }

    #[test]
    fn rotation_examples() {
        let c = calib(Pose3::identity());
        let kf = KeyframeState::new(0.0, Pose3::identity());
        assert_eq!(
            rotation_imu_from_world(&kf, &ScaleGravity::default(), &c),
            Rot3::identity()
        );
        let sg = ScaleGravity::new(1.0, Rot3::rz(30f64.to_radians()));
        let r = rotation_imu_from_world(&kf, &sg, &c);
        assert!((r.matrix() - Rot3::rz(-30f64.to_radians()).matrix()).abs().max() < 1e-15);
    }

    #[test]
    fn gravity_magnitude_validated() {
        let mut c = calib(Pose3::identity());
        assert!(c.validate().is_ok());
        c.gravity = Vector3::new(0.0, 0.0, -1.0);
        assert!(matches!(c.validate(), Err(CalibrationError::Gravity(_))));
    }

    fn arb_pose(scale: f64) -> impl Strategy<Value = Pose3> {
        prop::array::uniform6(-1.0..1.0f64).prop_map(move |a| exp_se3(&(Twist6::from(a) * scale), 1.0))
    }

    fn numeric_metric(kf: &KeyframeState, sg: &ScaleGravity, c: &Calibration, delta: &[f64; 9]) -> Pose3 {
        let mut k = *kf;
        let d = Twist6::from_column_slice(&delta[0..6]);
        k.pose = exp_se3(&d, 1.0) * k.pose;
        let sg2 = ScaleGravity::new(
            sg.scale() * delta[6].exp(),
            Rot3::exp(&Vector3::new(delta[7], delta[8], 0.0)) * *sg.rotation(),
        );
        imu_pose_metric(&k, &sg2, c)
    }

    proptest! {
        #[test]
        fn matches_matrix_oracle(pose in arb_pose(2.0), ext in arb_pose(0.5), g in arb_pose(1.0), s in 0.2..5.0f64) {
            let c = calib(ext);
            let kf = KeyframeState::new(0.0, pose);
            let sg = ScaleGravity::new(s, g.rotation);
            let p = imu_pose_metric(&kf, &sg, &c);
            prop_assert!((p.matrix() - chain_oracle(&kf, &sg, &c)).abs().max() < 1e-12);
            let r = rotation_imu_from_world(&kf, &sg, &c);
            prop_assert!((r.matrix() - p.inverse().rotation.matrix()).abs().max() < 1e-12);
            // inverse chain recovers the camera pose
            let back = camera_pose_from_imu(&p, &sg, &c);
            prop_assert!((back.matrix() - pose.matrix()).abs().max() < 1e-10);
        }

        #[test]
        fn metric_jacobians_match_finite_differences(pose in arb_pose(1.5), ext in arb_pose(0.5), g in arb_pose(0.5), s in 0.3..3.0f64) {
            let c = calib(ext);
            let kf = KeyframeState::new(0.0, pose);
            let sg = ScaleGravity::new(s, g.rotation);
            let j = metric_pose_jacobians(&kf, &sg, &c);
            let base = imu_pose_metric(&kf, &sg, &c);
            let h = 1e-6;
            for k in 0..9 {
                let mut dp = [0.0; 9];
                let mut dm = [0.0; 9];
                dp[k] = h;
                dm[k] = -h;
                let plus = numeric_metric(&kf, &sg, &c, &dp);
                let minus = numeric_metric(&kf, &sg, &c, &dm);
                let dtheta = ((base.rotation.inverse() * plus.rotation).log()
                    - (base.rotation.inverse() * minus.rotation).log()) / (2.0 * h);
                let dpos = (plus.translation - minus.translation) / (2.0 * h);
                let (at, ap) = match k {
                    0..=5 => (j.dtheta_dpose.column(k).into_owned(), j.dp_dpose.column(k).into_owned()),
                    6 => (Vector3::zeros(), j.dp_dlog_scale),
                    _ => (j.dtheta_dgravity.column(k - 7).into_owned(), j.dp_dgravity.column(k - 7).into_owned()),
                };
                prop_assert!((at - dtheta).norm() < 1e-6, "theta col {}", k);
                prop_assert!((ap - dpos).norm() < 1e-6 * (1.0 + ap.norm()), "pos col {}", k);
            }
        }
    }
}
