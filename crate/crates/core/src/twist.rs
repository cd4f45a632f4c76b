//! Coupling between the IMU state and the per-keyframe camera twist.
//!
//! The IMU body twist `[R_IW v; w - b_g]` is moved into the camera frame with
//! the extrinsic adjoint, expressed in free-scale units and per image row, and
//! compared against the twist variable used by the rolling-shutter projection.

use crate::lie::{adjoint, hat, Twist6};
use crate::state::{rotation_imu_from_world, Calibration, KeyframeState, ScaleGravity};
use nalgebra::{Matrix3, Matrix6, SMatrix, Vector3, Vector6};

/// Metric body twist of the IMU, per second.
pub fn imu_twist(kf: &KeyframeState, sg: &ScaleGravity, calib: &Calibration, omega: &Vector3<f64>) -> Twist6 {
    let r_iw = rotation_imu_from_world(kf, sg, calib);
    let v = r_iw.rotate(&kf.velocity);
    let w = omega - kf.bias.gyro;
    Twist6::new(v.x, v.y, v.z, w.x, w.y, w.z)
}

/// Twist of the camera's world-to-camera pose, `-Adj(T_CI) xi_imu`.
pub fn camera_twist(xi_imu: &Twist6, calib: &Calibration) -> Twist6 {
    -adjoint(&calib.t_cam_imu) * xi_imu
}

/// Camera twist in free-scale units per row.
pub fn prior_twist(xi_cam: &Twist6, scale: f64, row_time: f64) -> Twist6 {
    let mut out = xi_cam * row_time;
    for k in 0..3 {
        out[k] /= scale;
    }
    out
}

/// Default per-second weight on each twist component.
pub const DEFAULT_TWIST_WEIGHT: f64 = 1e2;

/// Prior on one keyframe's twist variable.
#[derive(Clone, Debug, PartialEq)]
pub struct TwistPriorTerm {
    /// Gyro reading at the keyframe's mid-row time.
    pub gyro: Vector3<f64>,
    /// Diagonal weights applied to the per-second twist error.
    pub weight: Vector6<f64>,
}

/// Residual `prior - twist` (row units) with derivatives with respect to
/// every coupled variable. Pose is a left perturbation of `T_CfWf`, scale
/// enters as `s exp(sigma)`, gravity through the first two components of a
/// left rotation perturbation of `R_WmWf`.
#[derive(Clone, Debug)]
pub struct TwistLinearization {
    pub residual: Vector6<f64>,
    /// Information matrix in row units.
    pub information: Matrix6<f64>,
    pub d_pose: Matrix6<f64>,
    pub d_twist: Matrix6<f64>,
    pub d_velocity: SMatrix<f64, 6, 3>,
    pub d_bias_gyro: SMatrix<f64, 6, 3>,
    pub d_log_scale: Vector6<f64>,
    pub d_gravity: SMatrix<f64, 6, 2>,
}

impl TwistLinearization {
    pub fn energy(&self) -> f64 {
        self.residual.dot(&(self.information * self.residual))
    }
}

impl TwistPriorTerm {
    pub fn new(gyro: Vector3<f64>, weight: Vector6<f64>) -> Self {
        Self { gyro, weight }
    }

    pub fn with_default_weight(gyro: Vector3<f64>) -> Self {
        Self::new(gyro, Vector6::repeat(DEFAULT_TWIST_WEIGHT))
    }

    /// The prior twist `xi~` for the current state.
    pub fn prior(&self, kf: &KeyframeState, sg: &ScaleGravity, calib: &Calibration) -> Twist6 {
        let xi_cam = camera_twist(&imu_twist(kf, sg, calib, &self.gyro), calib);
        prior_twist(&xi_cam, sg.scale(), calib.camera.row_time_td)
    }

    pub fn energy(&self, kf: &KeyframeState, sg: &ScaleGravity, calib: &Calibration) -> f64 {
        self.linearize(kf, sg, calib).map_or(0.0, |l| l.energy())
    }

    /// `None` for a global-shutter camera, where the twist carries no information.
    pub fn linearize(&self, kf: &KeyframeState, sg: &ScaleGravity, calib: &Calibration) -> Option<TwistLinearization> {
        let td = calib.camera.row_time_td;
        if td == 0.0 {
            return None;
        }
        let s = sg.scale();
        let prior = self.prior(kf, sg, calib);
        let residual = prior - kf.twist;

        let rc_rgt = kf.pose.rotation.matrix() * sg.rotation().matrix().transpose();
        let rci = calib.t_cam_imu.rotation.matrix();
        let tci_hat = hat(&calib.t_cam_imu.translation);
        let v_cam = rc_rgt * kf.velocity;

        let trans_scale = td / s;
        let mut d_pose = Matrix6::zeros();
        d_pose
            .fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&(hat(&v_cam) * trans_scale));

        let mut d_velocity = SMatrix::<f64, 6, 3>::zeros();
        d_velocity
            .fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&(-rc_rgt * trans_scale));

        let mut d_bias_gyro = SMatrix::<f64, 6, 3>::zeros();
        d_bias_gyro
            .fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&(tci_hat * rci * trans_scale));
        d_bias_gyro.fixed_view_mut::<3, 3>(3, 0).copy_from(&(rci * td));

        let mut d_log_scale = Vector6::zeros();
        d_log_scale
            .fixed_rows_mut::<3>(0)
            .copy_from(&(-prior.fixed_rows::<3>(0)));

        let dg: Matrix3<f64> = -rc_rgt * hat(&kf.velocity) * trans_scale;
        let mut d_gravity = SMatrix::<f64, 6, 2>::zeros();
        d_gravity
            .fixed_view_mut::<3, 2>(0, 0)
            .copy_from(&dg.fixed_columns::<2>(0));

        let information = Matrix6::from_diagonal(&(self.weight / (td * td)));
        Some(TwistLinearization {
            residual,
            information,
            d_pose,
            d_twist: -Matrix6::identity(),
            d_velocity,
            d_bias_gyro,
            d_log_scale,
            d_gravity,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::CameraModel;
    use crate::lie::{exp_se3, Pose3, Rot3};
    use crate::state::ImuBias;
    use proptest::prelude::*;

    fn calib(ext: Pose3, td: f64) -> Calibration {
        Calibration::new(
            ext,
            CameraModel::pinhole(250.0, 250.0, 160.0, 128.0, 320, 256).with_row_time(td),
        )
    }

    #[test]
    fn imu_twist_examples() {
        let c = calib(Pose3::identity(), 1.0);
        let mut kf = KeyframeState::new(0.0, Pose3::identity());
        kf.bias.gyro = Vector3::new(0.1, 0.2, 0.3);
        assert_eq!(
            imu_twist(&kf, &ScaleGravity::default(), &c, &kf.bias.gyro),
            Twist6::zeros()
        );
        kf.bias = ImuBias::default();
        kf.velocity = Vector3::new(1.0, 0.0, 0.0);
        let xi = imu_twist(&kf, &ScaleGravity::default(), &c, &Vector3::new(0.0, 0.0, 0.5));
        assert_eq!(xi, Twist6::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.5));
    }

    #[test]
    fn camera_twist_examples() {
        let xi = Twist6::new(1.0, 2.0, 3.0, 0.1, 0.2, 0.3);
        assert_eq!(camera_twist(&xi, &calib(Pose3::identity(), 1.0)), -xi);
        let r = Rot3::ry(0.7);
        let out = camera_twist(&xi, &calib(Pose3::from_rotation(r), 1.0));
        let t = -r.rotate(&Vector3::new(1.0, 2.0, 3.0));
        let w = -r.rotate(&Vector3::new(0.1, 0.2, 0.3));
        assert!((out - Twist6::new(t.x, t.y, t.z, w.x, w.y, w.z)).norm() < 1e-15);
    }

    #[test]
    fn prior_twist_examples() {
        let xi = Twist6::new(1.0, 2.0, 3.0, 0.1, 0.2, 0.3);
        assert_eq!(prior_twist(&xi, 1.0, 1.0), xi);
        let td = 29.47e-6;
        let p = prior_twist(&xi, 2.0, td);
        let expected = Twist6::new(0.5 * td, 1.0 * td, 1.5 * td, 0.1 * td, 0.2 * td, 0.3 * td);
        assert!((p - expected).norm() < 1e-18);
    }

    #[test]
    fn energy_quadratic_form() {
        let c = calib(Pose3::identity(), 1.0);
        let mut kf = KeyframeState::new(0.0, Pose3::identity());
        let term = TwistPriorTerm::new(Vector3::zeros(), Vector6::repeat(1.0));
        assert_eq!(term.energy(&kf, &ScaleGravity::default(), &c), 0.0);
        kf.twist[0] = -0.01;
        assert!((term.energy(&kf, &ScaleGravity::default(), &c) - 1e-4).abs() < 1e-18);
        assert!(term
            .linearize(&kf, &ScaleGravity::default(), &calib(Pose3::identity(), 0.0))
            .is_none());
    }

    fn arb_pose(scale: f64) -> impl Strategy<Value = Pose3> {
        prop::array::uniform6(-1.0..1.0f64).prop_map(move |a| exp_se3(&(Twist6::from(a) * scale), 1.0))
    }

    fn arb_twist(scale: f64) -> impl Strategy<Value = Twist6> {
        prop::array::uniform6(-1.0..1.0f64).prop_map(move |a| Twist6::from(a) * scale)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        /// A constant IMU body twist and the camera twist describe the same
        /// camera path: `T_CI (T_WI exp(xi t))^-1 = exp(xi_cam t) T_CI T_WI^-1`.
        #[test]
        fn path_equivalence(ext in arb_pose(1.0), t_wi in arb_pose(2.0), xi in arb_twist(2.0)) {
            let c = calib(ext, 1.0);
            let xc = camera_twist(&xi, &c);
            for &t in &[0.0, 0.01, 0.05, 0.1] {
                let lhs = ext * (t_wi * exp_se3(&xi, t)).inverse();
                let rhs = exp_se3(&xc, t) * ext * t_wi.inverse();
                prop_assert!((lhs.matrix() - rhs.matrix()).abs().max() < 1e-10);
            }
        }

        #[test]
        fn translational_part_uses_world_to_imu_rotation(pose in arb_pose(1.0), ext in arb_pose(1.0), g in arb_pose(1.0), v in prop::array::uniform3(-3.0..3.0f64)) {
            let c = calib(ext, 1.0);
            let mut kf = KeyframeState::new(0.0, pose);
            kf.velocity = Vector3::from(v);
            let sg = ScaleGravity::new(1.3, g.rotation);
            let xi = imu_twist(&kf, &sg, &c, &Vector3::zeros());
            // oracle: inverse of the metric IMU rotation
            let r_wi = crate::state::imu_pose_metric(&kf, &sg, &c).rotation;
            let expected = r_wi.matrix().transpose() * kf.velocity;
            prop_assert!((xi.fixed_rows::<3>(0) - expected).norm() < 1e-12);
        }

        #[test]
        fn consistent_rescaling_rescales_residual(pose in arb_pose(1.0), ext in arb_pose(0.3), xi in arb_twist(1e-4), lambda in 0.2..5.0f64, v in prop::array::uniform3(-3.0..3.0f64)) {
            let c = calib(ext, 3e-5);
            let mut kf = KeyframeState::new(0.0, pose);
            kf.velocity = Vector3::from(v);
            kf.twist = xi;
            let term = TwistPriorTerm::with_default_weight(Vector3::new(0.1, -0.4, 0.2));
            let sg = ScaleGravity::new(1.5, Rot3::rx(0.2));
            let r0 = term.linearize(&kf, &sg, &c).unwrap().residual;
            let mut kf2 = kf;
            kf2.pose.translation /= lambda;
            for k in 0..3 { kf2.twist[k] /= lambda; }
            let sg2 = ScaleGravity::new(1.5 * lambda, *sg.rotation());
            let r1 = term.linearize(&kf2, &sg2, &c).unwrap().residual;
            let mut expected = r0;
            for k in 0..3 { expected[k] /= lambda; }
            prop_assert!((r1 - expected).norm() < 1e-12 * (1.0 + r0.norm()));
        }

        #[test]
        fn jacobians_match_finite_differences(pose in arb_pose(1.0), ext in arb_pose(0.5), g in arb_pose(0.5), v in prop::array::uniform3(-3.0..3.0f64), bg in prop::array::uniform3(-0.1..0.1f64), s in 0.3..3.0f64) {
            let td = 3e-5;
            let c = calib(ext, td);
            let mut kf = KeyframeState::new(0.0, pose);
            kf.velocity = Vector3::from(v);
            kf.bias.gyro = Vector3::from(bg);
            kf.twist = Twist6::new(1.0, 2.0, -1.0, 0.3, 0.1, -0.2) * td;
            let sg = ScaleGravity::new(s, g.rotation);
            let term = TwistPriorTerm::with_default_weight(Vector3::new(0.3, -0.2, 0.5));
            let lin = term.linearize(&kf, &sg, &c).unwrap();
            // 21 parameters: pose 6, twist 6, velocity 3, bias gyro 3, log scale 1, gravity 2
            let eval = |d: &[f64]| {
                let mut k = kf;
                k.pose = exp_se3(&Twist6::from_column_slice(&d[0..6]), 1.0) * k.pose;
                k.twist += Twist6::from_column_slice(&d[6..12]);
                k.velocity += Vector3::from_column_slice(&d[12..15]);
                k.bias.gyro += Vector3::from_column_slice(&d[15..18]);
                let sg2 = ScaleGravity::new(s * d[18].exp(), Rot3::exp(&Vector3::new(d[19], d[20], 0.0)) * g.rotation);
                term.linearize(&k, &sg2, &c).unwrap().residual
            };
            let h = 1e-6;
            for k in 0..21 {
                let mut dp = [0.0; 21];
                let mut dm = [0.0; 21];
                dp[k] = h;
                dm[k] = -h;
                let num = (eval(&dp) - eval(&dm)) / (2.0 * h);
                let ana: Vector6<f64> = match k {
                    0..=5 => lin.d_pose.column(k).into_owned(),
                    6..=11 => lin.d_twist.column(k - 6).into_owned(),
                    12..=14 => lin.d_velocity.column(k - 12).into_owned(),
                    15..=17 => lin.d_bias_gyro.column(k - 15).into_owned(),
                    18 => lin.d_log_scale,
                    _ => lin.d_gravity.column(k - 19).into_owned(),
                };
                let scale = ana.norm().max(td);
                prop_assert!((num - ana).norm() < 1e-4 * scale, "col {}: {} vs {}", k, num, ana);
            }
        }
    }
}
