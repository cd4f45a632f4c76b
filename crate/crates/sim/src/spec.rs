use crate::imu::ImuSimSpec;
use crate::scene::SceneSpec;
use crate::trajectory::{Segment, TrajectorySpec};
use nalgebra::Vector3;
use rsvio_core::camera::{CameraCalibrationFile, CameraModel};
use rsvio_core::lie::{Pose3, Rot3};
use rsvio_core::state::Calibration;
use rsvio_dataset::{quaternion_xyzw, CalibrationFile, DatasetError, ExtrinsicsFile};
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;

/// Everything needed to generate one synthetic sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSpec {
    pub seed: u64,
    /// Sequence length in seconds; frames are at `k / frame_rate < duration`.
    pub duration: f64,
    pub frame_rate: f64,
    /// File timestamp of t = 0, nanoseconds.
    pub epoch_ns: i64,
    /// Also export a global-shutter stream of the same trajectory.
    pub gs_stream: bool,
    /// Rolling-shutter camera; its row time is set to zero for the GS stream.
    pub camera: CameraCalibrationFile,
    pub cam_from_imu: ExtrinsicsFile,
    pub imu: ImuSimSpec,
    pub trajectory: TrajectorySpec,
    pub scene: SceneSpec,
}

/// IMU axes: x forward, y left, z up. Camera axes: x right, y down, z forward.
fn forward_camera_rotation() -> Rot3 {
    let m = nalgebra::Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
    Rot3::from_matrix_unchecked(m)
}

/// Smooth hand-held style motion that starts at rest, with every axis excited.
pub fn excited_trajectory(duration: f64) -> TrajectorySpec {
    // phase -pi/2 gives A (1 - cos(2 pi f t)); the ramp adds zero
    // acceleration at t = 0 so the sequence starts at rest
    let p = -FRAC_PI_2;
    TrajectorySpec {
        start_position: [-0.5, 0.3, 1.4],
        start_rotation: [0.0, 0.0, -0.35],
        segments: vec![Segment::Sinusoid {
            duration,
            amplitude: [0.35, 0.3, 0.15, 0.08, 0.1, 0.3],
            frequency: [0.23, 0.31, 0.37, 0.41, 0.29, 0.19],
            phase: [p; 6],
            ramp: 2.0,
        }],
    }
}

impl Default for SimSpec {
    /// The full-resolution rig: 1280x1024, 20 Hz frames, 200 Hz IMU and a
    /// 29.47 us row time.
    fn default() -> Self {
        let cam = CameraModel::pinhole(920.0, 920.0, 639.5, 511.5, 1280, 1024).with_row_time(29.47e-6);
        let ext = Pose3::new(
            forward_camera_rotation() * Rot3::exp(&Vector3::new(0.01, -0.02, 0.015)),
            Vector3::new(0.03, -0.01, 0.02),
        );
        let t = ext.translation;
        Self {
            seed: 1,
            duration: 20.0,
            frame_rate: 20.0,
            epoch_ns: 1_600_000_000_000_000_000,
            gs_stream: false,
            camera: cam.to_file(),
            cam_from_imu: ExtrinsicsFile {
                rotation_xyzw: quaternion_xyzw(&ext.rotation),
                translation: [t.x, t.y, t.z],
            },
            imu: ImuSimSpec::default(),
            trajectory: excited_trajectory(20.0),
            scene: SceneSpec::default(),
        }
    }
}

impl SimSpec {
    /// A 320x256 version of the default rig. The row time is scaled by four so
    /// that the full readout still takes about 30 ms.
    pub fn small(duration: f64) -> Self {
        let cam = CameraModel::pinhole(230.0, 230.0, 159.5, 127.5, 320, 256).with_row_time(4.0 * 29.47e-6);
        Self {
            duration,
            camera: cam.to_file(),
            trajectory: excited_trajectory(duration),
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn calibration_file(&self, global_shutter: bool) -> CalibrationFile {
        let mut camera = self.camera.clone();
        if global_shutter {
            camera.row_time_td = 0.0;
        }
        CalibrationFile {
            gravity: self.imu.gravity,
            camera,
            cam_from_imu: self.cam_from_imu.clone(),
        }
    }

    pub fn calibration(&self, global_shutter: bool) -> Result<Calibration, DatasetError> {
        self.calibration_file(global_shutter).to_calibration()
    }

    pub fn frame_times(&self) -> Vec<f64> {
        let n = (self.duration * self.frame_rate - 1e-9).ceil().max(0.0) as usize;
        (0..n).map(|k| k as f64 / self.frame_rate).collect()
    }
}
