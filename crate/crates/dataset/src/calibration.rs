use crate::trajectory::{quaternion_xyzw, rotation_from_xyzw};
use crate::DatasetError;
use nalgebra::Vector3;
use rsvio_core::camera::{CameraCalibrationFile, CameraModel};
use rsvio_core::lie::Pose3;
use rsvio_core::state::Calibration;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// IMU-to-camera transform `T_CI` as a Hamilton quaternion `[x, y, z, w]`
/// and a translation in meters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtrinsicsFile {
    pub rotation_xyzw: [f64; 4],
    pub translation: [f64; 3],
}

/// Contents of `calibration.toml`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationFile {
    /// Gravity magnitude in m/s^2.
    pub gravity: f64,
    pub camera: CameraCalibrationFile,
    pub cam_from_imu: ExtrinsicsFile,
}

impl CalibrationFile {
    pub fn from_calibration(c: &Calibration) -> Self {
        let t = &c.t_cam_imu.translation;
        Self {
            gravity: c.gravity.norm(),
            camera: c.camera.to_file(),
            cam_from_imu: ExtrinsicsFile {
                rotation_xyzw: quaternion_xyzw(&c.t_cam_imu.rotation),
                translation: [t.x, t.y, t.z],
            },
        }
    }

    pub fn to_calibration(&self) -> Result<Calibration, DatasetError> {
        let camera = CameraModel::from_file(&self.camera).map_err(|e| DatasetError::Invalid(e.to_string()))?;
        let rotation = rotation_from_xyzw(self.cam_from_imu.rotation_xyzw).map_err(DatasetError::Invalid)?;
        let t = self.cam_from_imu.translation;
        let mut calib = Calibration::new(Pose3::new(rotation, Vector3::new(t[0], t[1], t[2])), camera);
        calib.gravity = Vector3::new(0.0, 0.0, -self.gravity);
        calib.validate().map_err(|e| DatasetError::Units(e.to_string()))?;
        Ok(calib)
    }

    pub fn read(path: &Path) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
        toml::from_str(&text).map_err(|e| DatasetError::Parse {
            file: path.display().to_string(),
            line: e.span().map_or(0, |s| text[..s.start].matches('\n').count() + 1),
            message: e.message().to_string(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), DatasetError> {
        let text = toml::to_string(self).expect("calibration serializes");
        std::fs::write(path, text).map_err(|e| DatasetError::io(path, e))
    }
}
