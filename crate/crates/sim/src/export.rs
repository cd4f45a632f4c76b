//! Writes a simulated sequence as one dataset directory per shutter stream.

use crate::imu::{synthesize_imu, SimImuSample};
use crate::render::{render_gs_image, render_rs_image, RenderError};
use crate::spec::SimSpec;
use crate::trajectory::{Trajectory, TrajectoryError};
use rsvio_core::camera::CameraModel;
use rsvio_core::image::GrayImage;
use rsvio_core::lie::Pose3;
use rsvio_dataset::{
    seconds_to_ns, write_imu_csv, write_manifest, write_png16, write_trajectory, DatasetError, ImuRow, ManifestEntry,
    Shutter, TimedPose, CALIBRATION_FILE, GROUND_TRUTH_FILE, IMU_FILE, MANIFEST_FILE,
};
use std::path::{Path, PathBuf};

pub const RS_DIR: &str = "rs";
pub const GS_DIR: &str = "gs";
pub const SPEC_FILE: &str = "sim.toml";

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("invalid simulation spec: {0}")]
    Spec(String),
}

/// A spec with its trajectory and calibration resolved.
pub struct Simulation {
    pub spec: SimSpec,
    pub trajectory: Trajectory,
    pub t_cam_imu: Pose3,
    pub camera: CameraModel,
}

impl Simulation {
    pub fn new(spec: SimSpec) -> Result<Self, SimError> {
        if !(spec.duration > 0.0 && spec.frame_rate > 0.0 && spec.imu.rate_hz > 0.0) {
            return Err(SimError::Spec("duration and rates must be positive".into()));
        }
        let trajectory = Trajectory::new(&spec.trajectory)?;
        let calib = spec.calibration(false)?;
        Ok(Self {
            trajectory,
            t_cam_imu: calib.t_cam_imu,
            camera: calib.camera,
            spec,
        })
    }

    pub fn frame_times(&self) -> Vec<f64> {
        self.spec.frame_times()
    }

    pub fn render(&self, t: f64, global_shutter: bool) -> Result<GrayImage, SimError> {
        let r = if global_shutter {
            render_gs_image(&self.spec.scene, &self.trajectory, &self.camera, &self.t_cam_imu, t)?
        } else {
            render_rs_image(&self.spec.scene, &self.trajectory, &self.camera, &self.t_cam_imu, t)?
        };
        Ok(r.image)
    }

    /// Samples over `[0, duration)`. The last frame's readout ends well
    /// before the last sample is superseded, so no tail is needed.
    pub fn imu(&self) -> Vec<SimImuSample> {
        synthesize_imu(
            &self.trajectory,
            &self.spec.imu,
            0.0,
            self.spec.duration,
            self.spec.seed,
        )
    }

    /// `T_WI` at every frame time.
    pub fn ground_truth(&self) -> Vec<TimedPose> {
        self.frame_times()
            .into_iter()
            .map(|t| TimedPose {
                timestamp: t,
                pose: self.trajectory.pose(t),
            })
            .collect()
    }

    fn ns(&self, t: f64) -> i64 {
        seconds_to_ns(t, self.spec.epoch_ns)
    }

    fn write_stream(&self, dir: &Path, global_shutter: bool, imu: &[ImuRow]) -> Result<(), SimError> {
        let io = |e| DatasetError::io(dir, e);
        std::fs::create_dir_all(dir.join("images")).map_err(io)?;
        self.spec
            .calibration_file(global_shutter)
            .write(&dir.join(CALIBRATION_FILE))?;
        write_imu_csv(&dir.join(IMU_FILE), imu)?;
        let shutter = if global_shutter { Shutter::Gs } else { Shutter::Rs };
        let mut entries = Vec::new();
        for (k, t) in self.frame_times().into_iter().enumerate() {
            let rel = format!("images/{k:06}.png");
            write_png16(&dir.join(&rel), &self.render(t, global_shutter)?)?;
            entries.push(ManifestEntry {
                timestamp_ns: self.ns(t),
                path: rel,
                shutter,
            });
        }
        write_manifest(&dir.join(MANIFEST_FILE), &entries)?;
        write_trajectory(&dir.join(GROUND_TRUTH_FILE), &self.ground_truth())?;
        Ok(())
    }

    /// Writes `out/rs` and, if requested, `out/gs`, plus a copy of the spec.
    /// Returns the stream directories.
    pub fn export(&self, out: &Path) -> Result<Vec<PathBuf>, SimError> {
        std::fs::create_dir_all(out).map_err(|e| DatasetError::io(out, e))?;
        let spec_path = out.join(SPEC_FILE);
        std::fs::write(&spec_path, self.spec.to_toml()).map_err(|e| DatasetError::io(&spec_path, e))?;
        let imu: Vec<ImuRow> = self
            .imu()
            .iter()
            .map(|s| ImuRow {
                timestamp_ns: self.ns(s.timestamp),
                gyro: s.gyro,
                accel: s.accel,
            })
            .collect();
        let mut dirs = vec![out.join(RS_DIR)];
        self.write_stream(&dirs[0], false, &imu)?;
        if self.spec.gs_stream {
            dirs.push(out.join(GS_DIR));
            self.write_stream(&dirs[1], true, &imu)?;
        }
        Ok(dirs)
    }
}
