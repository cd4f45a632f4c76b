//! Dataset directories and trajectory files.
//!
//! A dataset directory holds
//!
//! * `manifest.csv`: `timestamp_ns,path,shutter` per image, `shutter` being `RS` or `GS`;
//! * `calibration.toml`: camera intrinsics, row time, IMU-to-camera extrinsics, gravity;
//! * `imu.csv`: `timestamp_ns,gx,gy,gz,ax,ay,az` in rad/s and m/s^2;
//! * the images (16-bit grayscale PNG);
//! * optionally `groundtruth.txt`, a trajectory file of IMU poses in the world.
//!
//! File timestamps are integer nanoseconds. In memory they become seconds
//! relative to the dataset epoch, the earliest image or IMU timestamp;
//! trajectory files use the same relative seconds.

mod calibration;
mod images;
mod imu_csv;
mod manifest;
mod trajectory;

pub use calibration::{CalibrationFile, ExtrinsicsFile};
pub use images::{read_image, write_png16, ImageOptions};
pub use imu_csv::{read_imu_csv, to_samples, write_imu_csv, ImuRow, IMU_HEADER};
pub use manifest::{read_manifest, write_manifest, ManifestEntry, Shutter};
pub use trajectory::{
    format_pose_line, format_trajectory, parse_trajectory, quaternion_xyzw, read_trajectory, rotation_from_xyzw,
    write_trajectory, TimedPose, QUATERNION_NORM_TOLERANCE,
};

use rsvio_core::image::GrayImage;
use rsvio_core::imu::ImuSample;
use rsvio_core::state::Calibration;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const CALIBRATION_FILE: &str = "calibration.toml";
pub const IMU_FILE: &str = "imu.csv";
pub const GROUND_TRUTH_FILE: &str = "groundtruth.txt";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{file}:{line}: {message}")]
    Parse { file: String, line: usize, message: String },
    #[error("unit mismatch: {0}")]
    Units(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },
}

impl DatasetError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn csv(path: &Path, e: csv::Error) -> Self {
        let line = e.position().map_or(0, |p| p.line() as usize);
        match e.into_kind() {
            csv::ErrorKind::Io(source) => Self::io(path, source),
            other => Self::Parse {
                file: path.display().to_string(),
                line,
                message: format!("{other:?}"),
            },
        }
    }
}

/// Seconds between `ns` and `epoch_ns`, exact to the nanosecond for spans
/// below about 100 days.
pub fn ns_to_seconds(ns: i64, epoch_ns: i64) -> f64 {
    (ns - epoch_ns) as f64 * 1e-9
}

pub fn seconds_to_ns(t: f64, epoch_ns: i64) -> i64 {
    epoch_ns + (t * 1e9).round() as i64
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageEntry {
    pub timestamp_ns: i64,
    /// Seconds relative to the epoch.
    pub timestamp: f64,
    pub path: PathBuf,
    pub shutter: Shutter,
}

/// A validated dataset directory. Images are decoded on demand.
#[derive(Clone, Debug)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub epoch_ns: i64,
    pub images: Vec<ImageEntry>,
    pub imu: Vec<ImuSample>,
    pub calibration: Calibration,
    pub ground_truth: Option<Vec<TimedPose>>,
    pub image_options: ImageOptions,
}

impl DatasetIndex {
    pub fn load_image(&self, index: usize) -> Result<GrayImage, DatasetError> {
        let entry = &self.images[index];
        let img = read_image(&entry.path, &self.image_options)?;
        let cam = &self.calibration.camera;
        if img.width != cam.width || img.height != cam.height {
            return Err(DatasetError::Invalid(format!(
                "{} is {}x{}, calibration says {}x{}",
                entry.path.display(),
                img.width,
                img.height,
                cam.width,
                cam.height
            )));
        }
        Ok(img)
    }

    /// True when every image is tagged global shutter.
    pub fn is_global_shutter(&self) -> bool {
        self.images.iter().all(|e| e.shutter == Shutter::Gs)
    }
}

/// Loads and validates a dataset directory.
pub fn load_dataset(dir: &Path, options: ImageOptions) -> Result<DatasetIndex, DatasetError> {
    let manifest = read_manifest(&dir.join(MANIFEST_FILE))?;
    let calibration = CalibrationFile::read(&dir.join(CALIBRATION_FILE))?.to_calibration()?;
    let rows = read_imu_csv(&dir.join(IMU_FILE))?;
    if manifest.is_empty() {
        return Err(DatasetError::Invalid("manifest lists no images".into()));
    }
    if rows.is_empty() {
        return Err(DatasetError::Invalid("imu.csv has no samples".into()));
    }
    let epoch_ns = manifest[0].timestamp_ns.min(rows[0].timestamp_ns);
    let gs_calibration = calibration.camera.is_global_shutter();
    let mut images = Vec::with_capacity(manifest.len());
    for (i, m) in manifest.iter().enumerate() {
        if (m.shutter == Shutter::Gs) != gs_calibration {
            return Err(DatasetError::Parse {
                file: dir.join(MANIFEST_FILE).display().to_string(),
                line: i + 2,
                message: format!(
                    "shutter tag {} contradicts the calibrated row time {}",
                    m.shutter, calibration.camera.row_time_td
                ),
            });
        }
        let path = dir.join(&m.path);
        if !path.is_file() {
            return Err(DatasetError::Invalid(format!(
                "image {} listed on manifest line {} is missing",
                path.display(),
                i + 2
            )));
        }
        images.push(ImageEntry {
            timestamp_ns: m.timestamp_ns,
            timestamp: ns_to_seconds(m.timestamp_ns, epoch_ns),
            path,
            shutter: m.shutter,
        });
    }
    let gt_path = dir.join(GROUND_TRUTH_FILE);
    let ground_truth = if gt_path.is_file() {
        Some(read_trajectory(&gt_path)?)
    } else {
        None
    };
    Ok(DatasetIndex {
        root: dir.to_path_buf(),
        epoch_ns,
        images,
        imu: to_samples(&rows, epoch_ns),
        calibration,
        ground_truth,
        image_options: options,
    })
}
