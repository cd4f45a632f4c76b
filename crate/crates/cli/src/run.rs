use rsvio_core::backend::config::OdometryConfig;
use rsvio_core::backend::odometry::{KeyframeEstimate, Odometry, OdometryError, RunStatistics};
use rsvio_core::state::ScaleGravity;
use rsvio_dataset::{DatasetError, DatasetIndex, TimedPose};
use std::path::Path;

pub const TRAJECTORY_FILE: &str = "trajectory.txt";
pub const STATE_LOG_FILE: &str = "keyframes.csv";

#[derive(Debug)]
pub struct RunOutput {
    pub keyframes: Vec<KeyframeEstimate>,
    pub stats: RunStatistics,
    pub scale_gravity: Option<ScaleGravity>,
    /// Set when the estimator stopped early; `keyframes` holds what was
    /// estimated up to that point.
    pub failure: Option<OdometryError>,
}

impl RunOutput {
    pub fn trajectory(&self) -> Vec<TimedPose> {
        self.keyframes
            .iter()
            .map(|k| TimedPose {
                timestamp: k.timestamp,
                pose: k.imu_pose,
            })
            .collect()
    }
}

/// Runs the estimator over every image of the dataset in order. Image
/// decoding errors abort; estimator failures end the run early and are
/// reported in the output.
pub fn run_dataset(index: &DatasetIndex, cfg: &OdometryConfig) -> Result<RunOutput, DatasetError> {
    let mut odo = Odometry::new(cfg.clone(), index.calibration.clone(), index.imu.clone());
    let mut failure = None;
    for (i, entry) in index.images.iter().enumerate() {
        let image = index.load_image(i)?;
        match odo.process_frame(i, entry.timestamp, &image) {
            Ok(outcome) => log::debug!("frame {i} t={:.3}: {outcome:?}", entry.timestamp),
            Err(e) => {
                log::error!("{e}");
                failure = Some(e);
                break;
            }
        }
    }
    Ok(RunOutput {
        keyframes: odo.trajectory(),
        scale_gravity: odo.scale_gravity(),
        stats: std::mem::take(&mut odo.stats),
        failure,
    })
}

/// Per-keyframe velocity, biases and scale as CSV.
pub fn write_state_log(path: &Path, keyframes: &[KeyframeEstimate]) -> Result<(), DatasetError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| DatasetError::Invalid(e.to_string()))?;
    let header = [
        "timestamp_s",
        "frame",
        "vx",
        "vy",
        "vz",
        "bax",
        "bay",
        "baz",
        "bgx",
        "bgy",
        "bgz",
        "scale",
    ];
    let io = |e: csv::Error| DatasetError::Invalid(format!("{}: {e}", path.display()));
    w.write_record(header).map_err(io)?;
    for k in keyframes {
        let mut rec = vec![format!("{:.9}", k.timestamp), k.frame_index.to_string()];
        for v in [k.velocity, k.bias.acc, k.bias.gyro] {
            rec.extend(v.iter().map(|x| x.to_string()));
        }
        rec.push(k.scale.to_string());
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| DatasetError::io(path, e))
}
