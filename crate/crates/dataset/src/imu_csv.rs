use crate::DatasetError;
use nalgebra::Vector3;
use rsvio_core::imu::ImuSample;
use std::path::Path;

pub const IMU_HEADER: [&str; 7] = ["timestamp_ns", "gx", "gy", "gz", "ax", "ay", "az"];

/// Largest plausible gyro magnitude in rad/s; larger values suggest deg/s.
const MAX_GYRO: f64 = 35.0;
/// Plausible range of the mean specific-force magnitude in m/s^2.
const ACCEL_MEAN_RANGE: (f64, f64) = (4.0, 20.0);

/// A raw IMU row with its integer timestamp.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuRow {
    pub timestamp_ns: i64,
    pub gyro: Vector3<f64>,
    pub accel: Vector3<f64>,
}

pub fn write_imu_csv(path: &Path, rows: &[ImuRow]) -> Result<(), DatasetError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| DatasetError::csv(path, e))?;
    w.write_record(IMU_HEADER).map_err(|e| DatasetError::csv(path, e))?;
    for r in rows {
        let rec = [
            r.timestamp_ns.to_string(),
            format!("{}", r.gyro.x),
            format!("{}", r.gyro.y),
            format!("{}", r.gyro.z),
            format!("{}", r.accel.x),
            format!("{}", r.accel.y),
            format!("{}", r.accel.z),
        ];
        w.write_record(&rec).map_err(|e| DatasetError::csv(path, e))?;
    }
    w.flush().map_err(|e| DatasetError::io(path, e))
}

/// Reads and validates an IMU CSV file: exact header, integer strictly
/// increasing timestamps, finite values in rad/s and m/s^2.
pub fn read_imu_csv(path: &Path) -> Result<Vec<ImuRow>, DatasetError> {
    let file = path.display().to_string();
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| DatasetError::csv(path, e))?;
    let header = r.headers().map_err(|e| DatasetError::csv(path, e))?.clone();
    if header.iter().collect::<Vec<_>>() != IMU_HEADER {
        return Err(DatasetError::Parse {
            file,
            line: 1,
            message: format!("header must be '{}'", IMU_HEADER.join(",")),
        });
    }
    let mut rows: Vec<ImuRow> = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let err = |message: String| DatasetError::Parse {
            file: file.clone(),
            line,
            message,
        };
        let rec = rec.map_err(|e| err(e.to_string()))?;
        if rec.len() != 7 {
            return Err(err(format!("expected 7 fields, found {}", rec.len())));
        }
        let timestamp_ns: i64 = rec[0]
            .parse()
            .map_err(|_| err(format!("timestamp '{}' is not an integer nanosecond count", &rec[0])))?;
        let mut v = [0.0f64; 6];
        for k in 0..6 {
            v[k] = rec[k + 1]
                .parse()
                .map_err(|e| err(format!("column {}: {e}", IMU_HEADER[k + 1])))?;
            if !v[k].is_finite() {
                return Err(err(format!("column {} is not finite", IMU_HEADER[k + 1])));
            }
        }
        if let Some(prev) = rows.last() {
            if timestamp_ns <= prev.timestamp_ns {
                return Err(err(format!(
                    "timestamp {timestamp_ns} does not increase (previous {})",
                    prev.timestamp_ns
                )));
            }
        }
        let gyro = Vector3::new(v[0], v[1], v[2]);
        if gyro.amax() > MAX_GYRO {
            return Err(err(format!(
                "gyro magnitude {:.1} exceeds {MAX_GYRO} rad/s; is the file in deg/s?",
                gyro.amax()
            )));
        }
        rows.push(ImuRow {
            timestamp_ns,
            gyro,
            accel: Vector3::new(v[3], v[4], v[5]),
        });
    }
    if !rows.is_empty() {
        let mean = rows.iter().map(|r| r.accel.norm()).sum::<f64>() / rows.len() as f64;
        if mean < ACCEL_MEAN_RANGE.0 || mean > ACCEL_MEAN_RANGE.1 {
            return Err(DatasetError::Units(format!(
                "{file}: mean accelerometer magnitude {mean:.3} is not in m/s^2"
            )));
        }
    }
    Ok(rows)
}

/// Converts rows to samples with times relative to `epoch_ns`.
pub fn to_samples(rows: &[ImuRow], epoch_ns: i64) -> Vec<ImuSample> {
    rows.iter()
        .map(|r| ImuSample::new(crate::ns_to_seconds(r.timestamp_ns, epoch_ns), r.gyro, r.accel))
        .collect()
}
