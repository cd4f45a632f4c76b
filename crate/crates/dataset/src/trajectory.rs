use crate::DatasetError;
use nalgebra::{Quaternion, Rotation3, UnitQuaternion, Vector3};
use rsvio_core::lie::{Pose3, Rot3};
use std::fmt::Write as _;
use std::path::Path;

/// Allowed deviation of a stored quaternion from unit norm.
pub const QUATERNION_NORM_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimedPose {
    /// Seconds relative to the dataset epoch.
    pub timestamp: f64,
    pub pose: Pose3,
}

fn number(v: f64) -> String {
    // no negative zero in files
    let v = if v == 0.0 { 0.0 } else { v };
    format!("{v}")
}

/// Quaternion `(x, y, z, w)` with non-negative `w`.
pub fn quaternion_xyzw(r: &Rot3) -> [f64; 4] {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r.matrix()));
    let q = if q.w < 0.0 { -q.into_inner() } else { q.into_inner() };
    [q.i, q.j, q.k, q.w]
}

pub fn rotation_from_xyzw(q: [f64; 4]) -> Result<Rot3, String> {
    let raw = Quaternion::new(q[3], q[0], q[1], q[2]);
    let n = raw.norm();
    if !n.is_finite() || (n - 1.0).abs() > QUATERNION_NORM_TOLERANCE {
        return Err(format!(
            "quaternion norm {n} is not within {QUATERNION_NORM_TOLERANCE} of 1"
        ));
    }
    Ok(Rot3::from_quaternion(&UnitQuaternion::from_quaternion(raw)))
}

/// One line `timestamp_s tx ty tz qx qy qz qw`.
pub fn format_pose_line(p: &TimedPose) -> String {
    let t = &p.pose.translation;
    let q = quaternion_xyzw(&p.pose.rotation);
    let mut s = format!("{:.9}", p.timestamp);
    for v in [t.x, t.y, t.z, q[0], q[1], q[2], q[3]] {
        write!(s, " {}", number(v)).expect("writing to a String");
    }
    s
}

pub fn format_trajectory(poses: &[TimedPose]) -> String {
    let mut out = String::new();
    for p in poses {
        out.push_str(&format_pose_line(p));
        out.push('\n');
    }
    out
}

/// Parses trajectory text. Blank lines and lines starting with `#` are ignored.
pub fn parse_trajectory(text: &str, source: &str) -> Result<Vec<TimedPose>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| DatasetError::Parse {
            file: source.to_string(),
            line: i + 1,
            message: msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(err(format!("expected 8 fields, found {}", fields.len())));
        }
        let mut v = [0.0; 8];
        for (k, f) in fields.iter().enumerate() {
            v[k] = f.parse::<f64>().map_err(|e| err(format!("field {}: {e}", k + 1)))?;
            if !v[k].is_finite() {
                return Err(err(format!("field {} is not finite", k + 1)));
            }
        }
        let rotation = rotation_from_xyzw([v[4], v[5], v[6], v[7]]).map_err(err)?;
        out.push(TimedPose {
            timestamp: v[0],
            pose: Pose3::new(rotation, Vector3::new(v[1], v[2], v[3])),
        });
    }
    Ok(out)
}

pub fn write_trajectory(path: &Path, poses: &[TimedPose]) -> Result<(), DatasetError> {
    std::fs::write(path, format_trajectory(poses)).map_err(|e| DatasetError::io(path, e))
}

pub fn read_trajectory(path: &Path) -> Result<Vec<TimedPose>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
    parse_trajectory(&text, &path.display().to_string())
}
