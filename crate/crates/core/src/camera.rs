//! Pinhole camera with radial-tangential distortion and a per-row readout clock.
//!
//! The backend works on undistorted pixel coordinates. `distort` maps them into
//! the sensor (distorted) image, whose row index determines the capture time of
//! a rolling-shutter pixel relative to the middle row `y0`.

use nalgebra::{Matrix2, Matrix2x3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Points closer than this to the image plane are treated as behind the camera.
pub const MIN_DEPTH: f64 = 1e-6;

const UNDISTORT_MAX_ITERATIONS: usize = 10;
const UNDISTORT_TOLERANCE_PX: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CameraError {
    #[error("point at normalized radius {radius:.4} is outside the distortion domain (max {max:.4})")]
    OutOfDomain { radius: f64, max: f64 },
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("inverse depth must be positive, got {0}")]
    InvalidDepth(f64),
    #[error("undistortion did not converge for pixel ({0}, {1})")]
    UndistortDiverged(f64, f64),
    #[error("invalid camera model: {0}")]
    InvalidModel(String),
    #[error("calibration file: {0}")]
    Parse(String),
}

/// Radial-tangential coefficients acting on normalized image coordinates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RadTan {
    pub k1: f64,
    pub k2: f64,
    pub p1: f64,
    pub p2: f64,
}

impl RadTan {
    pub fn is_zero(&self) -> bool {
        self.k1 == 0.0 && self.k2 == 0.0 && self.p1 == 0.0 && self.p2 == 0.0
    }

    /// Largest squared normalized radius for which the radial profile
    /// `r (1 + k1 r^2 + k2 r^4)` is still monotone, with a 5% margin.
    fn max_radius_sq(&self) -> f64 {
        // d/dr: 1 + 3 k1 s + 5 k2 s^2, s = r^2
        let (a, b, c) = (5.0 * self.k2, 3.0 * self.k1, 1.0);
        let root = if a.abs() < 1e-300 {
            if b < 0.0 {
                -c / b
            } else {
                f64::INFINITY
            }
        } else {
            let disc = b * b - 4.0 * a * c;
            if disc < 0.0 {
                f64::INFINITY
            } else {
                let sq = disc.sqrt();
                [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)]
                    .into_iter()
                    .filter(|s| *s > 0.0)
                    .fold(f64::INFINITY, f64::min)
            }
        };
        0.95 * root
    }

    fn apply(&self, x: f64, y: f64) -> (Vector2<f64>, Matrix2<f64>) {
        let r2 = x * x + y * y;
        let radial = 1.0 + self.k1 * r2 + self.k2 * r2 * r2;
        let dradial = self.k1 + 2.0 * self.k2 * r2; // d radial / d r2
        let xd = x * radial + 2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x);
        let yd = y * radial + self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y;
        let dxd_dx = radial + x * dradial * 2.0 * x + 2.0 * self.p1 * y + self.p2 * 6.0 * x;
        let dxd_dy = x * dradial * 2.0 * y + 2.0 * self.p1 * x + self.p2 * 2.0 * y;
        let dyd_dx = y * dradial * 2.0 * x + self.p1 * 2.0 * x + 2.0 * self.p2 * y;
        let dyd_dy = radial + y * dradial * 2.0 * y + self.p1 * 6.0 * y + 2.0 * self.p2 * x;
        (Vector2::new(xd, yd), Matrix2::new(dxd_dx, dxd_dy, dyd_dx, dyd_dy))
    }
}

/// Intrinsics, distortion and rolling-shutter timing of one camera.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub distortion: RadTan,
    pub width: usize,
    pub height: usize,
    /// Vertical middle of the distorted image, `(height - 1) / 2`.
    pub y0: f64,
    /// Seconds between the exposure of consecutive rows; zero for a global shutter.
    pub row_time_td: f64,
    /// +1 when rows are read top-down, -1 for bottom-up sensors.
    pub readout_sign: f64,
    /// Full-resolution sensor rows spanned by one row of this image (1 unless downsampled).
    pub row_scale: f64,
}

/// On-disk calibration record; every key is required and unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraCalibrationFile {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub k1: f64,
    pub k2: f64,
    pub p1: f64,
    pub p2: f64,
    pub width: usize,
    pub height: usize,
    pub row_time_td: f64,
    pub readout_sign: i32,
}

impl CameraModel {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        distortion: RadTan,
        width: usize,
        height: usize,
        row_time_td: f64,
    ) -> Result<Self, CameraError> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            distortion,
            width,
            height,
            y0: (height as f64 - 1.0) * 0.5,
            row_time_td,
            readout_sign: 1.0,
            row_scale: 1.0,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn pinhole(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        Self::new(fx, fy, cx, cy, RadTan::default(), width, height, 0.0).expect("valid pinhole parameters")
    }

    pub fn with_row_time(mut self, row_time_td: f64) -> Self {
        self.row_time_td = row_time_td;
        self
    }

    pub fn with_readout_sign(mut self, sign: f64) -> Self {
        self.readout_sign = sign.signum();
        self
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        let bad = |m: &str| Err(CameraError::InvalidModel(m.to_string()));
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad("focal lengths must be positive");
        }
        if self.width < 2 || self.height < 2 {
            return bad("image must be at least 2x2");
        }
        if !(self.y0 > 0.0 && self.y0 < self.height as f64) {
            return bad("y0 must lie inside the image");
        }
        if !(self.row_time_td >= 0.0) || !self.row_time_td.is_finite() {
            return bad("row_time_td must be finite and non-negative");
        }
        if self.readout_sign != 1.0 && self.readout_sign != -1.0 {
            return bad("readout_sign must be +1 or -1");
        }
        Ok(())
    }

    pub fn is_global_shutter(&self) -> bool {
        self.row_time_td == 0.0
    }

    pub fn from_file(file: &CameraCalibrationFile) -> Result<Self, CameraError> {
        if file.readout_sign != 1 && file.readout_sign != -1 {
            return Err(CameraError::InvalidModel(format!(
                "readout_sign must be 1 or -1, got {}",
                file.readout_sign
            )));
        }
        let cam = Self::new(
            file.fx,
            file.fy,
            file.cx,
            file.cy,
            RadTan {
                k1: file.k1,
                k2: file.k2,
                p1: file.p1,
                p2: file.p2,
            },
            file.width,
            file.height,
            file.row_time_td,
        )?
        .with_readout_sign(file.readout_sign as f64);
        Ok(cam)
    }

    pub fn to_file(&self) -> CameraCalibrationFile {
        CameraCalibrationFile {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            k1: self.distortion.k1,
            k2: self.distortion.k2,
            p1: self.distortion.p1,
            p2: self.distortion.p2,
            width: self.width,
            height: self.height,
            row_time_td: self.row_time_td,
            readout_sign: self.readout_sign as i32,
        }
    }

    /// Parses the `key = value` calibration text format.
    pub fn parse_calibration(text: &str) -> Result<Self, CameraError> {
        let file: CameraCalibrationFile = toml::from_str(text).map_err(|e| CameraError::Parse(e.to_string()))?;
        Self::from_file(&file)
    }

    pub fn to_calibration_string(&self) -> String {
        toml::to_string(&self.to_file()).expect("calibration serializes")
    }

    pub fn distort(&self, xy: &Vector2<f64>) -> Result<Vector2<f64>, CameraError> {
        self.distort_with_jacobian(xy).map(|(p, _)| p)
    }

    /// Distorted pixel and its 2x2 Jacobian w.r.t. the undistorted pixel.
    pub fn distort_with_jacobian(&self, xy: &Vector2<f64>) -> Result<(Vector2<f64>, Matrix2<f64>), CameraError> {
        if self.distortion.is_zero() {
            return Ok((*xy, Matrix2::identity()));
        }
        let x = (xy.x - self.cx) / self.fx;
        let y = (xy.y - self.cy) / self.fy;
        let r2 = x * x + y * y;
        let max = self.distortion.max_radius_sq();
        if r2 > max {
            return Err(CameraError::OutOfDomain {
                radius: r2.sqrt(),
                max: max.sqrt(),
            });
        }
        let (d, j) = self.distortion.apply(x, y);
        let p = Vector2::new(self.fx * d.x + self.cx, self.fy * d.y + self.cy);
        // chain the pixel normalization on both sides
        let jac = Matrix2::new(
            j[(0, 0)],
            j[(0, 1)] * self.fx / self.fy,
            j[(1, 0)] * self.fy / self.fx,
            j[(1, 1)],
        );
        Ok((p, jac))
    }

    /// Newton inversion of `distort`.
    pub fn undistort(&self, distorted: &Vector2<f64>) -> Result<Vector2<f64>, CameraError> {
        if self.distortion.is_zero() {
            return Ok(*distorted);
        }
        let mut u = *distorted;
        for _ in 0..UNDISTORT_MAX_ITERATIONS {
            let (d, j) = self.distort_with_jacobian(&u)?;
            let err = d - distorted;
            if err.norm() < UNDISTORT_TOLERANCE_PX {
                return Ok(u);
            }
            let step = j
                .try_inverse()
                .ok_or(CameraError::UndistortDiverged(distorted.x, distorted.y))?
                * err;
            u -= step;
        }
        let d = self.distort(&u)?;
        if (d - distorted).norm() < 1e-6 {
            Ok(u)
        } else {
            Err(CameraError::UndistortDiverged(distorted.x, distorted.y))
        }
    }

    /// Capture time of an undistorted pixel in row units relative to the middle row.
    pub fn capture_time(&self, xy: &Vector2<f64>) -> Result<f64, CameraError> {
        Ok(self.readout_sign * (self.distort(xy)?.y - self.y0))
    }

    /// Capture time (rows) and its gradient w.r.t. the undistorted pixel.
    pub fn capture_time_with_gradient(&self, xy: &Vector2<f64>) -> Result<(f64, Vector2<f64>), CameraError> {
        let (d, j) = self.distort_with_jacobian(xy)?;
        Ok((
            self.readout_sign * (d.y - self.y0),
            Vector2::new(j[(1, 0)], j[(1, 1)]) * self.readout_sign,
        ))
    }

    /// Capture time in full-resolution sensor rows, the unit of the per-row twist,
    /// with its gradient.
    pub fn sensor_time_with_gradient(&self, xy: &Vector2<f64>) -> Result<(f64, Vector2<f64>), CameraError> {
        let (t, g) = self.capture_time_with_gradient(xy)?;
        Ok((t * self.row_scale, g * self.row_scale))
    }

    /// Converts a capture time in rows to seconds.
    pub fn rows_to_seconds(&self, rows: f64) -> f64 {
        rows * self.row_time_td
    }

    pub fn project(&self, p: &Vector3<f64>) -> Result<Vector2<f64>, CameraError> {
        if p.z <= MIN_DEPTH {
            return Err(CameraError::BehindCamera(p.z));
        }
        Ok(Vector2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    /// Projection and its Jacobian w.r.t. the camera-frame point.
    pub fn project_with_jacobian(&self, p: &Vector3<f64>) -> Result<(Vector2<f64>, Matrix2x3<f64>), CameraError> {
        let u = self.project(p)?;
        let iz = 1.0 / p.z;
        let j = Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * p.x * iz * iz,
            0.0,
            self.fy * iz,
            -self.fy * p.y * iz * iz,
        );
        Ok((u, j))
    }

    /// Bearing with unit z for an undistorted pixel.
    pub fn bearing(&self, xy: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((xy.x - self.cx) / self.fx, (xy.y - self.cy) / self.fy, 1.0)
    }

    pub fn unproject(&self, xy: &Vector2<f64>, inv_depth: f64) -> Result<Vector3<f64>, CameraError> {
        if !(inv_depth > 0.0) {
            return Err(CameraError::InvalidDepth(inv_depth));
        }
        Ok(self.bearing(xy) / inv_depth)
    }

    pub fn in_image(&self, xy: &Vector2<f64>, margin: f64) -> bool {
        xy.x >= margin
            && xy.y >= margin
            && xy.x <= self.width as f64 - 1.0 - margin
            && xy.y <= self.height as f64 - 1.0 - margin
    }

    /// Same camera at a pyramid level (each level halves the resolution).
    pub fn scaled_to_level(&self, level: usize) -> CameraModel {
        if level == 0 {
            return self.clone();
        }
        let s = 0.5f64.powi(level as i32);
        let width = (self.width >> level).max(2);
        let height = (self.height >> level).max(2);
        CameraModel {
            fx: self.fx * s,
            fy: self.fy * s,
            cx: (self.cx + 0.5) * s - 0.5,
            cy: (self.cy + 0.5) * s - 0.5,
            distortion: self.distortion,
            width,
            height,
            y0: (self.y0 + 0.5) * s - 0.5,
            // one level-row spans 2^level sensor rows
            row_time_td: self.row_time_td / s,
            readout_sign: self.readout_sign,
            row_scale: self.row_scale / s,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cam(dist: RadTan) -> CameraModel {
        CameraModel::new(400.0, 400.0, 640.0, 512.0, dist, 1280, 1024, 29.47e-6).unwrap()
    }

    fn typical() -> RadTan {
        RadTan {
            k1: -0.25,
            k2: 0.08,
            p1: 1e-3,
            p2: -5e-4,
        }
    }

    #[test]
    fn zero_distortion_is_identity() {
        let c = cam(RadTan::default());
        let p = Vector2::new(123.4, 876.5);
        assert_eq!(c.distort(&p).unwrap(), p);
    }

    #[test]
    fn principal_point_is_fixed() {
        let c = cam(typical());
        let pp = Vector2::new(c.cx, c.cy);
        assert_eq!(c.distort(&pp).unwrap(), pp);
    }

    #[test]
    fn radial_polynomial_oracle() {
        let c = cam(RadTan {
            k1: -0.1,
            ..Default::default()
        });
        // x = 100/400 = 0.25, r^2 = 0.0625 -> x_d = 0.25 (1 - 0.00625)
        let d = c.distort(&Vector2::new(740.0, 512.0)).unwrap();
        let expected = 640.0 + 400.0 * 0.25 * (1.0 - 0.1 * 0.0625);
        assert_relative_eq!(d.x, expected, epsilon = 1e-12);
        assert_relative_eq!(d.y, 512.0, epsilon = 1e-12);
    }

    #[test]
    fn distort_jacobian_matches_finite_differences() {
        let c = cam(typical());
        let p = Vector2::new(300.0, 900.0);
        let (_, j) = c.distort_with_jacobian(&p).unwrap();
        let h = 1e-4;
        for k in 0..2 {
            let mut d = Vector2::zeros();
            d[k] = h;
            let num = (c.distort(&(p + d)).unwrap() - c.distort(&(p - d)).unwrap()) / (2.0 * h);
            assert_relative_eq!(j.column(k).into_owned(), num, epsilon = 1e-7);
        }
    }

    #[test]
    fn undistort_round_trip_over_grid() {
        let c = cam(typical());
        let mut worst: f64 = 0.0;
        for y in (0..1024).step_by(16) {
            for x in (0..1280).step_by(16) {
                let u = Vector2::new(x as f64, y as f64);
                let d = c.distort(&u).unwrap();
                let back = c.undistort(&d).unwrap();
                worst = worst.max((back - u).norm());
            }
        }
        assert!(worst < 1e-6, "worst round trip {worst}");
    }

    #[test]
    fn out_of_domain_rejected() {
        let c = cam(RadTan {
            k1: -0.5,
            ..Default::default()
        });
        // monotone up to r^2 = 1/1.5
        assert!(matches!(
            c.distort(&Vector2::new(640.0 + 400.0 * 2.0, 512.0)),
            Err(CameraError::OutOfDomain { .. })
        ));
    }

    #[test]
    fn capture_time_examples() {
        let c = CameraModel::pinhole(400.0, 400.0, 640.0, 512.0, 1280, 1024).with_row_time(29.47e-6);
        assert_eq!(c.y0, 511.5);
        assert_eq!(c.capture_time(&Vector2::new(10.0, c.y0)).unwrap(), 0.0);
        assert_relative_eq!(
            c.capture_time(&Vector2::new(10.0, c.y0 + 12.0)).unwrap(),
            12.0,
            epsilon = 1e-12
        );
        assert_relative_eq!(c.rows_to_seconds(100.0), 2.947e-3, epsilon = 1e-15);
        let flipped = c.clone().with_readout_sign(-1.0);
        assert_eq!(flipped.capture_time(&Vector2::new(0.0, c.y0 + 3.0)).unwrap(), -3.0);
    }

    #[test]
    fn capture_time_monotone_along_columns() {
        let c = cam(typical());
        for x in (0..1280).step_by(64) {
            let mut prev = f64::NEG_INFINITY;
            for y in 0..1024 {
                let t = c.capture_time(&Vector2::new(x as f64, y as f64)).unwrap();
                assert!(t > prev, "column {x} row {y}");
                prev = t;
            }
        }
    }

    #[test]
    fn project_examples() {
        let c = CameraModel::pinhole(400.0, 400.0, 640.0, 512.0, 1280, 1024);
        assert_eq!(
            c.project(&Vector3::new(0.0, 0.0, 1.0)).unwrap(),
            Vector2::new(640.0, 512.0)
        );
        assert_eq!(
            c.project(&Vector3::new(1.0, 0.0, 2.0)).unwrap(),
            Vector2::new(840.0, 512.0)
        );
        assert!(matches!(
            c.project(&Vector3::new(0.0, 0.0, 1e-7)),
            Err(CameraError::BehindCamera(_))
        ));
        assert!(matches!(
            c.unproject(&Vector2::new(1.0, 1.0), 0.0),
            Err(CameraError::InvalidDepth(_))
        ));
    }

    #[test]
    fn project_unproject_round_trip() {
        let c = CameraModel::pinhole(400.0, 410.0, 640.0, 512.0, 1280, 1024);
        for p in [
            Vector3::new(0.3, -0.2, 2.5),
            Vector3::new(-1.1, 0.7, 4.0),
            Vector3::new(0.01, 0.02, 0.5),
        ] {
            let u = c.project(&p).unwrap();
            let back = c.unproject(&u, 1.0 / p.z).unwrap();
            assert!((back - p).norm() < 1e-9 * p.norm());
        }
    }

    #[test]
    fn calibration_text_round_trip_and_strictness() {
        let c = cam(typical()).with_readout_sign(-1.0);
        let text = c.to_calibration_string();
        assert_eq!(CameraModel::parse_calibration(&text).unwrap(), c);
        let extra = format!("{text}\nskew = 0.0\n");
        assert!(matches!(
            CameraModel::parse_calibration(&extra),
            Err(CameraError::Parse(_))
        ));
        let missing = text.replace("row_time_td", "#row_time_td");
        assert!(CameraModel::parse_calibration(&missing).is_err());
    }

    #[test]
    fn pyramid_level_keeps_geometry() {
        let c = CameraModel::pinhole(400.0, 400.0, 639.5, 511.5, 1280, 1024).with_row_time(1e-5);
        let l1 = c.scaled_to_level(1);
        let p = Vector3::new(0.4, -0.3, 2.0);
        let u0 = c.project(&p).unwrap();
        let u1 = l1.project(&p).unwrap();
        assert_relative_eq!(
            (u1 + Vector2::new(0.5, 0.5)) * 2.0,
            u0 + Vector2::new(0.5, 0.5),
            epsilon = 1e-9
        );
        // physical capture time is level independent
        let t0 = c.rows_to_seconds(c.capture_time(&u0).unwrap());
        let t1 = l1.rows_to_seconds(l1.capture_time(&u1).unwrap());
        assert_relative_eq!(t0, t1, epsilon = 1e-15);
    }
}
