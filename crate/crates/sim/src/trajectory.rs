//! Analytic IMU trajectories `T_WI(t)` built from segments.
//!
//! Each segment starts from the state the previous one ended in. Before the
//! first and after the last segment the motion continues with the constant
//! body twist of the boundary state, so the trajectory is defined (and C^1)
//! for every time.

use nalgebra::{Vector3, Vector6};
use rsvio_core::lie::{hat, so3_right_jacobian, Pose3, Rot3};
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

/// Joints whose velocities differ by more than this are rejected.
pub const CONTINUITY_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Segment {
    /// Constant body-frame linear (m/s) and angular (rad/s) velocity.
    ConstantTwist {
        duration: f64,
        linear: [f64; 3],
        angular: [f64; 3],
    },
    /// Offsets `A (sin(2 pi f t + phase) - sin(phase))` of the world position
    /// (first three entries, meters) and of the rotation vector applied on the
    /// right of the start attitude (last three, radians). With a positive
    /// `ramp` the offsets are faded in over that many seconds by a quintic
    /// smoothstep, so velocity and acceleration start at zero.
    Sinusoid {
        duration: f64,
        amplitude: [f64; 6],
        frequency: [f64; 6],
        phase: [f64; 6],
        #[serde(default)]
        ramp: f64,
    },
}

impl Segment {
    pub fn duration(&self) -> f64 {
        match self {
            Segment::ConstantTwist { duration, .. } | Segment::Sinusoid { duration, .. } => *duration,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySpec {
    pub start_position: [f64; 3],
    /// Rotation vector of the initial `R_WI`.
    pub start_rotation: [f64; 3],
    pub segments: Vec<Segment>,
}

/// Pose and derivatives at one instant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Kinematics {
    /// `T_WI`.
    pub pose: Pose3,
    /// World-frame velocity.
    pub velocity: Vector3<f64>,
    /// World-frame acceleration.
    pub acceleration: Vector3<f64>,
    /// Body-frame angular velocity.
    pub angular_velocity: Vector3<f64>,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TrajectoryError {
    #[error("segment {0} has non-positive or non-finite duration")]
    Duration(usize),
    #[error("velocity jumps by {jump:.3e} at the start of segment {segment}")]
    Discontinuous { segment: usize, jump: f64 },
    #[error("trajectory has no segments")]
    Empty,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    segments: Vec<Segment>,
    /// Start time and start pose of each segment.
    starts: Vec<(f64, Pose3)>,
    end: (f64, Kinematics),
    begin: Kinematics,
}

fn arr(v: &[f64; 3]) -> Vector3<f64> {
    Vector3::new(v[0], v[1], v[2])
}

/// Value, first and second derivative of `A (sin(w t + p) - sin p)`.
fn wave(a: f64, f: f64, p: f64, t: f64) -> (f64, f64, f64) {
    let w = TAU * f;
    let arg = w * t + p;
    (a * (arg.sin() - p.sin()), a * w * arg.cos(), -a * w * w * arg.sin())
}

/// Quintic smoothstep over `[0, ramp]` and its first two derivatives.
fn envelope(ramp: f64, t: f64) -> (f64, f64, f64) {
    if ramp <= 0.0 || t >= ramp {
        return (1.0, 0.0, 0.0);
    }
    let s = t.max(0.0) / ramp;
    let e = s * s * s * (s * (6.0 * s - 15.0) + 10.0);
    let de = 30.0 * s * s * (s - 1.0) * (s - 1.0) / ramp;
    let dde = 60.0 * s * (2.0 * s * s - 3.0 * s + 1.0) / (ramp * ramp);
    (e, de, dde)
}

fn segment_kinematics(seg: &Segment, start: &Pose3, tau: f64) -> Kinematics {
    match seg {
        Segment::ConstantTwist { linear, angular, .. } => constant_twist(start, &arr(linear), &arr(angular), tau),
        Segment::Sinusoid {
            amplitude,
            frequency,
            phase,
            ramp,
            ..
        } => {
            let (e, de, dde) = envelope(*ramp, tau);
            let faded = |(x, dx, ddx): (f64, f64, f64)| (e * x, de * x + e * dx, dde * x + 2.0 * de * dx + e * ddx);
            let mut p = Vector3::zeros();
            let mut dp = Vector3::zeros();
            let mut ddp = Vector3::zeros();
            let mut th = Vector3::zeros();
            let mut dth = Vector3::zeros();
            for k in 0..3 {
                let (x, dx, ddx) = faded(wave(amplitude[k], frequency[k], phase[k], tau));
                p[k] = x;
                dp[k] = dx;
                ddp[k] = ddx;
                let (y, dy, _) = faded(wave(amplitude[k + 3], frequency[k + 3], phase[k + 3], tau));
                th[k] = y;
                dth[k] = dy;
            }
            let rotation = start.rotation * Rot3::exp(&th);
            Kinematics {
                pose: Pose3::new(rotation, start.translation + p),
                velocity: dp,
                acceleration: ddp,
                angular_velocity: so3_right_jacobian(&th) * dth,
            }
        }
    }
}

/// Motion under a constant body twist starting at `start`.
fn constant_twist(start: &Pose3, v: &Vector3<f64>, w: &Vector3<f64>, tau: f64) -> Kinematics {
    let xi = Vector6::new(v.x, v.y, v.z, w.x, w.y, w.z);
    let pose = *start * Pose3::exp(&(xi * tau));
    let velocity = pose.rotation.rotate(v);
    Kinematics {
        pose,
        velocity,
        acceleration: pose.rotation.matrix() * (hat(w) * v),
        angular_velocity: *w,
    }
}

/// Body-frame velocity of a kinematic state.
fn body_velocity(k: &Kinematics) -> Vector3<f64> {
    k.pose.rotation.inverse().rotate(&k.velocity)
}

impl Trajectory {
    pub fn new(spec: &TrajectorySpec) -> Result<Self, TrajectoryError> {
        if spec.segments.is_empty() {
            return Err(TrajectoryError::Empty);
        }
        let mut pose = Pose3::new(Rot3::exp(&arr(&spec.start_rotation)), arr(&spec.start_position));
        let mut t = 0.0;
        let mut starts = Vec::new();
        let mut prev_end: Option<Kinematics> = None;
        for (i, seg) in spec.segments.iter().enumerate() {
            let d = seg.duration();
            if !(d.is_finite() && d > 0.0) {
                return Err(TrajectoryError::Duration(i));
            }
            let k0 = segment_kinematics(seg, &pose, 0.0);
            if let Some(prev) = prev_end {
                let jump = (prev.velocity - k0.velocity)
                    .norm()
                    .max((prev.angular_velocity - k0.angular_velocity).norm());
                if jump > CONTINUITY_TOLERANCE {
                    return Err(TrajectoryError::Discontinuous { segment: i, jump });
                }
            }
            starts.push((t, pose));
            let k1 = segment_kinematics(seg, &pose, d);
            pose = k1.pose;
            prev_end = Some(k1);
            t += d;
        }
        let begin = segment_kinematics(&spec.segments[0], &starts[0].1, 0.0);
        Ok(Self {
            segments: spec.segments.clone(),
            starts,
            end: (t, prev_end.expect("at least one segment")),
            begin,
        })
    }

    pub fn duration(&self) -> f64 {
        self.end.0
    }

    pub fn at(&self, t: f64) -> Kinematics {
        if t < 0.0 {
            let b = &self.begin;
            return constant_twist(&b.pose, &body_velocity(b), &b.angular_velocity, t);
        }
        let (t_end, e) = &self.end;
        if t >= *t_end {
            return constant_twist(&e.pose, &body_velocity(e), &e.angular_velocity, t - t_end);
        }
        let i = self.starts.partition_point(|(s, _)| *s <= t) - 1;
        let (s, start) = &self.starts[i];
        segment_kinematics(&self.segments[i], start, t - s)
    }

    pub fn pose(&self, t: f64) -> Pose3 {
        self.at(t).pose
    }
}
