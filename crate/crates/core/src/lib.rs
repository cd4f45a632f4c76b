//! Direct visual-inertial odometry for rolling-shutter cameras.
//!
//! The building blocks are Lie-group utilities, a rolling-shutter camera
//! model, IMU preintegration, a photometric residual with per-frame
//! constant-velocity twists, and a sliding-window backend that jointly
//! optimizes poses, twists, IMU states, scale and gravity direction.

pub mod backend;
pub mod camera;
pub mod image;
pub mod imu;
pub mod lie;
pub mod photometric;
pub mod state;
pub mod twist;
