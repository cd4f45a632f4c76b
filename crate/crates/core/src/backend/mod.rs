//! Sliding-window estimator.

pub mod config;
pub mod marginalization;
pub mod odometry;
pub mod optimizer;
pub mod points;
pub mod system;
pub mod window;
