//! Synthetic rolling-shutter visual-inertial sequences: analytic
//! trajectories, a textured box room rendered per pixel at each row's
//! capture time, and IMU samples consistent with the same motion.

pub mod export;
pub mod imu;
pub mod render;
pub mod scene;
pub mod spec;
pub mod trajectory;

pub use export::{SimError, Simulation, GS_DIR, RS_DIR, SPEC_FILE};
pub use spec::SimSpec;
