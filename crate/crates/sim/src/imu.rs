use crate::trajectory::Trajectory;
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// How specific force and angular rate are derived from the trajectory.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Synthesis {
    /// Exact instantaneous values at each sample time.
    Instantaneous,
    /// Mean values over each sample interval, so that holding each sample
    /// until the next one reproduces the rotation and velocity at the next
    /// sample exactly.
    #[default]
    Integrated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImuSimSpec {
    pub rate_hz: f64,
    pub synthesis: Synthesis,
    /// White-noise densities (rad/s/sqrt(Hz), m/s^2/sqrt(Hz)).
    pub gyro_noise_density: f64,
    pub accel_noise_density: f64,
    /// Bias random-walk densities.
    pub gyro_random_walk: f64,
    pub accel_random_walk: f64,
    pub initial_gyro_bias: [f64; 3],
    pub initial_accel_bias: [f64; 3],
    /// Gravity magnitude, m/s^2; gravity points along -z of the world.
    pub gravity: f64,
}

impl Default for ImuSimSpec {
    fn default() -> Self {
        Self {
            rate_hz: 200.0,
            synthesis: Synthesis::default(),
            gyro_noise_density: 0.0,
            accel_noise_density: 0.0,
            gyro_random_walk: 0.0,
            accel_random_walk: 0.0,
            initial_gyro_bias: [0.0; 3],
            initial_accel_bias: [0.0; 3],
            gravity: rsvio_core::state::STANDARD_GRAVITY,
        }
    }
}

impl ImuSimSpec {
    pub fn gravity_vector(&self) -> Vector3<f64> {
        Vector3::new(0.0, 0.0, -self.gravity)
    }

    pub fn is_noise_free(&self) -> bool {
        self.gyro_noise_density == 0.0
            && self.accel_noise_density == 0.0
            && self.gyro_random_walk == 0.0
            && self.accel_random_walk == 0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimImuSample {
    pub timestamp: f64,
    pub gyro: Vector3<f64>,
    pub accel: Vector3<f64>,
    pub gyro_bias: Vector3<f64>,
    pub accel_bias: Vector3<f64>,
}

/// Noise-free angular rate and specific force at `t` for the given mode.
pub fn ideal_sample(
    traj: &Trajectory,
    t: f64,
    dt: f64,
    g: &Vector3<f64>,
    mode: Synthesis,
) -> (Vector3<f64>, Vector3<f64>) {
    let k0 = traj.at(t);
    match mode {
        Synthesis::Instantaneous => {
            let accel = k0.pose.rotation.inverse().rotate(&(k0.acceleration - g));
            (k0.angular_velocity, accel)
        }
        Synthesis::Integrated => {
            let k1 = traj.at(t + dt);
            let rel = k0.pose.rotation.inverse() * k1.pose.rotation;
            let gyro = rel.log() / dt;
            let accel = k0
                .pose
                .rotation
                .inverse()
                .rotate(&((k1.velocity - k0.velocity - g * dt) / dt));
            (gyro, accel)
        }
    }
}

/// Samples at `k / rate` for every `k` with `k / rate` in `[t0, t1)`.
pub fn synthesize_imu(traj: &Trajectory, spec: &ImuSimSpec, t0: f64, t1: f64, seed: u64) -> Vec<SimImuSample> {
    let dt = 1.0 / spec.rate_hz;
    let g = spec.gravity_vector();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss3 = |rng: &mut ChaCha8Rng| {
        Vector3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        )
    };
    let mut bg = Vector3::from(spec.initial_gyro_bias);
    let mut ba = Vector3::from(spec.initial_accel_bias);
    let k0 = (t0 * spec.rate_hz).ceil() as i64;
    let mut out = Vec::new();
    let mut k = k0;
    loop {
        let t = k as f64 / spec.rate_hz;
        if t >= t1 {
            break;
        }
        let (w, a) = ideal_sample(traj, t, dt, &g, spec.synthesis);
        let mut gyro = w + bg;
        let mut accel = a + ba;
        if !spec.is_noise_free() {
            let sd = 1.0 / dt.sqrt();
            gyro += gauss3(&mut rng) * spec.gyro_noise_density * sd;
            accel += gauss3(&mut rng) * spec.accel_noise_density * sd;
        }
        out.push(SimImuSample {
            timestamp: t,
            gyro,
            accel,
            gyro_bias: bg,
            accel_bias: ba,
        });
        if !spec.is_noise_free() {
            bg += gauss3(&mut rng) * spec.gyro_random_walk * dt.sqrt();
            ba += gauss3(&mut rng) * spec.accel_random_walk * dt.sqrt();
        }
        k += 1;
    }
    out
}
