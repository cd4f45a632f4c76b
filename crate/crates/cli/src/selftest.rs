//! Oracle checks behind `rsvio selftest`.
//!
//! Every check compares a library routine against an independent oracle:
//! power series and closed forms for the Lie algebra, central finite
//! differences for the Jacobians, the simulator's analytic trajectories for
//! preintegration, dense batch solves for marginalization and a
//! derivative-free search for trajectory alignment. Random cases come from
//! fixed seeds, so a run is reproducible.
//!
//! Jacobian errors are reported as `|numeric - analytic| / max(|analytic|, floor)`
//! with a floor of 1 for photometric and inertial entries and the row time
//! for twist residuals, whose entries are of that order.

use nalgebra::{DMatrix, DVector, Matrix4, Vector2, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rsvio_core::backend::config::SolverConfig;
use rsvio_core::backend::marginalization::{schur_complement, DualPriors};
use rsvio_core::camera::{CameraModel, RadTan};
use rsvio_core::image::IntensitySampler;
use rsvio_core::imu::{
    layout, predict_state, preintegrate, ImuFactor, ImuNoise, ImuSample, Preintegrated, PreintegrationMode, Vector15,
};
use rsvio_core::lie::{adjoint, exp_se3, hat6, log_se3, Pose3, Rot3, Twist6};
use rsvio_core::photometric::{
    cols, evaluate_observation, host_capture_time, linearize_observation, HostPatch, HostPoint, ObsRow,
    PhotometricConfig, OBS_DIM, PATTERN_SIZE,
};
use rsvio_core::state::{AffineBrightness, Calibration, ImuBias, KeyframeState, MetricState, ScaleGravity};
use rsvio_core::twist::{camera_twist, prior_twist, TwistPriorTerm};
use rsvio_dataset::TimedPose;
use rsvio_eval::{align_se3, ate, RunMetadata};
use rsvio_sim::imu::{synthesize_imu, ImuSimSpec};
use rsvio_sim::trajectory::{Segment, Trajectory, TrajectorySpec};
use std::f64::consts::PI;
use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Math,
    Jacobians,
    Preintegration,
    Marginalization,
    Ate,
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Suite::Math => "math",
            Suite::Jacobians => "jacobians",
            Suite::Preintegration => "preintegration",
            Suite::Marginalization => "marginalization",
            Suite::Ate => "ate",
        };
        f.write_str(name)
    }
}

#[derive(Clone, Debug)]
pub struct Check {
    pub suite: Suite,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {}/{}: {}", self.suite, self.name, self.detail)
    }
}

/// A check passing when the worst error over `cases` stays within `limit`.
fn bounded(suite: Suite, name: &'static str, worst: f64, limit: f64, cases: usize) -> Check {
    Check {
        suite,
        name,
        passed: worst.is_finite() && worst <= limit,
        detail: format!("worst {worst:.3e} (limit {limit:.0e}, {cases} cases)"),
    }
}

fn flag(suite: Suite, name: &'static str, passed: bool, detail: String) -> Check {
    Check {
        suite,
        name,
        passed,
        detail,
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform3(rng: &mut ChaCha8Rng, r: f64) -> Vector3<f64> {
    Vector3::from_fn(|_, _| rng.random_range(-r..r))
}

fn uniform6(rng: &mut ChaCha8Rng, r: f64) -> Twist6 {
    Twist6::from_fn(|_, _| rng.random_range(-r..r))
}

/// Twist with translation in `[-t, t]^3` and a rotation angle below `max_angle`.
fn random_twist(rng: &mut ChaCha8Rng, t: f64, max_angle: f64) -> Twist6 {
    let axis = loop {
        let a = uniform3(rng, 1.0);
        if a.norm() > 1e-3 {
            break a.normalize();
        }
    };
    let w = axis * rng.random_range(0.0..max_angle);
    let v = uniform3(rng, t);
    Twist6::new(v.x, v.y, v.z, w.x, w.y, w.z)
}

fn random_pose(rng: &mut ChaCha8Rng, t: f64) -> Pose3 {
    exp_se3(&random_twist(rng, t, PI - 1e-3), 1.0)
}

fn max_abs(m: &Matrix4<f64>) -> f64 {
    m.abs().max()
}

fn pose_gap(a: &Pose3, b: &Pose3) -> f64 {
    max_abs(&(a.matrix() - b.matrix()))
}

/// Truncated power series of the 4x4 matrix exponential, in double-angle
/// form so that large arguments stay accurate.
fn expm_series(m: &Matrix4<f64>) -> Matrix4<f64> {
    let halvings = 6;
    let scaled = m / f64::from(1 << halvings);
    let mut sum = Matrix4::identity();
    let mut term = Matrix4::identity();
    for k in 1..30 {
        term = term * scaled / k as f64;
        sum += term;
    }
    for _ in 0..halvings {
        sum = sum * sum;
    }
    sum
}

const MATH_CASES: usize = 1000;

pub fn math_suite() -> Vec<Check> {
    let mut r = rng(11);
    let (mut exp_series, mut round_trip, mut log_exp, mut adj, mut adj_exp) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..MATH_CASES {
        let xi = random_twist(&mut r, 3.0, PI - 1e-3);
        let t = exp_se3(&xi, 1.0);
        exp_series = exp_series.max(max_abs(&(t.matrix() - expm_series(&hat6(&xi)))));
        round_trip = round_trip.max(pose_gap(&exp_se3(&log_se3(&t), 1.0), &t));
        log_exp = log_exp.max((log_se3(&t) - xi).abs().max());

        let g = random_pose(&mut r, 2.0);
        let d = random_twist(&mut r, 1.0, 1.0);
        let lhs = g.matrix() * hat6(&d) * g.inverse().matrix();
        adj = adj.max(max_abs(&(lhs - hat6(&(adjoint(&g) * d)))));
        let conj = g * exp_se3(&d, 1.0) * g.inverse();
        adj_exp = adj_exp.max(pose_gap(&conj, &exp_se3(&(adjoint(&g) * d), 1.0)));
    }

    // The IMU body twist and the camera twist it induces describe one camera
    // path; in the free-scale frame the per-row twist traces the same path
    // with translations divided by the scale.
    let mut path = 0.0f64;
    let mut scaled_path = 0.0f64;
    let shrink = |p: &Pose3, s: f64| Pose3::new(p.rotation, p.translation / s);
    for _ in 0..MATH_CASES {
        let ext = random_pose(&mut r, 0.5);
        let t_wi = random_pose(&mut r, 3.0);
        let xi = random_twist(&mut r, 3.0, 4.0);
        let td = r.random_range(1e-5..1e-4);
        let s = r.random_range(0.2..5.0);
        let calib = Calibration::new(
            ext,
            CameraModel::pinhole(200.0, 200.0, 160.0, 128.0, 320, 256).with_row_time(td),
        );
        let xc = camera_twist(&xi, &calib);
        let xr = prior_twist(&xc, s, td);
        let t_cw = ext * t_wi.inverse();
        for &rows in &[0.0, 17.0, -120.0, 255.0, 1000.0] {
            let t = rows * td;
            let lhs = ext * (t_wi * exp_se3(&xi, t)).inverse();
            let rhs = exp_se3(&xc, t) * t_cw;
            path = path.max(pose_gap(&lhs, &rhs));
            let free = exp_se3(&xr, rows) * shrink(&t_cw, s);
            scaled_path = scaled_path.max(pose_gap(&free, &shrink(&rhs, s)));
        }
    }
    vec![
        bounded(
            Suite::Math,
            "exp matches the matrix series",
            exp_series,
            1e-8,
            MATH_CASES,
        ),
        bounded(Suite::Math, "exp(log(T)) round trip", round_trip, 1e-8, MATH_CASES),
        bounded(Suite::Math, "log(exp(xi)) round trip", log_exp, 1e-8, MATH_CASES),
        bounded(Suite::Math, "adjoint conjugates the hat map", adj, 1e-10, MATH_CASES),
        bounded(
            Suite::Math,
            "adjoint transports exponentials",
            adj_exp,
            1e-10,
            MATH_CASES,
        ),
        bounded(
            Suite::Math,
            "IMU and camera twists trace one path",
            path,
            1e-10,
            MATH_CASES * 5,
        ),
        bounded(
            Suite::Math,
            "per-row twist traces the scaled path",
            scaled_path,
            1e-10,
            MATH_CASES * 5,
        ),
    ]
}

/// Smooth texture with an exact gradient.
struct Analytic;

impl IntensitySampler for Analytic {
    fn width(&self) -> usize {
        320
    }
    fn height(&self) -> usize {
        256
    }
    fn sample(&self, x: f64, y: f64) -> Option<(f64, Vector2<f64>)> {
        if !(0.0..=319.0).contains(&x) || !(0.0..=255.0).contains(&y) {
            return None;
        }
        let v = 120.0 + 50.0 * (0.11 * x).sin() * (0.07 * y).cos() + 30.0 * (0.05 * x + 0.13 * y).sin();
        let gx = 5.5 * (0.11 * x).cos() * (0.07 * y).cos() + 1.5 * (0.05 * x + 0.13 * y).cos();
        let gy = -3.5 * (0.11 * x).sin() * (0.07 * y).sin() + 3.9 * (0.05 * x + 0.13 * y).cos();
        Some((v, Vector2::new(gx, gy)))
    }
}

pub const JACOBIAN_STATES: usize = 100;

fn photometric_jacobians(r: &mut ChaCha8Rng) -> (f64, usize) {
    let td = 3e-5;
    let cam = CameraModel::new(
        230.0,
        225.0,
        161.0,
        127.0,
        RadTan {
            k1: -0.05,
            k2: 0.01,
            p1: 1e-3,
            p2: -5e-4,
        },
        320,
        256,
        td,
    )
    .expect("valid camera");
    let cfg = PhotometricConfig {
        rs_max_iterations: 100,
        rs_tolerance_rows: 1e-13,
        ..Default::default()
    };
    let frame = |pose: Pose3, twist: Twist6, a: f64, b: f64| {
        let mut kf = KeyframeState::new(0.0, pose);
        kf.twist = twist;
        kf.affine = AffineBrightness { a, b };
        kf
    };
    let perturbed = |kf: &KeyframeState, d: &ObsRow, o: usize| {
        let mut k = *kf;
        k.pose = exp_se3(&d.fixed_rows::<6>(o).into_owned(), 1.0) * k.pose;
        k.twist += d.fixed_rows::<6>(o + 6);
        k.affine.a += d[o + 12];
        k.affine.b += d[o + 13];
        k
    };
    let mut worst = 0.0f64;
    let mut states = 0;
    let mut attempts = 0;
    while states < JACOBIAN_STATES && attempts < 100 * JACOBIAN_STATES {
        attempts += 1;
        let host = frame(
            exp_se3(&uniform6(r, 0.2), 1.0),
            uniform6(r, 3e-4),
            r.random_range(-0.1..0.1),
            r.random_range(-3.0..3.0),
        );
        let mut target = frame(
            Pose3::identity(),
            uniform6(r, 3e-4),
            r.random_range(-0.2..0.2),
            r.random_range(-5.0..5.0),
        );
        target.pose = exp_se3(&uniform6(r, 0.08), 1.0) * host.pose;
        let pixel = Vector2::new(r.random_range(60.0..260.0), r.random_range(50.0..200.0));
        let idepth = r.random_range(0.2..1.0);
        let Ok(host_time) = host_capture_time(&cam, &pixel, &cfg) else {
            continue;
        };
        let Some(patch) = HostPatch::sample(&Analytic, &pixel, &cfg) else {
            continue;
        };
        let point = HostPoint {
            pixel,
            idepth,
            host_time,
        };
        let Ok(lin) = linearize_observation(&point, &patch, &host, &target, &Analytic, &cam, &cfg) else {
            continue;
        };
        let mut state_worst = 0.0f64;
        let mut complete = true;
        for c in 0..OBS_DIM {
            // a unit twist moves the pose by hundreds of rows
            let twist_column = (cols::HOST_TWIST..cols::HOST_TWIST + 6).contains(&c)
                || (cols::TARGET_TWIST..cols::TARGET_TWIST + 6).contains(&c);
            let h = if twist_column { 1e-7 } else { 1e-5 };
            let mut d = ObsRow::zeros();
            d[c] = h;
            let eval = |d: &ObsRow| {
                let p = HostPoint {
                    idepth: idepth + d[cols::IDEPTH],
                    ..point
                };
                evaluate_observation(
                    &p,
                    &patch,
                    &perturbed(&host, d, cols::HOST_POSE),
                    &perturbed(&target, d, cols::TARGET_POSE),
                    &Analytic,
                    &cam,
                    &cfg,
                )
            };
            let (Ok(ep), Ok(em)) = (eval(&d), eval(&(-d))) else {
                complete = false;
                break;
            };
            for k in 0..PATTERN_SIZE {
                let num = (ep.residuals[k] - em.residuals[k]) / (2.0 * h);
                let ana = lin.rows[k][c];
                state_worst = state_worst.max((num - ana).abs() / ana.abs().max(1.0));
            }
        }
        if complete {
            worst = worst.max(state_worst);
            states += 1;
        }
    }
    (if states == JACOBIAN_STATES { worst } else { f64::NAN }, states)
}

fn wiggly_imu(n: usize, dt: f64) -> Vec<ImuSample> {
    (0..n)
        .map(|k| {
            let t = k as f64 * dt;
            ImuSample::new(
                t,
                Vector3::new(0.4 * (3.0 * t).sin(), 0.7, -0.5 * (2.0 * t).cos()),
                Vector3::new(1.0 + (5.0 * t).sin(), 9.6, 0.8 * t),
            )
        })
        .collect()
}

fn metric_perturbed(s: &MetricState, d: &Vector15) -> MetricState {
    use layout::*;
    let mut b = s.bias.to_vector();
    b += d.fixed_rows::<6>(BIAS_ACC);
    MetricState {
        rotation: s.rotation * Rot3::exp(&d.fixed_rows::<3>(THETA).into_owned()),
        position: s.position + d.fixed_rows::<3>(POS),
        velocity: s.velocity + d.fixed_rows::<3>(VEL),
        bias: ImuBias::from_vector(&Vector6::from_fn(|i, _| b[i])),
    }
}

fn imu_jacobians(r: &mut ChaCha8Rng) -> f64 {
    let g = Vector3::new(0.0, 0.0, -9.81);
    let factor = ImuFactor::new(
        wiggly_imu(51, 0.005),
        0.0,
        0.25,
        ImuBias::default(),
        ImuNoise::default(),
        PreintegrationMode::Standard,
    )
    .expect("valid samples");
    let state = |r: &mut ChaCha8Rng| MetricState {
        rotation: Rot3::exp(&uniform3(r, 2.0)),
        position: uniform3(r, 5.0),
        velocity: uniform3(r, 2.0),
        bias: ImuBias::new(uniform3(r, 0.005), uniform3(r, 0.005)),
    };
    let h = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..JACOBIAN_STATES {
        let si = state(r);
        let sj = state(r);
        let lin = factor.linearize(&si, &sj, &g);
        for which in 0..2 {
            let jac = if which == 0 { &lin.jac_i } else { &lin.jac_j };
            for k in 0..15 {
                let mut d = Vector15::zeros();
                d[k] = h;
                let res = |d: &Vector15| {
                    if which == 0 {
                        factor.residual(&metric_perturbed(&si, d), &sj, &g)
                    } else {
                        factor.residual(&si, &metric_perturbed(&sj, d), &g)
                    }
                };
                let num = (res(&d) - res(&(-d))) / (2.0 * h);
                let ana = jac.column(k);
                worst = worst.max((num - ana).norm() / ana.norm().max(1.0));
            }
        }
    }
    worst
}

fn twist_jacobians(r: &mut ChaCha8Rng) -> f64 {
    let td = 3e-5;
    let h = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..JACOBIAN_STATES {
        let calib = Calibration::new(
            exp_se3(&uniform6(r, 0.5), 1.0),
            CameraModel::pinhole(250.0, 250.0, 160.0, 128.0, 320, 256).with_row_time(td),
        );
        let mut kf = KeyframeState::new(0.0, exp_se3(&uniform6(r, 1.0), 1.0));
        kf.velocity = uniform3(r, 3.0);
        kf.bias.gyro = uniform3(r, 0.1);
        kf.twist = uniform6(r, 2.0) * td;
        let s = r.random_range(0.3..3.0);
        let gravity = Rot3::exp(&uniform3(r, 0.5));
        let sg = ScaleGravity::new(s, gravity);
        let term = TwistPriorTerm::with_default_weight(uniform3(r, 0.5));
        let Some(lin) = term.linearize(&kf, &sg, &calib) else {
            return f64::NAN;
        };
        // pose 6, twist 6, velocity 3, gyro bias 3, log scale 1, gravity 2
        let eval = |d: &[f64; 21]| {
            let mut k = kf;
            k.pose = exp_se3(&Twist6::from_column_slice(&d[0..6]), 1.0) * k.pose;
            k.twist += Twist6::from_column_slice(&d[6..12]);
            k.velocity += Vector3::from_column_slice(&d[12..15]);
            k.bias.gyro += Vector3::from_column_slice(&d[15..18]);
            let sg2 = ScaleGravity::new(s * d[18].exp(), Rot3::exp(&Vector3::new(d[19], d[20], 0.0)) * gravity);
            term.linearize(&k, &sg2, &calib).map(|l| l.residual)
        };
        for k in 0..21 {
            let mut dp = [0.0; 21];
            let mut dm = [0.0; 21];
            dp[k] = h;
            dm[k] = -h;
            let (Some(rp), Some(rm)) = (eval(&dp), eval(&dm)) else {
                return f64::NAN;
            };
            let num = (rp - rm) / (2.0 * h);
            let ana: Vector6<f64> = match k {
                0..=5 => lin.d_pose.column(k).into_owned(),
                6..=11 => lin.d_twist.column(k - 6).into_owned(),
                12..=14 => lin.d_velocity.column(k - 12).into_owned(),
                15..=17 => lin.d_bias_gyro.column(k - 15).into_owned(),
                18 => lin.d_log_scale,
                _ => lin.d_gravity.column(k - 19).into_owned(),
            };
            worst = worst.max((num - ana).norm() / ana.norm().max(td));
        }
    }
    worst
}

pub fn jacobian_suite() -> Vec<Check> {
    let (photo, states) = photometric_jacobians(&mut rng(21));
    vec![
        bounded(
            Suite::Jacobians,
            "photometric residual through the rolling-shutter fixed point",
            photo,
            1e-4,
            states,
        ),
        bounded(
            Suite::Jacobians,
            "inertial residual",
            imu_jacobians(&mut rng(22)),
            1e-4,
            JACOBIAN_STATES,
        ),
        bounded(
            Suite::Jacobians,
            "twist residual including log-scale",
            twist_jacobians(&mut rng(23)),
            1e-4,
            JACOBIAN_STATES,
        ),
    ]
}

/// Worst rotation (rad), velocity (m/s) and position (m) error of noise-free
/// preintegration at the default IMU rate over consecutive `window`-second
/// intervals of a simulated trajectory.
pub fn zero_noise_integration_error(spec: &TrajectorySpec, window: f64) -> (f64, f64, f64, usize) {
    let traj = Trajectory::new(spec).expect("valid trajectory");
    let duration = traj.duration();
    let imu = ImuSimSpec::default();
    let g = imu.gravity_vector();
    let samples: Vec<ImuSample> = synthesize_imu(&traj, &imu, 0.0, duration, 0)
        .into_iter()
        .map(|s| ImuSample::new(s.timestamp, s.gyro, s.accel))
        .collect();
    let (mut er, mut ev, mut ep) = (0.0f64, 0.0f64, 0.0f64);
    let n = (duration / window).floor() as usize;
    for k in 0..n {
        let (ti, tj) = (k as f64 * window, (k + 1) as f64 * window);
        let Ok(pre) = preintegrate(
            &samples,
            ti,
            tj,
            ImuBias::default(),
            ImuNoise::default(),
            PreintegrationMode::Standard,
        ) else {
            return (f64::NAN, f64::NAN, f64::NAN, k);
        };
        let a = traj.at(ti);
        let b = traj.at(tj);
        let start = MetricState {
            rotation: a.pose.rotation,
            position: a.pose.translation,
            velocity: a.velocity,
            bias: ImuBias::default(),
        };
        let deltas = pre
            .correct_bias(&ImuBias::default())
            .expect("bias at linearization point");
        let (rot, pos, vel) = predict_state(&start, &deltas, &g, pre.dt);
        er = er.max((rot.inverse() * b.pose.rotation).angle());
        ev = ev.max((vel - b.velocity).norm());
        ep = ep.max((pos - b.pose.translation).norm());
    }
    (er, ev, ep, n)
}

/// Errors of the first-order bias correction against re-integration with
/// the deviated bias, for a deviation of magnitude `delta`.
fn bias_correction_errors(delta: f64) -> [f64; 3] {
    let dt = 0.005;
    let data = wiggly_imu(50, dt);
    let integrate = |bias: ImuBias| {
        let mut p = Preintegrated::new(bias, ImuNoise::default(), PreintegrationMode::Standard);
        for s in &data {
            p.integrate(&s.gyro, &s.accel, dt).expect("finite sample");
        }
        p
    };
    let db = ImuBias::new(
        Vector3::new(1.0, -2.0, 0.5).normalize() * delta * 10.0,
        Vector3::new(-0.3, 1.0, 0.7).normalize() * delta,
    );
    let c = integrate(ImuBias::default()).correct_bias(&db).expect("within range");
    let full = integrate(db);
    [
        (c.delta_r.inverse() * full.delta_r).angle(),
        (c.delta_v - full.delta_v).norm(),
        (c.delta_p - full.delta_p).norm(),
    ]
}

pub const BIAS_DEVIATIONS: [f64; 3] = [1e-2, 1e-3, 1e-4];

/// Constant body twist for 20 s: a horizontal circle when `tilted` is false,
/// otherwise a helix about a tilted axis.
pub fn circular_trajectory(tilted: bool) -> TrajectorySpec {
    let (linear, angular) = if tilted {
        ([0.8, 0.1, 0.2], [0.1, -0.2, 0.6])
    } else {
        ([1.0, 0.0, 0.0], [0.0, 0.0, 0.5])
    };
    TrajectorySpec {
        start_position: [0.0; 3],
        start_rotation: [0.1, -0.05, 0.3],
        segments: vec![Segment::ConstantTwist {
            duration: 20.0,
            linear,
            angular,
        }],
    }
}

pub fn preintegration_suite() -> Vec<Check> {
    let (mut worst, mut windows) = (0.0f64, 0);
    for tilted in [false, true] {
        let (er, ev, ep, n) = zero_noise_integration_error(&circular_trajectory(tilted), 0.25);
        worst = worst.max(er).max(ev).max(ep);
        windows += n;
    }
    let mut checks = vec![bounded(
        Suite::Preintegration,
        "zero-noise integration of circular trajectories over 0.25 s windows",
        worst,
        1e-6,
        windows,
    )];
    let errs: Vec<[f64; 3]> = BIAS_DEVIATIONS.iter().map(|&d| bias_correction_errors(d)).collect();
    // least-squares slope of log(error) against log(deviation), per component
    let x: Vec<f64> = BIAS_DEVIATIONS.iter().map(|d| d.ln()).collect();
    let xm = x.iter().sum::<f64>() / x.len() as f64;
    let slopes: Vec<f64> = (0..3)
        .map(|c| {
            let y: Vec<f64> = errs.iter().map(|e| e[c].ln()).collect();
            let ym = y.iter().sum::<f64>() / y.len() as f64;
            let num: f64 = x.iter().zip(&y).map(|(a, b)| (a - xm) * (b - ym)).sum();
            let den: f64 = x.iter().map(|a| (a - xm) * (a - xm)).sum();
            num / den
        })
        .collect();
    let shrinking = errs.windows(2).all(|w| (0..3).all(|c| w[1][c] < w[0][c] / 50.0));
    let lowest = slopes.iter().copied().fold(f64::INFINITY, f64::min);
    checks.push(flag(
        Suite::Preintegration,
        "bias-correction error shrinks quadratically",
        shrinking && slopes.iter().all(|s| (1.8..2.5).contains(s)),
        format!(
            "log-log slopes {:.3}/{:.3}/{:.3} (rotation/velocity/position), lowest {lowest:.3}",
            slopes[0], slopes[1], slopes[2]
        ),
    ));
    checks
}

/// A random linear-Gaussian chain over `n` two-dimensional variables: an
/// absolute factor on the first, relative factors between neighbours and
/// skip factors between every other pair.
struct Chain {
    n: usize,
    /// `(variables, J, z, W)`: residual `J x_vars - z`.
    factors: Vec<(Vec<usize>, DMatrix<f64>, DVector<f64>, DMatrix<f64>)>,
}

const VAR_DIM: usize = 2;

impl Chain {
    fn random(n: usize, r: &mut ChaCha8Rng) -> Self {
        let mut random_matrix =
            |rows: usize, cols: usize, s: f64| DMatrix::from_fn(rows, cols, |_, _| r.random_range(-s..s));
        let mut factors = Vec::new();
        let spd = |a: DMatrix<f64>| &a * a.transpose() + DMatrix::identity(VAR_DIM, VAR_DIM) * 0.5;
        factors.push((
            vec![0],
            DMatrix::identity(VAR_DIM, VAR_DIM) + random_matrix(VAR_DIM, VAR_DIM, 0.3),
            random_matrix(VAR_DIM, 1, 2.0).column(0).into_owned(),
            spd(random_matrix(VAR_DIM, VAR_DIM, 1.0)),
        ));
        for i in 0..n.saturating_sub(1) {
            for j in [i + 1, i + 2] {
                if j >= n {
                    continue;
                }
                let mut jac = DMatrix::zeros(VAR_DIM, 2 * VAR_DIM);
                jac.view_mut((0, 0), (VAR_DIM, VAR_DIM))
                    .copy_from(&(-DMatrix::identity(VAR_DIM, VAR_DIM) + random_matrix(VAR_DIM, VAR_DIM, 0.3)));
                jac.view_mut((0, VAR_DIM), (VAR_DIM, VAR_DIM))
                    .copy_from(&(DMatrix::identity(VAR_DIM, VAR_DIM) + random_matrix(VAR_DIM, VAR_DIM, 0.3)));
                factors.push((
                    vec![i, j],
                    jac,
                    random_matrix(VAR_DIM, 1, 1.0).column(0).into_owned(),
                    spd(random_matrix(VAR_DIM, VAR_DIM, 1.0)),
                ));
            }
        }
        Self { n, factors }
    }

    /// Adds a factor to a system whose variable `v` occupies block `slot(v)`.
    fn add_factor(
        h: &mut DMatrix<f64>,
        b: &mut DVector<f64>,
        factor: &(Vec<usize>, DMatrix<f64>, DVector<f64>, DMatrix<f64>),
        slot: impl Fn(usize) -> usize,
    ) {
        let (vars, j, z, w) = factor;
        let jtw = j.transpose() * w;
        let hl = &jtw * j;
        // residual at x = 0 is -z
        let bl = -(&jtw * z);
        for (a, &va) in vars.iter().enumerate() {
            let oa = slot(va) * VAR_DIM;
            let mut rows = b.rows_mut(oa, VAR_DIM);
            rows += bl.rows(a * VAR_DIM, VAR_DIM);
            for (c, &vc) in vars.iter().enumerate() {
                let oc = slot(vc) * VAR_DIM;
                let mut blk = h.view_mut((oa, oc), (VAR_DIM, VAR_DIM));
                blk += hl.view((a * VAR_DIM, c * VAR_DIM), (VAR_DIM, VAR_DIM));
            }
        }
    }

    /// Mean and covariance of all variables from the full system.
    fn batch(&self) -> (DVector<f64>, DMatrix<f64>) {
        let dim = self.n * VAR_DIM;
        let mut h = DMatrix::zeros(dim, dim);
        let mut b = DVector::zeros(dim);
        for f in &self.factors {
            Self::add_factor(&mut h, &mut b, f, |v| v);
        }
        let cov = h.cholesky().expect("chain is well posed").inverse();
        (-&cov * b, cov)
    }

    /// Filters the chain keeping at most `window` variables, marginalizing
    /// the oldest with the Schur complement. Returns the first variable kept
    /// with the mean and covariance of the final window.
    fn filtered(&self, window: usize) -> (usize, DVector<f64>, DMatrix<f64>) {
        let mut first = 0;
        let mut h = DMatrix::zeros(0, 0);
        let mut b = DVector::zeros(0);
        for v in 0..self.n {
            let count = v + 1 - first;
            h = h.resize(count * VAR_DIM, count * VAR_DIM, 0.0);
            b = b.resize_vertically(count * VAR_DIM, 0.0);
            for f in self.factors.iter().filter(|f| f.0.iter().copied().max() == Some(v)) {
                Self::add_factor(&mut h, &mut b, f, |u| u - first);
            }
            if count > window {
                // every factor touching the oldest variable is in by now
                let keep: Vec<usize> = (VAR_DIM..count * VAR_DIM).collect();
                let marg: Vec<usize> = (0..VAR_DIM).collect();
                let (hr, br, _) = schur_complement(&h, &b, &keep, &marg);
                h = hr;
                b = br;
                first += 1;
            }
        }
        let cov = h.cholesky().expect("window is well posed").inverse();
        (first, -&cov * b, cov)
    }
}

pub fn marginalization_suite() -> Vec<Check> {
    let mut r = rng(41);
    let (mut worst_mean, mut worst_cov) = (0.0f64, 0.0f64);
    let mut chains = 0;
    for n in (3..=50).step_by(1) {
        for window in [2usize, 3, 5] {
            let chain = Chain::random(n, &mut r);
            let (mean, cov) = chain.batch();
            let (first, wm, wc) = chain.filtered(window);
            let kept: Vec<usize> = (first * VAR_DIM..n * VAR_DIM).collect();
            let bm = mean.select_rows(&kept);
            let bc = cov.select_rows(&kept).select_columns(&kept);
            worst_mean = worst_mean.max((wm - &bm).amax() / bm.amax().max(1.0));
            worst_cov = worst_cov.max((wc - &bc).amax() / bc.amax().max(1.0));
            chains += 1;
        }
    }

    let threshold = SolverConfig::default().scale_switch_threshold;
    let (switch_ok, detail) = dual_switch_sweep(threshold);
    vec![
        bounded(
            Suite::Marginalization,
            "filtered means match the batch solution",
            worst_mean,
            1e-8,
            chains,
        ),
        bounded(
            Suite::Marginalization,
            "filtered covariances match the batch solution",
            worst_cov,
            1e-8,
            chains,
        ),
        flag(
            Suite::Marginalization,
            "dual-prior switch triggers exactly past the threshold",
            switch_ok,
            detail,
        ),
    ]
}

fn fresh_priors(s_lin: f64) -> DualPriors {
    let mut d = DualPriors::default();
    d.primary.global_lin = Some(ScaleGravity::new(s_lin, Rot3::identity()));
    d.secondary.global_lin = Some(ScaleGravity::new(s_lin * 1.5, Rot3::identity()));
    d
}

/// Sweeps the scale around the primary linearization point and checks that
/// the switch happens if and only if `|log(s / s_lin)| > threshold`,
/// including the first representable scales on either side of the boundary.
fn dual_switch_sweep(threshold: f64) -> (bool, String) {
    // switch decision at scale s, and whether the switch behaved correctly
    let probe = |s_lin: f64, s: f64| {
        let mut d = fresh_priors(s_lin);
        let drift = d.scale_drift(&ScaleGravity::new(s, Rot3::identity()));
        let expected = drift.abs() > threshold;
        let switched = d.maybe_switch(&ScaleGravity::new(s, Rot3::identity()), threshold);
        let swapped = d.primary.global_lin.map(|g| g.scale()) == Some(s_lin * 1.5) && d.switches == 1;
        let ok = switched == expected && if switched { swapped } else { d.switches == 0 };
        (switched, ok)
    };
    let mut mismatches = 0;
    let mut cases = 0;
    for s_lin in [0.3, 1.0, 2.7] {
        for k in -400..=400 {
            let (_, ok) = probe(s_lin, s_lin * (threshold * k as f64 / 200.0).exp());
            cases += 1;
            mismatches += usize::from(!ok);
        }
        for sign in [1.0, -1.0] {
            // walk to the last scale at or inside the boundary
            let mut s = s_lin * (sign * threshold).exp();
            let outward = |x: f64| if sign > 0.0 { x.next_up() } else { x.next_down() };
            let inward = |x: f64| if sign > 0.0 { x.next_down() } else { x.next_up() };
            while (s / s_lin).ln().abs() > threshold {
                s = inward(s);
            }
            while (outward(s) / s_lin).ln().abs() <= threshold {
                s = outward(s);
            }
            let (inside, ok_in) = probe(s_lin, s);
            let (outside, ok_out) = probe(s_lin, outward(s));
            cases += 2;
            mismatches += usize::from(inside || !outside || !ok_in || !ok_out);
        }
    }
    (
        mismatches == 0,
        format!("{mismatches} mismatches over {cases} scales around |log(s/s_lin)| = {threshold}"),
    )
}

fn timed(positions: &[Vector3<f64>], rotations: &[Rot3]) -> Vec<TimedPose> {
    positions
        .iter()
        .zip(rotations)
        .enumerate()
        .map(|(k, (p, r))| TimedPose {
            timestamp: k as f64 * 0.05,
            pose: Pose3::new(*r, *p),
        })
        .collect()
}

fn alignment_cost(t: &Pose3, est: &[Vector3<f64>], gt: &[Vector3<f64>]) -> f64 {
    est.iter()
        .zip(gt)
        .map(|(e, g)| (t.transform_point(e) - g).norm_squared())
        .sum()
}

/// Minimizer of the alignment cost found without the closed form: exhaustive
/// search over a grid of rotations, a compass search with shrinking steps in
/// the six pose directions, then Gauss-Newton on the stacked residuals with
/// finite-difference Jacobians to reach full precision.
fn brute_force_alignment(est: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Pose3 {
    let ce = est.iter().sum::<Vector3<f64>>() / est.len() as f64;
    let cg = gt.iter().sum::<Vector3<f64>>() / gt.len() as f64;
    // centring both sets keeps the cost well conditioned; undone at the end
    let e: Vec<_> = est.iter().map(|p| p - ce).collect();
    let g: Vec<_> = gt.iter().map(|p| p - cg).collect();
    let cost = |t: &Pose3| alignment_cost(t, &e, &g);
    let mut best = Pose3::identity();
    let mut best_cost = f64::INFINITY;
    let steps = 12;
    for i in 0..=steps {
        for j in 0..=steps {
            for k in 0..=steps {
                let w = Vector3::new(i as f64, j as f64, k as f64) * (2.0 * PI / steps as f64) - Vector3::repeat(PI);
                if w.norm() > PI {
                    continue;
                }
                let t = Pose3::from_rotation(Rot3::exp(&w));
                let c = cost(&t);
                if c < best_cost {
                    best = t;
                    best_cost = c;
                }
            }
        }
    }
    let mut step = 0.2;
    while step > 1e-13 {
        let mut improved = false;
        for axis in 0..6 {
            for sign in [1.0, -1.0] {
                let mut d = Twist6::zeros();
                d[axis] = sign * step;
                let candidate = exp_se3(&d, 1.0) * best;
                let c = cost(&candidate);
                if c < best_cost {
                    best = candidate;
                    best_cost = c;
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    let residuals = |t: &Pose3| {
        DVector::from_iterator(
            3 * e.len(),
            e.iter().zip(&g).flat_map(|(p, q)| {
                let r = t.transform_point(p) - q;
                [r.x, r.y, r.z]
            }),
        )
    };
    for _ in 0..5 {
        let r0 = residuals(&best);
        let h = 1e-6;
        let mut jac = DMatrix::zeros(r0.len(), 6);
        for k in 0..6 {
            let mut d = Twist6::zeros();
            d[k] = h;
            let diff = (residuals(&(exp_se3(&d, 1.0) * best)) - residuals(&(exp_se3(&(-d), 1.0) * best))) / (2.0 * h);
            jac.set_column(k, &diff);
        }
        let Some(chol) = (jac.transpose() * &jac).cholesky() else {
            break;
        };
        let step = chol.solve(&(-(jac.transpose() * r0)));
        best = exp_se3(&Twist6::from_column_slice(step.as_slice()), 1.0) * best;
    }
    // x -> R (x - ce) + t + cg
    Pose3::new(best.rotation, best.translation + cg - best.rotation.rotate(&ce))
}

pub const ATE_CASES: usize = 100;

pub fn ate_suite() -> Vec<Check> {
    let mut r = rng(51);
    let mut invariance = 0.0f64;
    let mut brute_pose = 0.0f64;
    let mut brute_cost = 0.0f64;
    let mut min_scaled = f64::INFINITY;
    for case in 0..ATE_CASES {
        let n = 20 + case % 40;
        let gt_p: Vec<Vector3<f64>> = (0..n)
            .map(|k| {
                let t = k as f64 * 0.1;
                Vector3::new(2.0 * (0.7 * t).sin(), 1.5 * (0.4 * t).cos(), 0.3 * t)
            })
            .collect();
        let gt_r: Vec<Rot3> = (0..n).map(|_| Rot3::exp(&uniform3(&mut r, 1.0))).collect();
        let gt = timed(&gt_p, &gt_r);
        let noisy: Vec<Vector3<f64>> = gt_p.iter().map(|p| p + uniform3(&mut r, 0.05)).collect();
        let est = timed(&noisy, &gt_r);
        let base = ate(&est, &gt, RunMetadata::default()).expect("well-posed alignment");

        let t = random_pose(&mut r, 10.0);
        let moved_p: Vec<_> = noisy.iter().map(|p| t.transform_point(p)).collect();
        let moved_r: Vec<_> = gt_r.iter().map(|q| t.rotation * *q).collect();
        let moved = ate(&timed(&moved_p, &moved_r), &gt, RunMetadata::default()).expect("well-posed alignment");
        invariance = invariance.max((moved.e_ate - base.e_ate).abs());

        let scaled_p: Vec<_> = gt_p.iter().map(|p| p * 2.0).collect();
        let scaled = ate(&timed(&scaled_p, &gt_r), &gt, RunMetadata::default()).expect("well-posed alignment");
        min_scaled = min_scaled.min(scaled.e_ate);

        let svd = align_se3(&noisy, &gt_p).expect("well-posed alignment");
        let brute = brute_force_alignment(&noisy, &gt_p);
        brute_pose = brute_pose.max(pose_gap(&svd, &brute));
        let (cs, cb) = (
            alignment_cost(&svd, &noisy, &gt_p),
            alignment_cost(&brute, &noisy, &gt_p),
        );
        brute_cost = brute_cost.max((cs - cb) / cb.max(1.0));
    }
    vec![
        bounded(
            Suite::Ate,
            "rigid transform of the estimate leaves the error unchanged",
            invariance,
            1e-10,
            ATE_CASES,
        ),
        flag(
            Suite::Ate,
            "twice-scaled estimate has a positive error",
            min_scaled > 0.0,
            format!("smallest error {min_scaled:.3e} m over {ATE_CASES} cases"),
        ),
        bounded(
            Suite::Ate,
            "closed-form alignment matches a brute-force minimizer",
            brute_pose,
            1e-8,
            ATE_CASES,
        ),
        bounded(
            Suite::Ate,
            "closed-form alignment cost is minimal",
            brute_cost,
            1e-8,
            ATE_CASES,
        ),
    ]
}

/// Every suite, in a fixed order.
pub fn run_all() -> Vec<Check> {
    let mut checks = math_suite();
    checks.extend(jacobian_suite());
    checks.extend(preintegration_suite());
    checks.extend(marginalization_suite());
    checks.extend(ate_suite());
    checks
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix3;

    #[test]
    fn series_exponential_of_a_pure_translation() {
        let m = hat6(&Twist6::new(1.0, 2.0, 3.0, 0.0, 0.0, 0.0));
        let e = expm_series(&m);
        assert!((e.fixed_view::<3, 1>(0, 3) - Vector3::new(1.0, 2.0, 3.0)).norm() < 1e-14);
        assert!((e.fixed_view::<3, 3>(0, 0) - Matrix3::identity()).norm() < 1e-14);
    }

    #[test]
    fn brute_force_recovers_a_known_transform() {
        let mut r = rng(5);
        let pts: Vec<Vector3<f64>> = (0..30).map(|_| uniform3(&mut r, 3.0)).collect();
        let t = random_pose(&mut r, 2.0);
        let moved: Vec<_> = pts.iter().map(|p| t.transform_point(p)).collect();
        let found = brute_force_alignment(&pts, &moved);
        assert!(pose_gap(&found, &t) < 1e-8);
    }

    #[test]
    fn filtered_chain_without_marginalization_is_the_batch() {
        let chain = Chain::random(6, &mut rng(3));
        let (first, m, _) = chain.filtered(10);
        let (bm, _) = chain.batch();
        assert_eq!(first, 0);
        assert!((m - bm).amax() < 1e-12);
    }
}
