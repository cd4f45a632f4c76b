//! IMU preintegration on SO(3) x R^6 with first-order bias correction,
//! state prediction and the inertial residual between two keyframes.

use crate::lie::{hat, so3_right_jacobian, so3_right_jacobian_inv, Rot3};
use crate::state::{ImuBias, MetricState};
use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Matrix9 = SMatrix<f64, 9, 9>;
pub type Matrix15 = SMatrix<f64, 15, 15>;
pub type Vector15 = SVector<f64, 15>;

/// Bias deviations beyond these norms invalidate the linearized correction.
pub const REPREINTEGRATE_GYRO: f64 = 1e-2;
pub const REPREINTEGRATE_ACCEL: f64 = 1e-1;

const COVARIANCE_FLOOR: f64 = 1e-12;

/// Longest time the final sample may be held when the stream ends before a window does.
const MAX_HOLD: f64 = 0.02;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImuError {
    #[error("integration step must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("non-finite IMU sample at t = {0}")]
    NonFinite(f64),
    #[error("bias moved too far from the linearization point; re-preintegrate")]
    BiasOutOfRange,
    #[error("IMU data does not cover [{0:.6}, {1:.6}]")]
    Coverage(f64, f64),
    #[error("IMU timestamps not strictly increasing at t = {0}")]
    NonMonotonic(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuSample {
    pub timestamp: f64,
    pub gyro: Vector3<f64>,
    pub accel: Vector3<f64>,
}

impl ImuSample {
    pub fn new(timestamp: f64, gyro: Vector3<f64>, accel: Vector3<f64>) -> Self {
        Self { timestamp, gyro, accel }
    }

    fn is_finite(&self) -> bool {
        self.timestamp.is_finite()
            && self.gyro.iter().all(|v| v.is_finite())
            && self.accel.iter().all(|v| v.is_finite())
    }
}

/// Continuous-time noise densities and bias random walks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImuNoise {
    /// rad/s/sqrt(Hz)
    pub gyro_noise_density: f64,
    /// m/s^2/sqrt(Hz)
    pub accel_noise_density: f64,
    /// rad/s^2/sqrt(Hz)
    pub gyro_random_walk: f64,
    /// m/s^3/sqrt(Hz)
    pub accel_random_walk: f64,
}

impl Default for ImuNoise {
    // Figures typical of a BMI160-class MEMS unit.
    fn default() -> Self {
        Self {
            gyro_noise_density: 1.6e-4,
            accel_noise_density: 2.8e-3,
            gyro_random_walk: 2.2e-5,
            accel_random_walk: 8.6e-4,
        }
    }
}

/// Which update rule the integrator follows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreintegrationMode {
    /// `dp += dv dt + 1/2 dR a dt^2`, `dR <- dR exp(w dt)`.
    #[default]
    Standard,
    /// Literal update rules without the quadratic position term and without
    /// accumulating the rotation. Only useful for comparisons.
    Literal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Preintegrated {
    pub delta_r: Rot3,
    pub delta_v: Vector3<f64>,
    pub delta_p: Vector3<f64>,
    pub dr_dbg: Matrix3<f64>,
    pub dv_dba: Matrix3<f64>,
    pub dv_dbg: Matrix3<f64>,
    pub dp_dba: Matrix3<f64>,
    pub dp_dbg: Matrix3<f64>,
    /// Covariance of `[dtheta, dv, dp]`.
    pub covariance: Matrix9,
    pub bias_lin: ImuBias,
    pub dt: f64,
    pub noise: ImuNoise,
    pub mode: PreintegrationMode,
}

/// Bias-corrected preintegrated deltas.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorrectedDeltas {
    pub delta_r: Rot3,
    pub delta_v: Vector3<f64>,
    pub delta_p: Vector3<f64>,
}

impl Preintegrated {
    pub fn new(bias_lin: ImuBias, noise: ImuNoise, mode: PreintegrationMode) -> Self {
        Self {
            delta_r: Rot3::identity(),
            delta_v: Vector3::zeros(),
            delta_p: Vector3::zeros(),
            dr_dbg: Matrix3::zeros(),
            dv_dba: Matrix3::zeros(),
            dv_dbg: Matrix3::zeros(),
            dp_dba: Matrix3::zeros(),
            dp_dbg: Matrix3::zeros(),
            covariance: Matrix9::zeros(),
            bias_lin,
            dt: 0.0,
            noise,
            mode,
        }
    }

    /// Integrates one zero-order-hold measurement over `dt` seconds.
    pub fn integrate(&mut self, gyro: &Vector3<f64>, accel: &Vector3<f64>, dt: f64) -> Result<(), ImuError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(ImuError::InvalidStep(dt));
        }
        if !(gyro.iter().chain(accel.iter()).all(|v| v.is_finite())) {
            return Err(ImuError::NonFinite(self.dt));
        }
        let literal = self.mode == PreintegrationMode::Literal;
        let half = if literal { 0.0 } else { 0.5 };
        let a = accel - self.bias_lin.acc;
        let w = (gyro - self.bias_lin.gyro) * dt;
        let step = Rot3::exp(&w);
        let jr = so3_right_jacobian(&w);
        let r = *self.delta_r.matrix();
        let ra_hat = r * hat(&a);
        let dt2 = dt * dt;

        // Covariance first: it uses the Jacobians of the previous step.
        let mut a_mat = Matrix9::identity();
        if literal {
            a_mat.fixed_view_mut::<3, 3>(0, 0).fill(0.0);
        } else {
            a_mat.fixed_view_mut::<3, 3>(0, 0).copy_from(&step.matrix().transpose());
        }
        a_mat.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-ra_hat * dt));
        a_mat.fixed_view_mut::<3, 3>(6, 0).copy_from(&(-ra_hat * (half * dt2)));
        a_mat
            .fixed_view_mut::<3, 3>(6, 3)
            .copy_from(&(Matrix3::identity() * dt));
        let mut b_g = SMatrix::<f64, 9, 3>::zeros();
        b_g.fixed_view_mut::<3, 3>(0, 0).copy_from(&(jr * dt));
        let mut b_a = SMatrix::<f64, 9, 3>::zeros();
        b_a.fixed_view_mut::<3, 3>(3, 0).copy_from(&(r * dt));
        b_a.fixed_view_mut::<3, 3>(6, 0).copy_from(&(r * (half * dt2)));
        let qg = self.noise.gyro_noise_density.powi(2) / dt;
        let qa = self.noise.accel_noise_density.powi(2) / dt;
        let cov = a_mat * self.covariance * a_mat.transpose() + b_g * b_g.transpose() * qg + b_a * b_a.transpose() * qa;
        self.covariance = 0.5 * (cov + cov.transpose());

        self.dp_dba += self.dv_dba * dt - r * (half * dt2);
        self.dp_dbg += self.dv_dbg * dt - ra_hat * self.dr_dbg * (half * dt2);
        self.dv_dba -= r * dt;
        self.dv_dbg -= ra_hat * self.dr_dbg * dt;
        self.dr_dbg = if literal {
            -jr * dt
        } else {
            step.matrix().transpose() * self.dr_dbg - jr * dt
        };

        self.delta_p += self.delta_v * dt + r * a * (half * dt2);
        self.delta_v += r * a * dt;
        self.delta_r = if literal {
            step
        } else {
            (self.delta_r * step).renormalized()
        };
        self.dt += dt;
        Ok(())
    }

    pub fn bias_within_linearization(&self, bias: &ImuBias) -> bool {
        (bias.gyro - self.bias_lin.gyro).norm() <= REPREINTEGRATE_GYRO
            && (bias.acc - self.bias_lin.acc).norm() <= REPREINTEGRATE_ACCEL
    }

    /// First-order bias correction; the raw deltas are returned for `bias_lin`.
    pub fn correct_bias(&self, bias: &ImuBias) -> Result<CorrectedDeltas, ImuError> {
        if !self.bias_within_linearization(bias) {
            return Err(ImuError::BiasOutOfRange);
        }
        Ok(self.correct_bias_unchecked(bias))
    }

    fn correct_bias_unchecked(&self, bias: &ImuBias) -> CorrectedDeltas {
        let dbg = bias.gyro - self.bias_lin.gyro;
        let dba = bias.acc - self.bias_lin.acc;
        CorrectedDeltas {
            delta_r: self.delta_r * Rot3::exp(&(self.dr_dbg * dbg)),
            delta_v: self.delta_v + self.dv_dba * dba + self.dv_dbg * dbg,
            delta_p: self.delta_p + self.dp_dba * dba + self.dp_dbg * dbg,
        }
    }
}

/// Preintegrates `samples` over `[t0, t1]`, holding each sample until the next.
/// The sample at or before `t0` must exist.
pub fn preintegrate(
    samples: &[ImuSample],
    t0: f64,
    t1: f64,
    bias: ImuBias,
    noise: ImuNoise,
    mode: PreintegrationMode,
) -> Result<Preintegrated, ImuError> {
    let mut pre = Preintegrated::new(bias, noise, mode);
    if t1 <= t0 {
        return Ok(pre);
    }
    let cover_err = || ImuError::Coverage(t0, t1);
    let first = samples.first().ok_or_else(cover_err)?;
    let last = samples.last().ok_or_else(cover_err)?;
    // Allow a tiny slack at the edges for timestamps that went through
    // a nanosecond round trip.
    const EDGE_SLACK: f64 = 1e-9;
    if first.timestamp > t0 + EDGE_SLACK || last.timestamp + MAX_HOLD < t1 {
        return Err(cover_err());
    }
    let start = samples
        .partition_point(|s| s.timestamp <= t0 + EDGE_SLACK)
        .saturating_sub(1);
    let mut prev_t = t0;
    for k in start..samples.len() {
        let s = &samples[k];
        if !s.is_finite() {
            return Err(ImuError::NonFinite(s.timestamp));
        }
        let next_t = samples.get(k + 1).map_or(f64::INFINITY, |n| n.timestamp);
        if next_t <= s.timestamp {
            return Err(ImuError::NonMonotonic(next_t));
        }
        let seg_end = next_t.min(t1);
        if seg_end - prev_t > EDGE_SLACK {
            pre.integrate(&s.gyro, &s.accel, seg_end - prev_t)?;
            prev_t = seg_end;
        }
        if seg_end >= t1 {
            break;
        }
    }
    if t1 - prev_t > EDGE_SLACK {
        // The stream ended before t1 but within the tolerated gap: hold the last sample.
        pre.integrate(&last.gyro, &last.accel, t1 - prev_t)?;
    }
    Ok(pre)
}

/// Gyro reading at `t` by linear interpolation between the bracketing samples.
pub fn interpolate_gyro(samples: &[ImuSample], t: f64) -> Option<Vector3<f64>> {
    let idx = samples.partition_point(|s| s.timestamp <= t);
    if idx == 0 {
        return None;
    }
    let a = &samples[idx - 1];
    if a.timestamp == t {
        return Some(a.gyro);
    }
    let b = samples.get(idx)?;
    let alpha = (t - a.timestamp) / (b.timestamp - a.timestamp);
    Some(a.gyro * (1.0 - alpha) + b.gyro * alpha)
}

/// Predicted `(R_j, p_j, v_j)` from state `i` and bias-corrected deltas.
pub fn predict_state(
    state_i: &MetricState,
    deltas: &CorrectedDeltas,
    gravity: &Vector3<f64>,
    dt: f64,
) -> (Rot3, Vector3<f64>, Vector3<f64>) {
    let ri = state_i.rotation.matrix();
    let r = state_i.rotation * deltas.delta_r;
    let p = state_i.position + state_i.velocity * dt + 0.5 * dt * dt * gravity + ri * deltas.delta_p;
    let v = state_i.velocity + gravity * dt + ri * deltas.delta_v;
    (r, p, v)
}

/// Residual and Jacobians of one inertial factor.
///
/// Both Jacobians use the local state layout `[theta, p, v, b_a, b_g]`, with
/// `theta` a right perturbation `R exp(theta)` and the rest additive.
#[derive(Clone, Debug)]
pub struct ImuLinearization {
    pub residual: Vector15,
    pub jac_i: Matrix15,
    pub jac_j: Matrix15,
}

pub mod layout {
    pub const THETA: usize = 0;
    pub const POS: usize = 3;
    pub const VEL: usize = 6;
    pub const BIAS_ACC: usize = 9;
    pub const BIAS_GYRO: usize = 12;
}

/// Inertial constraint between two keyframes, owning the raw measurements so
/// that it can re-preintegrate when the bias estimate drifts.
#[derive(Clone, Debug)]
pub struct ImuFactor {
    pub samples: Vec<ImuSample>,
    pub t_i: f64,
    pub t_j: f64,
    pub preint: Preintegrated,
    information: Matrix15,
}

impl ImuFactor {
    pub fn new(
        samples: Vec<ImuSample>,
        t_i: f64,
        t_j: f64,
        bias: ImuBias,
        noise: ImuNoise,
        mode: PreintegrationMode,
    ) -> Result<Self, ImuError> {
        let preint = preintegrate(&samples, t_i, t_j, bias, noise, mode)?;
        let information = information_matrix(&preint);
        Ok(Self {
            samples,
            t_i,
            t_j,
            preint,
            information,
        })
    }

    pub fn information(&self) -> &Matrix15 {
        &self.information
    }

    /// Re-preintegrates around `bias` if it left the linearization region.
    /// Returns whether a re-integration happened.
    pub fn ensure_bias(&mut self, bias: &ImuBias) -> Result<bool, ImuError> {
        if self.preint.bias_within_linearization(bias) {
            return Ok(false);
        }
        self.preint = preintegrate(
            &self.samples,
            self.t_i,
            self.t_j,
            *bias,
            self.preint.noise,
            self.preint.mode,
        )?;
        self.information = information_matrix(&self.preint);
        Ok(true)
    }

    pub fn residual(&self, si: &MetricState, sj: &MetricState, gravity: &Vector3<f64>) -> Vector15 {
        self.linearize(si, sj, gravity).residual
    }

    pub fn energy(&self, si: &MetricState, sj: &MetricState, gravity: &Vector3<f64>) -> f64 {
        let r = self.residual(si, sj, gravity);
        r.dot(&(self.information * r))
    }

    pub fn linearize(&self, si: &MetricState, sj: &MetricState, gravity: &Vector3<f64>) -> ImuLinearization {
        use layout::*;
        let pre = &self.preint;
        let dt = pre.dt;
        let d = pre.correct_bias_unchecked(&si.bias);
        let dbg = si.bias.gyro - pre.bias_lin.gyro;
        let ri = si.rotation.matrix();
        let rit = ri.transpose();

        let r_rot = (d.delta_r.inverse() * si.rotation.inverse() * sj.rotation).log();
        let dv_world = sj.velocity - si.velocity - gravity * dt;
        let dp_world = sj.position - si.position - si.velocity * dt - 0.5 * dt * dt * gravity;
        let r_vel = rit * dv_world - d.delta_v;
        let r_pos = rit * dp_world - d.delta_p;
        let r_bias = sj.bias.to_vector() - si.bias.to_vector();

        let mut residual = Vector15::zeros();
        residual.fixed_rows_mut::<3>(0).copy_from(&r_rot);
        residual.fixed_rows_mut::<3>(3).copy_from(&r_vel);
        residual.fixed_rows_mut::<3>(6).copy_from(&r_pos);
        residual.fixed_rows_mut::<6>(9).copy_from(&r_bias);

        let jr_inv = so3_right_jacobian_inv(&r_rot);
        let mut ji = Matrix15::zeros();
        let mut jj = Matrix15::zeros();
        // rotation rows
        ji.fixed_view_mut::<3, 3>(0, THETA)
            .copy_from(&(-jr_inv * sj.rotation.matrix().transpose() * ri));
        ji.fixed_view_mut::<3, 3>(0, BIAS_GYRO).copy_from(
            &(-jr_inv * Rot3::exp(&r_rot).matrix().transpose() * so3_right_jacobian(&(pre.dr_dbg * dbg)) * pre.dr_dbg),
        );
        jj.fixed_view_mut::<3, 3>(0, THETA).copy_from(&jr_inv);
        // velocity rows
        ji.fixed_view_mut::<3, 3>(3, THETA).copy_from(&hat(&(rit * dv_world)));
        ji.fixed_view_mut::<3, 3>(3, VEL).copy_from(&(-rit));
        ji.fixed_view_mut::<3, 3>(3, BIAS_ACC).copy_from(&(-pre.dv_dba));
        ji.fixed_view_mut::<3, 3>(3, BIAS_GYRO).copy_from(&(-pre.dv_dbg));
        jj.fixed_view_mut::<3, 3>(3, VEL).copy_from(&rit);
        // position rows
        ji.fixed_view_mut::<3, 3>(6, THETA).copy_from(&hat(&(rit * dp_world)));
        ji.fixed_view_mut::<3, 3>(6, POS).copy_from(&(-rit));
        ji.fixed_view_mut::<3, 3>(6, VEL).copy_from(&(-rit * dt));
        ji.fixed_view_mut::<3, 3>(6, BIAS_ACC).copy_from(&(-pre.dp_dba));
        ji.fixed_view_mut::<3, 3>(6, BIAS_GYRO).copy_from(&(-pre.dp_dbg));
        jj.fixed_view_mut::<3, 3>(6, POS).copy_from(&rit);
        // bias rows
        for k in 0..6 {
            ji[(9 + k, BIAS_ACC + k)] = -1.0;
            jj[(9 + k, BIAS_ACC + k)] = 1.0;
        }
        ImuLinearization {
            residual,
            jac_i: ji,
            jac_j: jj,
        }
    }
}

/// Inverse of the preintegration covariance, extended by the bias random walk.
pub fn information_matrix(pre: &Preintegrated) -> Matrix15 {
    let mut cov = Matrix15::zeros();
    cov.fixed_view_mut::<9, 9>(0, 0).copy_from(&pre.covariance);
    let dt = pre.dt.max(1e-9);
    for k in 0..3 {
        cov[(9 + k, 9 + k)] = pre.noise.accel_random_walk.powi(2) * dt;
        cov[(12 + k, 12 + k)] = pre.noise.gyro_random_walk.powi(2) * dt;
    }
    match cov.cholesky() {
        Some(ch) if (0..15).all(|k| cov[(k, k)] > COVARIANCE_FLOOR) => ch.inverse(),
        _ => {
            log::warn!("IMU covariance is singular over dt = {dt:.4}s; flooring the diagonal");
            for k in 0..15 {
                cov[(k, k)] += COVARIANCE_FLOOR;
            }
            cov.try_inverse()
                .unwrap_or_else(|| Matrix15::identity() / COVARIANCE_FLOOR)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn zero_noise() -> ImuNoise {
        ImuNoise {
            gyro_noise_density: 0.0,
            accel_noise_density: 0.0,
            gyro_random_walk: 1e-4,
            accel_random_walk: 1e-3,
        }
    }

    fn run(samples: &[(Vector3<f64>, Vector3<f64>)], dt: f64, bias: ImuBias) -> Preintegrated {
        let mut p = Preintegrated::new(bias, ImuNoise::default(), PreintegrationMode::Standard);
        for (g, a) in samples {
            p.integrate(g, a, dt).unwrap();
        }
        p
    }

    #[test]
    fn bias_cancelled_measurements_integrate_to_identity() {
        let bias = ImuBias::new(Vector3::new(0.1, -0.2, 0.3), Vector3::new(0.01, 0.02, -0.03));
        let p = run(&vec![(bias.gyro, bias.acc); 20], 0.005, bias);
        assert!(p.delta_r.angle() < 1e-15);
        assert!(p.delta_v.norm() < 1e-15 && p.delta_p.norm() < 1e-15);
    }

    #[test]
    fn constant_acceleration_matches_scalar_recursion() {
        let p = run(
            &vec![(Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0)); 10],
            0.01,
            ImuBias::default(),
        );
        // scalar replay: p += v dt + a dt^2 / 2, v += a dt
        let (mut sp, mut sv) = (0.0f64, 0.0f64);
        for _ in 0..10 {
            sp += sv * 0.01 + 0.5 * 0.01 * 0.01;
            sv += 0.01;
        }
        assert!((p.delta_v - Vector3::new(0.1, 0.0, 0.0)).norm() < 1e-15);
        assert!((p.delta_p - Vector3::new(sp, 0.0, 0.0)).norm() < 1e-15);
        assert!((sp - 0.005).abs() < 1e-15);
    }

    #[test]
    fn constant_rate_gives_closed_form_rotation() {
        let p = run(
            &vec![(Vector3::new(0.0, 0.0, 1.0), Vector3::zeros()); 100],
            0.01,
            ImuBias::default(),
        );
        let err = (p.delta_r.inverse() * Rot3::rz(1.0)).angle();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn literal_mode_drops_rotation_accumulation() {
        let mut p = Preintegrated::new(ImuBias::default(), ImuNoise::default(), PreintegrationMode::Literal);
        for _ in 0..10 {
            p.integrate(&Vector3::new(0.0, 0.0, 1.0), &Vector3::zeros(), 0.01)
                .unwrap();
        }
        assert!((p.delta_r.angle() - 0.01).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_steps() {
        let mut p = Preintegrated::new(ImuBias::default(), ImuNoise::default(), PreintegrationMode::Standard);
        assert!(p.integrate(&Vector3::zeros(), &Vector3::zeros(), 0.0).is_err());
        assert!(p.integrate(&Vector3::zeros(), &Vector3::zeros(), -1.0).is_err());
        assert!(p
            .integrate(&Vector3::new(f64::NAN, 0.0, 0.0), &Vector3::zeros(), 0.01)
            .is_err());
    }

    #[test]
    fn bias_correction_identity_and_range() {
        let samples: Vec<_> = (0..50)
            .map(|k| {
                let t = k as f64 * 0.005;
                (Vector3::new(0.3, -0.2 * t, 0.5), Vector3::new(0.5, 9.81, -0.3 * t))
            })
            .collect();
        let p = run(&samples, 0.005, ImuBias::default());
        let c = p.correct_bias(&ImuBias::default()).unwrap();
        assert_eq!(c.delta_r, p.delta_r);
        assert_eq!(c.delta_v, p.delta_v);
        let far = ImuBias::new(Vector3::zeros(), Vector3::new(0.02, 0.0, 0.0));
        assert_eq!(p.correct_bias(&far), Err(ImuError::BiasOutOfRange));
    }

    fn wiggly(n: usize, dt: f64) -> Vec<(Vector3<f64>, Vector3<f64>)> {
        (0..n)
            .map(|k| {
                let t = k as f64 * dt;
                (
                    Vector3::new(0.4 * (3.0 * t).sin(), 0.7, -0.5 * (2.0 * t).cos()),
                    Vector3::new(1.0 + (5.0 * t).sin(), 9.6, 0.8 * t),
                )
            })
            .collect()
    }

    fn first_order_errors(delta: f64) -> (f64, f64, f64) {
        let dt = 0.005;
        let data = wiggly(50, dt);
        let p = run(&data, dt, ImuBias::default());
        let db = ImuBias::new(
            Vector3::new(1.0, -2.0, 0.5).normalize() * delta * 10.0,
            Vector3::new(-0.3, 1.0, 0.7).normalize() * delta,
        );
        let c = p.correct_bias(&db).unwrap();
        let full = run(&data, dt, db);
        (
            (c.delta_r.inverse() * full.delta_r).angle(),
            (c.delta_v - full.delta_v).norm(),
            (c.delta_p - full.delta_p).norm(),
        )
    }

    #[test]
    fn gyro_bias_correction_matches_reintegration() {
        let (er, _, _) = first_order_errors(1e-3);
        assert!(er < 1e-5, "{er}");
    }

    #[test]
    fn bias_correction_error_is_second_order() {
        let errs: Vec<_> = [1e-2, 1e-3, 1e-4].iter().map(|&d| first_order_errors(d)).collect();
        for w in errs.windows(2) {
            // 10x smaller deviation should shrink the error ~100x
            for (a, b) in [(w[0].0, w[1].0), (w[0].1, w[1].1), (w[0].2, w[1].2)] {
                assert!(a / b > 50.0, "ratio {}", a / b);
            }
        }
    }

    #[test]
    fn covariance_stays_symmetric_psd() {
        let data = wiggly(1000, 0.005);
        let p = run(&data, 0.005, ImuBias::default());
        let c = p.covariance;
        assert!((c - c.transpose()).abs().max() < 1e-18);
        let eig = c.symmetric_eigen();
        assert!(eig.eigenvalues.min() > -1e-15 * eig.eigenvalues.max());
    }

    /// Composition of two preintegrated windows as an independent oracle.
    #[test]
    fn concatenated_intervals_match_union() {
        let data = wiggly(60, 0.004);
        let whole = run(&data, 0.004, ImuBias::default());
        let a = run(&data[..25], 0.004, ImuBias::default());
        let b = run(&data[25..], 0.004, ImuBias::default());
        let r = a.delta_r * b.delta_r;
        let v = a.delta_v + a.delta_r.matrix() * b.delta_v;
        let p = a.delta_p + a.delta_v * b.dt + a.delta_r.matrix() * b.delta_p;
        assert!((r.inverse() * whole.delta_r).angle() < 1e-10);
        assert!((v - whole.delta_v).norm() < 1e-10);
        assert!((p - whole.delta_p).norm() < 1e-10);
        assert!((whole.dt - a.dt - b.dt).abs() < 1e-15);
    }

    #[test]
    fn preintegrate_splits_at_window_edges() {
        let samples: Vec<_> = (0..11)
            .map(|k| {
                ImuSample::new(
                    k as f64 * 0.01,
                    Vector3::new(k as f64, 0.0, 0.0),
                    Vector3::new(k as f64, 0.0, 0.0),
                )
            })
            .collect();
        let p = preintegrate(
            &samples,
            0.015,
            0.035,
            ImuBias::default(),
            ImuNoise::default(),
            PreintegrationMode::Standard,
        )
        .unwrap();
        // held values: 1 over 5ms, 2 over 10ms, 3 over 5ms
        assert!((p.dt - 0.02).abs() < 1e-15);
        assert!((p.delta_v.x - (1.0 * 0.005 + 2.0 * 0.01 + 3.0 * 0.005)).abs() < 1e-14);
        assert!((p.delta_r.log().x - (0.005 + 0.02 + 0.015)).abs() < 1e-14);
        assert!(preintegrate(
            &samples,
            -0.1,
            0.05,
            ImuBias::default(),
            ImuNoise::default(),
            PreintegrationMode::Standard
        )
        .is_err());
    }

    #[test]
    fn gyro_interpolation() {
        let s = vec![
            ImuSample::new(0.0, Vector3::new(0.0, 1.0, 0.0), Vector3::zeros()),
            ImuSample::new(0.1, Vector3::new(1.0, 3.0, 0.0), Vector3::zeros()),
        ];
        let g = interpolate_gyro(&s, 0.025).unwrap();
        assert!((g - Vector3::new(0.25, 1.5, 0.0)).norm() < 1e-15);
        assert_eq!(interpolate_gyro(&s, 0.1), Some(s[1].gyro));
        assert!(interpolate_gyro(&s, 0.2).is_none());
        assert!(interpolate_gyro(&s, -0.1).is_none());
    }

    #[test]
    fn prediction_examples() {
        let g = Vector3::new(0.0, 0.0, -9.81);
        let si = MetricState {
            rotation: Rot3::rx(0.3),
            position: Vector3::new(1.0, 2.0, 3.0),
            velocity: Vector3::new(0.5, 0.0, 0.0),
            bias: ImuBias::default(),
        };
        let pre = Preintegrated::new(ImuBias::default(), ImuNoise::default(), PreintegrationMode::Standard);
        let d = pre.correct_bias(&si.bias).unwrap();
        let (r, p, v) = predict_state(&si, &d, &g, 0.0);
        assert_eq!((r, p, v), (si.rotation, si.position, si.velocity));

        // stationary: the accelerometer reads -g rotated into the body frame
        let at_rest = MetricState {
            velocity: Vector3::zeros(),
            ..si
        };
        let body_g = si.rotation.inverse().rotate(&(-g));
        let pre = run(&vec![(Vector3::zeros(), body_g); 40], 0.005, ImuBias::default());
        let d = pre.correct_bias(&si.bias).unwrap();
        let (_, p, v) = predict_state(&at_rest, &d, &g, pre.dt);
        assert!(v.norm() < 1e-13 && (p - si.position).norm() < 1e-13);
    }

    #[test]
    fn residual_examples() {
        let g = Vector3::new(0.0, 0.0, -9.81);
        let samples: Vec<_> = (0..=40)
            .map(|k| {
                ImuSample::new(
                    k as f64 * 0.005,
                    Vector3::new(0.1, 0.2, 0.3),
                    Vector3::new(0.2, 0.1, 9.7),
                )
            })
            .collect();
        let f = ImuFactor::new(
            samples,
            0.0,
            0.2,
            ImuBias::default(),
            zero_noise(),
            PreintegrationMode::Standard,
        )
        .unwrap();
        let si = MetricState {
            rotation: Rot3::identity(),
            position: Vector3::zeros(),
            velocity: Vector3::new(0.3, 0.0, 0.0),
            bias: ImuBias::default(),
        };
        let d = f.preint.correct_bias(&si.bias).unwrap();
        let (r, p, v) = predict_state(&si, &d, &g, f.preint.dt);
        let mut sj = MetricState {
            rotation: r,
            position: p,
            velocity: v,
            bias: si.bias,
        };
        assert!(f.residual(&si, &sj, &g).norm() < 1e-14);
        sj.position.x += 0.01;
        let res = f.residual(&si, &sj, &g);
        assert!((res.fixed_rows::<3>(6) - Vector3::new(0.01, 0.0, 0.0)).norm() < 1e-14);
        assert!(res.fixed_rows::<3>(0).norm() < 1e-14);
        let e1 = f.energy(&si, &sj, &g);
        sj.position.x += 0.01;
        let e2 = f.energy(&si, &sj, &g);
        assert!((e2 / e1 - 4.0).abs() < 1e-9);
    }

    fn perturb(s: &MetricState, d: &Vector15) -> MetricState {
        use layout::*;
        let mut b = s.bias.to_vector();
        b += d.fixed_rows::<6>(BIAS_ACC);
        MetricState {
            rotation: s.rotation * Rot3::exp(&d.fixed_rows::<3>(THETA).into_owned()),
            position: s.position + d.fixed_rows::<3>(POS),
            velocity: s.velocity + d.fixed_rows::<3>(VEL),
            bias: ImuBias::from_vector(&b),
        }
    }

    fn arb_state() -> impl Strategy<Value = MetricState> {
        (
            prop::array::uniform3(-2.0..2.0f64),
            prop::array::uniform3(-5.0..5.0f64),
            prop::array::uniform3(-2.0..2.0f64),
            prop::array::uniform6(-0.005..0.005f64),
        )
            .prop_map(|(r, p, v, b)| MetricState {
                rotation: Rot3::exp(&Vector3::from(r)),
                position: Vector3::from(p),
                velocity: Vector3::from(v),
                bias: ImuBias::from_vector(&nalgebra::Vector6::from(b)),
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn residual_jacobians_match_finite_differences(si in arb_state(), sj in arb_state()) {
            let g = Vector3::new(0.0, 0.0, -9.81);
            let samples: Vec<_> = wiggly(51, 0.005).into_iter().enumerate()
                .map(|(k, (w, a))| ImuSample::new(k as f64 * 0.005, w, a)).collect();
            let f = ImuFactor::new(samples, 0.0, 0.25, ImuBias::default(), ImuNoise::default(), PreintegrationMode::Standard).unwrap();
            let lin = f.linearize(&si, &sj, &g);
            let h = 1e-6;
            for which in 0..2 {
                let jac = if which == 0 { &lin.jac_i } else { &lin.jac_j };
                for k in 0..15 {
                    let mut d = Vector15::zeros();
                    d[k] = h;
                    let (rp, rm) = if which == 0 {
                        (f.residual(&perturb(&si, &d), &sj, &g), f.residual(&perturb(&si, &(-d)), &sj, &g))
                    } else {
                        (f.residual(&si, &perturb(&sj, &d), &g), f.residual(&si, &perturb(&sj, &(-d)), &g))
                    };
                    let num = (rp - rm) / (2.0 * h);
                    let ana = jac.column(k);
                    let err = (num - ana).norm();
                    prop_assert!(err <= 1e-4 * ana.norm().max(1.0), "state {} col {}: {} vs {}", which, k, num, ana);
                }
            }
        }
    }
}
