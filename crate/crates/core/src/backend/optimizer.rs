use super::config::SolverConfig;
use super::marginalization::{global_retract, kf, GLOBAL_DIM, KF_DIM};
use super::system::{linearize_window, schur_points, window_energy, EnergyContext, LinearSystem};
use super::window::Window;
use crate::lie::Twist6;
use crate::state::{KeyframeState, ScaleGravity};
use nalgebra::{DMatrix, DVector, Vector3};

/// Absolute diagonal load added to every damped system so that directions
/// without any information (gauge freedoms) do not make it singular.
const DIAGONAL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizationReport {
    pub iterations: usize,
    pub accepted_steps: usize,
    pub initial_energy: f64,
    pub final_energy: f64,
    pub final_lambda: f64,
    /// The solver produced non-finite values and the state was restored.
    pub diverged: bool,
}

/// Solution of one damped system.
#[derive(Clone, Debug)]
pub struct Step {
    pub frames: DVector<f64>,
    pub idepths: Vec<(usize, f64)>,
}

impl Step {
    pub fn max_abs(&self) -> f64 {
        self.frames
            .iter()
            .chain(self.idepths.iter().map(|(_, d)| d))
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Indices of the solver vector that are variables.
pub fn free_indices(window: &Window) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..GLOBAL_DIM).collect();
    for (i, k) in window.keyframes.iter().enumerate() {
        let o = Window::block(i);
        idx.extend((0..KF_DIM).filter(|&d| k.free[d]).map(|d| o + d));
    }
    idx
}

/// Solves the Levenberg-Marquardt system `(H + lambda D) dx = -b`, with the
/// inverse depths eliminated first and recovered afterwards. Returns `None`
/// when the reduced system is not positive definite.
pub fn solve_damped(sys: &LinearSystem, free: &[usize], lambda: f64, idepth_prior: f64) -> Option<Step> {
    let mut h = sys.h.clone();
    let mut b = sys.b.clone();
    for i in 0..h.nrows() {
        h[(i, i)] = h[(i, i)] * (1.0 + lambda) + DIAGONAL_FLOOR;
    }
    let damping = |p: &super::system::PointBlock| p.h_dd * (1.0 + lambda) + idepth_prior;
    schur_points(&mut h, &mut b, &sys.points, damping);
    let n = free.len();
    let hr = DMatrix::from_fn(n, n, |r, c| h[(free[r], free[c])]);
    let br = DVector::from_fn(n, |r, _| b[free[r]]);
    let chol = hr.cholesky()?;
    let xr = chol.solve(&(-br));
    if xr.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut frames = DVector::zeros(sys.h.nrows());
    for (k, &i) in free.iter().enumerate() {
        frames[i] = xr[k];
    }
    let idepths = sys
        .points
        .iter()
        .map(|p| {
            let mut num = p.b_d;
            for (kf_index, v) in &p.h_fd {
                let o = Window::block(*kf_index);
                for r in 0..v.len() {
                    num += v[r] * frames[o + super::system::frame_offset(r)];
                }
            }
            (p.point_index, -num / (damping(p) + 1e-12))
        })
        .collect();
    Some(Step { frames, idepths })
}

/// Snapshot of everything a step modifies.
#[derive(Clone)]
pub struct StateBackup {
    scale_gravity: ScaleGravity,
    keyframes: Vec<KeyframeState>,
    idepths: Vec<f64>,
}

impl StateBackup {
    pub fn take(window: &Window) -> Self {
        Self {
            scale_gravity: window.scale_gravity,
            keyframes: window.states(),
            idepths: window.points.iter().map(|p| p.point.idepth).collect(),
        }
    }

    pub fn restore(&self, window: &mut Window) {
        window.scale_gravity = self.scale_gravity;
        for (k, s) in window.keyframes.iter_mut().zip(&self.keyframes) {
            k.state = *s;
        }
        for (p, d) in window.points.iter_mut().zip(&self.idepths) {
            p.point.idepth = *d;
        }
    }
}

/// Applies a solver step to the window state.
pub fn apply_step(window: &mut Window, step: &Step) {
    let x = &step.frames;
    window.scale_gravity = global_retract(&window.scale_gravity, &Vector3::new(x[0], x[1], x[2]));
    for (i, k) in window.keyframes.iter_mut().enumerate() {
        let o = Window::block(i);
        let d = x.rows(o, KF_DIM);
        let st = &mut k.state;
        let dp: Twist6 = d.fixed_rows::<6>(kf::POSE).into_owned();
        st.pose = st.pose.boxplus_left(&dp);
        st.twist += d.fixed_rows::<6>(kf::TWIST);
        st.velocity += d.fixed_rows::<3>(kf::VEL);
        st.bias.acc += d.fixed_rows::<3>(kf::BIAS_ACC);
        st.bias.gyro += d.fixed_rows::<3>(kf::BIAS_GYRO);
        st.affine.a += d[kf::AFFINE];
        st.affine.b += d[kf::AFFINE + 1];
    }
    for &(pi, dd) in &step.idepths {
        let p = &mut window.points[pi].point;
        let next = p.idepth + dd;
        // keep inverse depths positive; a point pushed through the camera
        // centre is halved instead
        p.idepth = if next > 1e-6 { next } else { 0.5 * p.idepth };
    }
}

fn state_is_finite(window: &Window) -> bool {
    window.scale_gravity.scale().is_finite()
        && window.scale_gravity.scale() > 0.0
        && window.keyframes.iter().all(|k| {
            let s = &k.state;
            s.pose.translation.iter().all(|v| v.is_finite())
                && s.pose.rotation.matrix().iter().all(|v| v.is_finite())
                && s.twist.iter().all(|v| v.is_finite())
                && s.velocity.iter().all(|v| v.is_finite())
        })
        && window.points.iter().all(|p| p.point.idepth.is_finite())
}

/// Levenberg-Marquardt on the window energy. Every accepted step strictly
/// lowers the energy evaluated on the residual set fixed at linearization.
pub fn optimize(window: &mut Window, ctx: &EnergyContext, cfg: &SolverConfig) -> OptimizationReport {
    let mut report = OptimizationReport {
        final_lambda: cfg.lm_lambda_initial,
        ..Default::default()
    };
    if window.is_empty() {
        return report;
    }
    let idepth_prior = 1.0 / (cfg.idepth_prior_sigma * cfg.idepth_prior_sigma);
    let free = free_indices(window);
    let mut lambda = cfg.lm_lambda_initial;
    let mut first = true;
    for _ in 0..cfg.max_iterations {
        report.iterations += 1;
        let sys = linearize_window(window, ctx);
        let e0 = window_energy(window, ctx).total();
        if first {
            report.initial_energy = e0;
            report.final_energy = e0;
            first = false;
        }
        let backup = StateBackup::take(window);
        let mut accepted = None;
        while lambda <= cfg.lm_lambda_max {
            let Some(step) = solve_damped(&sys, &free, lambda, idepth_prior) else {
                lambda *= 10.0;
                continue;
            };
            apply_step(window, &step);
            let e1 = if state_is_finite(window) {
                window_energy(window, ctx).total()
            } else {
                f64::INFINITY
            };
            if e1.is_finite() && e1 < e0 {
                accepted = Some((step.max_abs(), e1));
                lambda = (lambda * 0.25).max(1e-9);
                break;
            }
            backup.restore(window);
            if !e1.is_finite() {
                report.diverged = true;
            }
            lambda *= 10.0;
        }
        report.final_lambda = lambda;
        let Some((step_size, e1)) = accepted else {
            break;
        };
        report.accepted_steps += 1;
        report.final_energy = e1;
        let rel = (e0 - e1) / e0.max(1e-12);
        if step_size < cfg.step_tolerance || rel < cfg.energy_tolerance {
            break;
        }
    }
    report
}
