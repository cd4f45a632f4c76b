//! Linearization of the window energy into a dense system over keyframe and
//! global variables, with inverse depths kept separately for the Schur
//! complement.

use super::config::OdometryConfig;
use super::marginalization::{kf, GLOBAL_DIM, KF_DIM};
use super::window::{ActivePoint, ObservationStatus, Window};
use crate::imu::{layout, ImuFactor};
use crate::lie::{se3_left_jacobian, Twist6};
use crate::photometric::{
    cols, evaluate_observation, huber_energy, linearize_observation, PhotometricConfig, OBS_DIM, PATTERN_SIZE,
};
use crate::state::{metric_pose_jacobians, metric_state};
use nalgebra::{DMatrix, DVector, Matrix6, SMatrix, SVector};

const FRAME_DIM: usize = cols::FRAME;
type FrameVec = SVector<f64, FRAME_DIM>;

/// Keyframe-block offsets of the 14 per-frame photometric columns.
const FRAME_TO_KF: [usize; FRAME_DIM] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, kf::AFFINE, kf::AFFINE + 1];

/// Settings shared by every evaluation of one window.
#[derive(Clone, Debug)]
pub struct EnergyContext {
    pub photometric: PhotometricConfig,
    pub alpha: f64,
    pub beta: f64,
    pub outlier_residual: f64,
    pub initial_pose_sigma: f64,
    pub initial_velocity_sigma: f64,
    pub bias_acc_sigma: f64,
    pub bias_gyro_sigma: f64,
}

impl EnergyContext {
    pub fn new(cfg: &OdometryConfig, global_shutter_data: bool) -> Self {
        let s = &cfg.solver;
        Self {
            photometric: cfg.effective_photometric(global_shutter_data),
            alpha: s.alpha,
            beta: s.beta,
            outlier_residual: s.outlier_residual,
            initial_pose_sigma: s.initial_pose_sigma,
            initial_velocity_sigma: s.initial_velocity_sigma,
            bias_acc_sigma: s.bias_acc_sigma,
            bias_gyro_sigma: s.bias_gyro_sigma,
        }
    }

    /// Energy charged to an observation that was valid at linearization but
    /// fails to project after a step.
    fn failure_energy(&self) -> f64 {
        PATTERN_SIZE as f64 * huber_energy(2.0 * self.outlier_residual, self.photometric.huber_threshold)
    }
}

/// Contribution of one point to the Schur complement.
#[derive(Clone, Debug)]
pub struct PointBlock {
    pub point_index: usize,
    pub h_dd: f64,
    pub b_d: f64,
    /// Coupling with keyframes, by window index.
    pub h_fd: Vec<(usize, FrameVec)>,
}

impl PointBlock {
    fn coupling_mut(&mut self, kf_index: usize) -> &mut FrameVec {
        if let Some(pos) = self.h_fd.iter().position(|(i, _)| *i == kf_index) {
            return &mut self.h_fd[pos].1;
        }
        self.h_fd.push((kf_index, FrameVec::zeros()));
        &mut self.h_fd.last_mut().unwrap().1
    }
}

/// Dense linearized system. `h`/`b` hold the keyframe and global terms;
/// point terms are kept in `points` until the Schur complement.
#[derive(Clone, Debug)]
pub struct LinearSystem {
    pub h: DMatrix<f64>,
    pub b: DVector<f64>,
    pub points: Vec<PointBlock>,
    pub energy: EnergyBreakdown,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EnergyBreakdown {
    pub photometric: f64,
    pub inertial: f64,
    pub twist: f64,
    pub gauge: f64,
    pub prior: f64,
}

impl EnergyBreakdown {
    pub fn total(&self) -> f64 {
        self.photometric + self.inertial + self.twist + self.gauge + self.prior
    }
}

impl LinearSystem {
    pub fn zeros(dim: usize) -> Self {
        Self {
            h: DMatrix::zeros(dim, dim),
            b: DVector::zeros(dim),
            points: Vec::new(),
            energy: EnergyBreakdown::default(),
        }
    }

    /// Folds the point blocks into `h`/`b` (Schur complement on inverse depths).
    pub fn eliminate_points(&mut self, idepth_prior: f64) {
        let points = std::mem::take(&mut self.points);
        schur_points(&mut self.h, &mut self.b, &points, |p| p.h_dd + idepth_prior);
    }
}

/// Keyframe-block offset of per-frame photometric column `r`.
pub fn frame_offset(r: usize) -> usize {
    FRAME_TO_KF[r]
}

/// Subtracts the Schur terms of `points` from a keyframe system, using
/// `hdd_of` for the (possibly damped) inverse-depth Hessian of each point.
///
/// Couplings are accumulated in a compact buffer holding only the 14
/// photometric columns of each keyframe and scattered into `h` once.
pub fn schur_points(
    h: &mut DMatrix<f64>,
    b: &mut DVector<f64>,
    points: &[PointBlock],
    hdd_of: impl Fn(&PointBlock) -> f64,
) {
    let num_kf = (h.nrows() - GLOBAL_DIM) / KF_DIM;
    let m = num_kf * FRAME_DIM;
    let mut hc = DMatrix::<f64>::zeros(m, m);
    let mut bc = DVector::<f64>::zeros(m);
    for p in points {
        let hdd = hdd_of(p) + 1e-12;
        if hdd <= 1e-12 {
            continue;
        }
        let inv = 1.0 / hdd;
        for (ia, va) in &p.h_fd {
            let oa = ia * FRAME_DIM;
            let mut rows = bc.fixed_rows_mut::<FRAME_DIM>(oa);
            rows.axpy(-p.b_d * inv, va, 1.0);
            let sa = va * inv;
            for (ib, vb) in &p.h_fd {
                hc.fixed_view_mut::<FRAME_DIM, FRAME_DIM>(oa, ib * FRAME_DIM)
                    .ger(-1.0, &sa, vb, 1.0);
            }
        }
    }
    for ka in 0..num_kf {
        let oa = Window::block(ka);
        for r in 0..FRAME_DIM {
            let row = ka * FRAME_DIM + r;
            b[oa + FRAME_TO_KF[r]] += bc[row];
            for kb in 0..num_kf {
                let ob = Window::block(kb);
                for c in 0..FRAME_DIM {
                    h[(oa + FRAME_TO_KF[r], ob + FRAME_TO_KF[c])] += hc[(row, kb * FRAME_DIM + c)];
                }
            }
        }
    }
}

const PAIR_DIM: usize = 2 * FRAME_DIM;

/// Photometric terms shared by one host/target keyframe pair, laid out as
/// `[host frame | target frame]`.
struct PairBlock {
    h: SMatrix<f64, PAIR_DIM, PAIR_DIM>,
    b: SVector<f64, PAIR_DIM>,
}

impl PairBlock {
    fn zeros() -> Self {
        Self {
            h: SMatrix::zeros(),
            b: SVector::zeros(),
        }
    }

    fn scatter(&self, sys: &mut LinearSystem, host: usize, target: usize) {
        let frames = [(host, 0usize), (target, FRAME_DIM)];
        for &(ia, ca) in &frames {
            let oa = Window::block(ia);
            for r in 0..FRAME_DIM {
                sys.b[oa + FRAME_TO_KF[r]] += self.b[ca + r];
                for &(ib, cb) in &frames {
                    let ob = Window::block(ib);
                    for c in 0..FRAME_DIM {
                        sys.h[(oa + FRAME_TO_KF[r], ob + FRAME_TO_KF[c])] += self.h[(ca + r, cb + c)];
                    }
                }
            }
        }
    }
}

/// Column mask for an observation row given the host and target free masks.
fn observation_mask(window: &Window, host: usize, target: usize) -> SVector<f64, OBS_DIM> {
    let mut m = SVector::<f64, OBS_DIM>::repeat(1.0);
    for (base, idx) in [(cols::HOST_POSE, host), (cols::TARGET_POSE, target)] {
        let free = &window.keyframes[idx].free;
        for k in 0..FRAME_DIM {
            if !free[FRAME_TO_KF[k]] {
                m[base + k] = 0.0;
            }
        }
    }
    m
}

/// Adds the photometric terms of the selected points. Observation statuses
/// are refreshed when `update_status` is set.
pub fn accumulate_photometric(
    window: &mut Window,
    ctx: &EnergyContext,
    sys: &mut LinearSystem,
    select: impl Fn(&ActivePoint) -> bool,
    target_filter: impl Fn(usize) -> bool,
) {
    let cam = window.calibration.camera.clone();
    let n = window.len();
    let mut pairs: Vec<Option<Box<PairBlock>>> = (0..n * n).map(|_| None).collect();
    let mut points = std::mem::take(&mut window.points);
    for (pi, point) in points.iter_mut().enumerate() {
        if !select(point) {
            continue;
        }
        let Some(hi) = window.index_of(point.host_id) else {
            continue;
        };
        let host = window.keyframes[hi].state;
        let mut block = PointBlock {
            point_index: pi,
            h_dd: 0.0,
            b_d: 0.0,
            h_fd: Vec::new(),
        };
        for obs in point.observations.iter_mut() {
            let Some(ti) = window.index_of(obs.target_id) else {
                continue;
            };
            if !target_filter(ti) {
                continue;
            }
            let target_kf = &window.keyframes[ti];
            let lin = match linearize_observation(
                &point.point,
                &point.patch,
                &host,
                &target_kf.state,
                target_kf.pyramid.level(0),
                &cam,
                &ctx.photometric,
            ) {
                Ok(l) => l,
                Err(_) => {
                    obs.status = ObservationStatus::OutOfBounds;
                    continue;
                }
            };
            let mean_abs = lin.residuals.iter().map(|r| r.abs()).sum::<f64>() / PATTERN_SIZE as f64;
            obs.last_energy = lin.energy;
            if mean_abs > ctx.outlier_residual {
                obs.status = ObservationStatus::Outlier;
                continue;
            }
            obs.status = ObservationStatus::Good;
            sys.energy.photometric += lin.energy;

            let mask = observation_mask(window, hi, ti);
            let jac = SMatrix::<f64, PATTERN_SIZE, OBS_DIM>::from_fn(|k, c| lin.rows[k][c] * mask[c]);
            let weighted = SMatrix::<f64, PATTERN_SIZE, OBS_DIM>::from_fn(|k, c| jac[(k, c)] * lin.weights[k]);
            let hl = jac.tr_mul(&weighted);
            let bl = weighted.tr_mul(&SVector::<f64, PATTERN_SIZE>::from(lin.residuals));
            // frame-frame terms go to the per-pair buffer
            let pair = pairs[hi * n + ti].get_or_insert_with(|| Box::new(PairBlock::zeros()));
            pair.h += hl.fixed_view::<PAIR_DIM, PAIR_DIM>(0, 0);
            pair.b += bl.fixed_rows::<PAIR_DIM>(0);
            let frames = [(hi, 0usize), (ti, cols::TARGET_POSE)];
            block.h_dd += hl[(cols::IDEPTH, cols::IDEPTH)];
            block.b_d += bl[cols::IDEPTH];
            for &(ia, ca) in &frames {
                let v = block.coupling_mut(ia);
                for r in 0..FRAME_DIM {
                    v[r] += hl[(ca + r, cols::IDEPTH)];
                }
            }
        }
        sys.points.push(block);
    }
    window.points = points;
    for (k, pair) in pairs.iter().enumerate() {
        if let Some(pair) = pair {
            pair.scatter(sys, k / n, k % n);
        }
    }
}

/// Photometric energy over observations marked good at the last linearization.
pub fn photometric_energy(window: &Window, ctx: &EnergyContext) -> f64 {
    let cam = &window.calibration.camera;
    let mut e = 0.0;
    for point in &window.points {
        let Some(hi) = window.index_of(point.host_id) else {
            continue;
        };
        let host = &window.keyframes[hi].state;
        for obs in &point.observations {
            if obs.status != ObservationStatus::Good {
                continue;
            }
            let Some(target) = window.keyframe(obs.target_id) else {
                continue;
            };
            e += match evaluate_observation(
                &point.point,
                &point.patch,
                host,
                &target.state,
                target.pyramid.level(0),
                cam,
                &ctx.photometric,
            ) {
                Ok(r) => r.energy,
                Err(_) => ctx.failure_energy(),
            };
        }
    }
    e
}

fn scatter(sys: &mut LinearSystem, offsets: &[(usize, usize, usize)], hl: &DMatrix<f64>, bl: &DVector<f64>) {
    // offsets: (local start, global start, length)
    for &(la, ga, na) in offsets {
        for r in 0..na {
            sys.b[ga + r] += bl[la + r];
            for &(lb, gb, nb) in offsets {
                for c in 0..nb {
                    sys.h[(ga + r, gb + c)] += hl[(la + r, lb + c)];
                }
            }
        }
    }
}

fn masked_columns(j: &mut DMatrix<f64>, start: usize, free: &[bool; KF_DIM]) {
    for (k, f) in free.iter().enumerate() {
        if !f {
            j.column_mut(start + k).fill(0.0);
        }
    }
}

/// Residual and Jacobian of the inertial factor ending at window index `j`,
/// with columns `[global 3 | keyframe j-1 (23) | keyframe j (23)]`.
pub fn inertial_jacobian(window: &Window, factor: &ImuFactor, j: usize) -> (SVector<f64, 15>, DMatrix<f64>) {
    let i = j - 1;
    let calib = &window.calibration;
    let sg = &window.scale_gravity;
    let ki = &window.keyframes[i].state;
    let kj = &window.keyframes[j].state;
    let si = metric_state(ki, sg, calib);
    let sj = metric_state(kj, sg, calib);
    let lin = factor.linearize(&si, &sj, &calib.gravity);
    let mut jac = DMatrix::zeros(15, GLOBAL_DIM + 2 * KF_DIM);
    for (local, state, base) in [(&lin.jac_i, ki, GLOBAL_DIM), (&lin.jac_j, kj, GLOBAL_DIM + KF_DIM)] {
        let m = metric_pose_jacobians(state, sg, calib);
        let jt = local.fixed_columns::<3>(layout::THETA);
        let jp = local.fixed_columns::<3>(layout::POS);
        let pose = jt * m.dtheta_dpose + jp * m.dp_dpose;
        jac.view_mut((0, base + kf::POSE), (15, 6)).copy_from(&pose);
        jac.view_mut((0, base + kf::VEL), (15, 3))
            .copy_from(&local.fixed_columns::<3>(layout::VEL));
        jac.view_mut((0, base + kf::BIAS_ACC), (15, 3))
            .copy_from(&local.fixed_columns::<3>(layout::BIAS_ACC));
        jac.view_mut((0, base + kf::BIAS_GYRO), (15, 3))
            .copy_from(&local.fixed_columns::<3>(layout::BIAS_GYRO));
        let ds = jp * m.dp_dlog_scale;
        let dg = jt * m.dtheta_dgravity + jp * m.dp_dgravity;
        for r in 0..15 {
            jac[(r, 0)] += ds[r];
            jac[(r, 1)] += dg[(r, 0)];
            jac[(r, 2)] += dg[(r, 1)];
        }
    }
    (lin.residual, jac)
}

/// Adds inertial factors, twist priors and first-keyframe gauge priors for
/// keyframes accepted by `select` (inertial factors are selected by their
/// later keyframe and included when either end is selected).
pub fn accumulate_inertial(
    window: &Window,
    ctx: &EnergyContext,
    sys: &mut LinearSystem,
    select: impl Fn(usize) -> bool,
) {
    let calib = &window.calibration;
    let sg = &window.scale_gravity;
    for j in 0..window.len() {
        let kfj = &window.keyframes[j];
        // inertial factor (j-1, j)
        if let Some(factor) = &kfj.imu_from_prev {
            if j > 0 && (select(j) || select(j - 1)) && ctx.alpha > 0.0 {
                let (r, mut jac) = inertial_jacobian(window, factor, j);
                masked_columns(&mut jac, GLOBAL_DIM, &window.keyframes[j - 1].free);
                masked_columns(&mut jac, GLOBAL_DIM + KF_DIM, &kfj.free);
                let w = factor.information() * ctx.alpha;
                let rd = DVector::from_column_slice(r.as_slice());
                let wd = DMatrix::from_column_slice(15, 15, w.as_slice());
                let jtw = jac.transpose() * wd;
                let hl = &jtw * &jac;
                let bl = &jtw * &rd;
                sys.energy.inertial += rd.dot(&(DMatrix::from_column_slice(15, 15, w.as_slice()) * &rd));
                scatter(
                    sys,
                    &[
                        (0, 0, GLOBAL_DIM),
                        (GLOBAL_DIM, Window::block(j - 1), KF_DIM),
                        (GLOBAL_DIM + KF_DIM, Window::block(j), KF_DIM),
                    ],
                    &hl,
                    &bl,
                );
            }
        }
        if !select(j) {
            continue;
        }
        // twist prior
        if let Some(term) = &kfj.twist_prior {
            let twist_free = kfj.free[kf::TWIST];
            if let (true, true, Some(lin)) = (twist_free, ctx.beta > 0.0, term.linearize(&kfj.state, sg, calib)) {
                let mut jac = DMatrix::zeros(6, GLOBAL_DIM + KF_DIM);
                jac.view_mut((0, 0), (6, 1)).copy_from(&lin.d_log_scale);
                jac.view_mut((0, 1), (6, 2)).copy_from(&lin.d_gravity);
                let o = GLOBAL_DIM;
                jac.view_mut((0, o + kf::POSE), (6, 6)).copy_from(&lin.d_pose);
                jac.view_mut((0, o + kf::TWIST), (6, 6)).copy_from(&lin.d_twist);
                jac.view_mut((0, o + kf::VEL), (6, 3)).copy_from(&lin.d_velocity);
                jac.view_mut((0, o + kf::BIAS_GYRO), (6, 3)).copy_from(&lin.d_bias_gyro);
                masked_columns(&mut jac, GLOBAL_DIM, &kfj.free);
                let w = DMatrix::from_column_slice(6, 6, (lin.information * ctx.beta).as_slice());
                let rd = DVector::from_column_slice(lin.residual.as_slice());
                let jtw = jac.transpose() * &w;
                sys.energy.twist += rd.dot(&(&w * &rd));
                scatter(
                    sys,
                    &[(0, 0, GLOBAL_DIM), (GLOBAL_DIM, Window::block(j), KF_DIM)],
                    &(&jtw * &jac),
                    &(&jtw * &rd),
                );
            }
        }
        // gauge priors on the first keyframe
        if Some(kfj.id) == window.first_keyframe_id {
            add_gauge_priors(window, ctx, sys, j);
        }
    }
}

/// `|log T|^2 / sigma^2` with the exact derivative under left perturbation,
/// `d log(exp(d) T) / dd = J_l(log T)^-1`.
fn add_pose_prior(sys: &mut LinearSystem, o: usize, pose_r: &Twist6, sigma: f64) -> f64 {
    if sigma <= 0.0 {
        return 0.0;
    }
    let w = 1.0 / (sigma * sigma);
    let j = se3_left_jacobian(pose_r)
        .try_inverse()
        .unwrap_or_else(Matrix6::identity);
    let jtw = j.transpose() * w;
    let hp = jtw * j;
    let bp = jtw * pose_r;
    for r in 0..6 {
        sys.b[o + kf::POSE + r] += bp[r];
        for c in 0..6 {
            sys.h[(o + kf::POSE + r, o + kf::POSE + c)] += hp[(r, c)];
        }
    }
    w * pose_r.norm_squared()
}

fn add_gauge_priors(window: &Window, ctx: &EnergyContext, sys: &mut LinearSystem, j: usize) {
    let st = &window.keyframes[j].state;
    let o = Window::block(j);
    let mut e = add_pose_prior(sys, o, &st.pose.log(), ctx.initial_pose_sigma);
    let mut add_diag = |start: usize, r: &[f64], sigma: f64| {
        if sigma <= 0.0 {
            return 0.0;
        }
        let w = 1.0 / (sigma * sigma);
        let mut e = 0.0;
        for (k, rk) in r.iter().enumerate() {
            sys.h[(o + start + k, o + start + k)] += w;
            sys.b[o + start + k] += w * rk;
            e += w * rk * rk;
        }
        e
    };
    e += add_diag(kf::VEL, st.velocity.as_slice(), ctx.initial_velocity_sigma);
    e += add_diag(kf::BIAS_ACC, st.bias.acc.as_slice(), ctx.bias_acc_sigma);
    e += add_diag(kf::BIAS_GYRO, st.bias.gyro.as_slice(), ctx.bias_gyro_sigma);
    sys.energy.gauge += e;
}

/// Inertial, twist and gauge energy without derivatives.
pub fn inertial_energy(window: &Window, ctx: &EnergyContext) -> (f64, f64, f64) {
    let calib = &window.calibration;
    let sg = &window.scale_gravity;
    let (mut ei, mut et, mut eg) = (0.0, 0.0, 0.0);
    for j in 0..window.len() {
        let kfj = &window.keyframes[j];
        if let (Some(f), true) = (&kfj.imu_from_prev, j > 0 && ctx.alpha > 0.0) {
            let si = metric_state(&window.keyframes[j - 1].state, sg, calib);
            let sj = metric_state(&kfj.state, sg, calib);
            ei += ctx.alpha * f.energy(&si, &sj, &calib.gravity);
        }
        if let (Some(term), true) = (&kfj.twist_prior, kfj.free[kf::TWIST] && ctx.beta > 0.0) {
            et += ctx.beta * term.energy(&kfj.state, sg, calib);
        }
        if Some(kfj.id) == window.first_keyframe_id {
            let st = &kfj.state;
            let sq = |v: &[f64], s: f64| {
                if s > 0.0 {
                    v.iter().map(|x| x * x).sum::<f64>() / (s * s)
                } else {
                    0.0
                }
            };
            eg += sq(st.pose.log().as_slice(), ctx.initial_pose_sigma)
                + sq(st.velocity.as_slice(), ctx.initial_velocity_sigma)
                + sq(st.bias.acc.as_slice(), ctx.bias_acc_sigma)
                + sq(st.bias.gyro.as_slice(), ctx.bias_gyro_sigma);
        }
    }
    (ei, et, eg)
}

/// Full linearization of the window at its current state.
pub fn linearize_window(window: &mut Window, ctx: &EnergyContext) -> LinearSystem {
    let mut sys = LinearSystem::zeros(window.dim());
    // refresh inertial linearization points
    for j in 1..window.len() {
        let bias = window.keyframes[j - 1].state.bias;
        if let Some(f) = window.keyframes[j].imu_from_prev.as_mut() {
            if let Err(e) = f.ensure_bias(&bias) {
                log::warn!("re-preintegration failed: {e}");
            }
        }
    }
    accumulate_photometric(window, ctx, &mut sys, |_| true, |_| true);
    accumulate_inertial(window, ctx, &mut sys, |_| true);
    let states = window.states();
    let (hp, bp) = window.priors.primary.linearize(&window.scale_gravity, &states);
    sys.h += hp;
    sys.b += bp;
    sys.energy.prior = window.priors.primary.energy(&window.scale_gravity, &states);
    sys
}

/// Total energy at the current state over the active residual set.
pub fn window_energy(window: &Window, ctx: &EnergyContext) -> EnergyBreakdown {
    let (inertial, twist, gauge) = inertial_energy(window, ctx);
    EnergyBreakdown {
        photometric: photometric_energy(window, ctx),
        inertial,
        twist,
        gauge,
        prior: window.priors.primary.energy(&window.scale_gravity, &window.states()),
    }
}
