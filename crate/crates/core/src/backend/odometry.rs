//! Frame-by-frame driver: IMU prediction, keyframe decisions, the window
//! optimization sequence and trajectory output.

use super::config::{OdometryConfig, PointMarginalization, ShutterMode};
use super::marginalization::MarginalizedFactors;
use super::optimizer::{optimize, OptimizationReport};
use super::points::{
    activate_points, make_immature, observe_in, prune_points, select_candidates, trace_into_latest, visible_fraction,
};
use super::system::{accumulate_inertial, accumulate_photometric, EnergyContext, LinearSystem};
use super::window::{free_mask, Keyframe, Window};
use crate::image::{GrayImage, ImagePyramid};
use crate::imu::{interpolate_gyro, predict_state, ImuError, ImuFactor, ImuSample};
use crate::lie::{Pose3, Rot3};
use crate::state::{
    camera_pose_from_imu, imu_pose_metric, metric_state, Calibration, ImuBias, KeyframeState, ScaleGravity,
};
use crate::twist::{camera_twist, imu_twist, prior_twist, TwistPriorTerm};
use nalgebra::{Vector3, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Upper bound on the points used for the mean-flow estimate.
const FLOW_SAMPLE_LIMIT: usize = 400;

#[derive(Debug, Error)]
pub enum OdometryError {
    #[error("not enough IMU samples to initialise gravity ({0} available)")]
    GravityInit(usize),
    #[error("optimization diverged at frame {frame} (t = {timestamp:.3} s)")]
    Diverged { frame: usize, timestamp: f64 },
    #[error("frames must be processed in increasing time order (got {0:.6} after {1:.6})")]
    NonMonotonic(f64, f64),
}

/// Final estimate of one keyframe in the metric world.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KeyframeEstimate {
    pub id: usize,
    pub frame_index: usize,
    pub timestamp: f64,
    /// `T_WmI`.
    pub imu_pose: Pose3,
    pub velocity: Vector3<f64>,
    pub bias: ImuBias,
    /// Scale at the time the estimate was frozen.
    pub scale: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameOutcome {
    Keyframe,
    Tracked,
    /// Not enough IMU coverage to predict the frame.
    Skipped,
}

#[derive(Clone, Debug, Default)]
pub struct RunStatistics {
    pub frames: usize,
    pub keyframes: usize,
    pub skipped: usize,
    pub prior_switches: usize,
    pub optimizations: Vec<OptimizationReport>,
}

pub struct Odometry {
    cfg: OdometryConfig,
    ctx: EnergyContext,
    calibration: Calibration,
    imu: Vec<ImuSample>,
    window: Option<Window>,
    rng: ChaCha8Rng,
    frames_since_keyframe: usize,
    last_timestamp: Option<f64>,
    finished: Vec<KeyframeEstimate>,
    twist_free: bool,
    pub stats: RunStatistics,
}

/// Rotation taking the unit vector `from` onto `to` with minimal angle.
fn minimal_rotation(from: &Vector3<f64>, to: &Vector3<f64>) -> Rot3 {
    let a = from.normalize();
    let b = to.normalize();
    let axis = a.cross(&b);
    let s = axis.norm();
    let c = a.dot(&b);
    if s < 1e-12 {
        if c > 0.0 {
            return Rot3::identity();
        }
        // opposite: rotate by pi about any axis orthogonal to a
        let ortho = if a.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let k = a.cross(&ortho).normalize();
        return Rot3::exp(&(k * std::f64::consts::PI));
    }
    Rot3::exp(&(axis / s * s.atan2(c)))
}

fn samples_between(imu: &[ImuSample], t0: f64, t1: f64) -> Vec<ImuSample> {
    let start = imu.partition_point(|s| s.timestamp <= t0).saturating_sub(1);
    let end = (imu.partition_point(|s| s.timestamp < t1) + 1).min(imu.len());
    imu[start..end.max(start)].to_vec()
}

impl Odometry {
    /// `imu` must be sorted by time. With a zero row delay in the calibration
    /// twists are not estimated in either mode.
    pub fn new(cfg: OdometryConfig, calibration: Calibration, imu: Vec<ImuSample>) -> Self {
        let gs_data = calibration.camera.is_global_shutter();
        let ctx = EnergyContext::new(&cfg, gs_data);
        let twist_free = cfg.mode == ShutterMode::Rs && !gs_data;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Self {
            cfg,
            ctx,
            calibration,
            imu,
            window: None,
            rng,
            frames_since_keyframe: 0,
            last_timestamp: None,
            finished: Vec::new(),
            twist_free,
            stats: RunStatistics::default(),
        }
    }

    pub fn config(&self) -> &OdometryConfig {
        &self.cfg
    }

    pub fn window(&self) -> Option<&Window> {
        self.window.as_ref()
    }

    fn initial_scale_gravity(&self, t0: f64) -> Result<ScaleGravity, OdometryError> {
        let n = self.cfg.frontend.gravity_init_samples.max(1);
        let start = self.imu.partition_point(|s| s.timestamp < t0 - 1e-9);
        let start = start.min(self.imu.len().saturating_sub(n));
        let window = &self.imu[start..(start + n).min(self.imu.len())];
        if window.is_empty() {
            return Err(OdometryError::GravityInit(0));
        }
        let mean = window.iter().map(|s| s.accel).sum::<Vector3<f64>>() / window.len() as f64;
        if mean.norm() < 1e-6 {
            return Err(OdometryError::GravityInit(window.len()));
        }
        // Specific force at rest points against gravity; rotate it onto +z,
        // opposite to the world gravity vector.
        let r_wi = minimal_rotation(&mean, &(-self.calibration.gravity));
        let r_g = r_wi * self.calibration.t_cam_imu.rotation.inverse();
        Ok(ScaleGravity::new(1.0, r_g))
    }

    fn twist_prior_term(&self, t: f64) -> Option<TwistPriorTerm> {
        let gyro = interpolate_gyro(&self.imu, t)?;
        let s = &self.cfg.solver;
        let w = Vector6::new(
            s.twist_weight_translation,
            s.twist_weight_translation,
            s.twist_weight_translation,
            s.twist_weight_rotation,
            s.twist_weight_rotation,
            s.twist_weight_rotation,
        );
        Some(TwistPriorTerm::new(gyro, w))
    }

    fn initial_twist(&self, state: &KeyframeState, sg: &ScaleGravity, term: &Option<TwistPriorTerm>) -> Vector6<f64> {
        match (self.twist_free, term) {
            (true, Some(term)) => {
                let xi = camera_twist(&imu_twist(state, sg, &self.calibration, &term.gyro), &self.calibration);
                prior_twist(&xi, sg.scale(), self.calibration.camera.row_time_td)
            }
            _ => Vector6::zeros(),
        }
    }

    fn make_keyframe(
        &mut self,
        window: &Window,
        id: usize,
        frame_index: usize,
        mut state: KeyframeState,
        image: &GrayImage,
        imu_from_prev: Option<ImuFactor>,
    ) -> Keyframe {
        let twist_prior = self.twist_prior_term(state.timestamp);
        state.twist = self.initial_twist(&state, &window.scale_gravity, &twist_prior);
        Keyframe {
            id,
            frame_index,
            state,
            pyramid: ImagePyramid::new(image, self.cfg.frontend.pyramid_levels),
            imu_from_prev,
            twist_prior,
            free: free_mask(self.twist_free, self.cfg.solver.estimate_affine),
        }
    }

    fn add_candidates(&mut self, window: &mut Window) {
        let Some(latest) = window.latest() else {
            return;
        };
        let count = (self.cfg.points.candidates_per_keyframe * self.cfg.solver.point_budget as f64).round() as usize;
        let level = latest.pyramid.level(0);
        let host = latest.id;
        let pixels = select_candidates(level, &self.cfg.points, count, &mut self.rng);
        let cam = &window.calibration.camera;
        let fresh: Vec<_> = pixels
            .into_iter()
            .filter_map(|px| make_immature(host, px, level, cam, &self.ctx.photometric, &self.cfg.points))
            .collect();
        window.immature.extend(fresh);
    }

    fn estimate_of(window: &Window, k: &Keyframe) -> KeyframeEstimate {
        KeyframeEstimate {
            id: k.id,
            frame_index: k.frame_index,
            timestamp: k.state.timestamp,
            imu_pose: imu_pose_metric(&k.state, &window.scale_gravity, &window.calibration),
            velocity: k.state.velocity,
            bias: k.state.bias,
            scale: window.scale_gravity.scale(),
        }
    }

    /// Mean optical flow (pixels, normalized to a 1000-pixel diagonal) from the
    /// latest keyframe to a predicted pose: translation only and full motion.
    fn mean_flow(window: &Window, predicted: &Pose3) -> (f64, f64) {
        let Some(latest) = window.latest() else {
            return (0.0, 0.0);
        };
        let cam = &window.calibration.camera;
        let rel = *predicted * latest.state.pose.inverse();
        let mut pts: Vec<Vector3<f64>> = Vec::new();
        for p in window.points.iter().take(FLOW_SAMPLE_LIMIT) {
            let Some(host) = window.keyframe(p.host_id) else {
                continue;
            };
            let Ok(x) = cam.unproject(&p.point.pixel, p.point.idepth) else {
                continue;
            };
            let w = host.state.pose.inverse().transform_point(&x);
            pts.push(latest.state.pose.transform_point(&w));
        }
        if pts.is_empty() {
            for p in window
                .immature
                .iter()
                .filter(|p| p.host_id == latest.id)
                .take(FLOW_SAMPLE_LIMIT)
            {
                if let Ok(x) = cam.unproject(&p.pixel, p.idepth_estimate()) {
                    pts.push(x);
                }
            }
        }
        let (mut ft, mut fa, mut n) = (0.0, 0.0, 0usize);
        for x in &pts {
            let (Ok(u0), Ok(ut), Ok(ua)) = (
                cam.project(x),
                cam.project(&(x + rel.translation)),
                cam.project(&rel.transform_point(x)),
            ) else {
                continue;
            };
            ft += (ut - u0).norm();
            fa += (ua - u0).norm();
            n += 1;
        }
        if n == 0 {
            return (0.0, 0.0);
        }
        let norm = 1000.0 / ((cam.width * cam.width + cam.height * cam.height) as f64).sqrt();
        (ft / n as f64 * norm, fa / n as f64 * norm)
    }

    /// Processes one image whose reference row was captured at `timestamp` seconds.
    pub fn process_frame(
        &mut self,
        frame_index: usize,
        timestamp: f64,
        image: &GrayImage,
    ) -> Result<FrameOutcome, OdometryError> {
        if let Some(prev) = self.last_timestamp {
            if timestamp <= prev {
                return Err(OdometryError::NonMonotonic(timestamp, prev));
            }
        }
        self.last_timestamp = Some(timestamp);
        self.stats.frames += 1;
        let Some(mut window) = self.window.take() else {
            let sg = self.initial_scale_gravity(timestamp)?;
            let mut window = Window::new(self.calibration.clone(), sg);
            let id = window.allocate_id();
            let state = KeyframeState::new(timestamp, Pose3::identity());
            let kf = self.make_keyframe(&window, id, frame_index, state, image, None);
            window.push_keyframe(kf);
            self.add_candidates(&mut window);
            self.stats.keyframes += 1;
            self.frames_since_keyframe = 0;
            self.window = Some(window);
            return Ok(FrameOutcome::Keyframe);
        };
        let result = self.track(&mut window, frame_index, timestamp, image);
        self.window = Some(window);
        result
    }

    fn predict(&self, window: &Window, timestamp: f64) -> Result<(Pose3, KeyframeState, ImuFactor), ImuError> {
        let latest = window.latest().expect("window is initialised");
        let t0 = latest.state.timestamp;
        let samples = samples_between(&self.imu, t0, timestamp);
        let factor = ImuFactor::new(
            samples,
            t0,
            timestamp,
            latest.state.bias,
            self.cfg.imu,
            self.cfg.preintegration,
        )?;
        let deltas = factor.preint.correct_bias(&latest.state.bias)?;
        let si = metric_state(&latest.state, &window.scale_gravity, &self.calibration);
        let (r, p, v) = predict_state(&si, &deltas, &self.calibration.gravity, timestamp - t0);
        let pose = camera_pose_from_imu(&Pose3::new(r, p), &window.scale_gravity, &self.calibration);
        let mut state = latest.state;
        state.timestamp = timestamp;
        state.pose = pose;
        state.velocity = v;
        Ok((pose, state, factor))
    }

    fn track(
        &mut self,
        window: &mut Window,
        frame_index: usize,
        timestamp: f64,
        image: &GrayImage,
    ) -> Result<FrameOutcome, OdometryError> {
        let (pose, state, factor) = match self.predict(window, timestamp) {
            Ok(p) => p,
            Err(e) => {
                log::warn!("frame {frame_index} skipped: {e}");
                self.stats.skipped += 1;
                return Ok(FrameOutcome::Skipped);
            }
        };
        self.frames_since_keyframe += 1;
        let (flow_t, flow_all) = Self::mean_flow(window, &pose);
        let fe = &self.cfg.frontend;
        let need = self.frames_since_keyframe >= fe.max_keyframe_interval
            || flow_t > fe.flow_translation
            || flow_all > fe.flow_total;
        if !need {
            return Ok(FrameOutcome::Tracked);
        }
        self.frames_since_keyframe = 0;
        let id = window.allocate_id();
        let kf = self.make_keyframe(window, id, frame_index, state, image, Some(factor));
        window.push_keyframe(kf);
        self.stats.keyframes += 1;
        observe_in(window, id);

        self.run_optimization(window, frame_index, timestamp)?;
        trace_into_latest(window, &self.ctx.photometric, &self.cfg.points);
        if activate_points(window, &self.cfg.points, self.cfg.solver.point_budget) > 0 {
            self.run_optimization(window, frame_index, timestamp)?;
        }
        prune_points(window);
        self.add_candidates(window);
        while window.len() >= self.cfg.solver.max_keyframes.max(2) {
            let index = self.choose_marginalized(window);
            self.marginalize(window, index);
        }
        Ok(FrameOutcome::Keyframe)
    }

    fn run_optimization(&mut self, window: &mut Window, frame: usize, timestamp: f64) -> Result<(), OdometryError> {
        let report = optimize(window, &self.ctx, &self.cfg.solver);
        log::debug!(
            "frame {frame}: {} keyframes, {} points, {} candidates, scale {:.4}, energy {:.1} -> {:.1} in {} steps",
            window.len(),
            window.points.len(),
            window.immature.len(),
            window.scale_gravity.scale(),
            report.initial_energy,
            report.final_energy,
            report.accepted_steps
        );
        let diverged = report.diverged && report.accepted_steps == 0 && !report.final_energy.is_finite();
        self.stats.optimizations.push(report);
        if diverged || !window.scale_gravity.scale().is_finite() {
            return Err(OdometryError::Diverged { frame, timestamp });
        }
        if window
            .priors
            .maybe_switch(&window.scale_gravity, self.cfg.solver.scale_switch_threshold)
        {
            self.stats.prior_switches += 1;
        }
        Ok(())
    }

    /// Keyframe to drop: one that lost almost all its points, otherwise the
    /// distance-score choice that keeps keyframes spread out near the newest.
    fn choose_marginalized(&self, window: &Window) -> usize {
        let n = window.len();
        let latest = n - 1;
        for i in 0..n.saturating_sub(2) {
            if let Some(f) = visible_fraction(window, window.keyframes[i].id) {
                if f < 0.05 {
                    return i;
                }
            }
        }
        let centre = |i: usize| {
            let p = &window.keyframes[i].state.pose;
            p.inverse().translation
        };
        let c_last = centre(latest);
        let mut best = (f64::NEG_INFINITY, 0usize);
        for i in 0..n.saturating_sub(2) {
            let ci = centre(i);
            let mut sum = 0.0;
            for j in 0..n - 1 {
                if j != i {
                    sum += 1.0 / ((ci - centre(j)).norm() + 1e-5);
                }
            }
            let score = ((ci - c_last).norm() + 1e-5).sqrt() * sum;
            if score > best.0 {
                best = (score, i);
            }
        }
        best.1
    }

    fn marginalize(&mut self, window: &mut Window, index: usize) {
        let dim = window.dim();
        let id = window.keyframes[index].id;
        // re-linearize the photometric terms that are folded into the prior
        let mut visual = LinearSystem::zeros(dim);
        if self.cfg.solver.point_marginalization == PointMarginalization::Marginalize {
            accumulate_photometric(window, &self.ctx, &mut visual, |p| p.host_id == id, |_| true);
            let prior = 1.0 / (self.cfg.solver.idepth_prior_sigma * self.cfg.solver.idepth_prior_sigma);
            visual.eliminate_points(prior);
        }
        let mut inertial = LinearSystem::zeros(dim);
        accumulate_inertial(window, &self.ctx, &mut inertial, |j| j == index);
        let states = window.states();
        let free = window.keyframes[index].free;
        window.priors.marginalize(
            &MarginalizedFactors {
                visual_h: &visual.h,
                visual_b: &visual.b,
                inertial_h: &inertial.h,
                inertial_b: &inertial.b,
            },
            &window.scale_gravity,
            &states,
            index,
            &free,
        );
        let removed = window.keyframes.remove(index);
        self.finished.push(Self::estimate_of(window, &removed));
        if let Some(next) = window.keyframes.get_mut(index) {
            next.imu_from_prev = None;
        }
        window.points.retain(|p| p.host_id != id);
        window.immature.retain(|p| p.host_id != id);
        for p in window.points.iter_mut() {
            p.observations.retain(|o| o.target_id != id);
        }
        window.points.retain(|p| !p.observations.is_empty());
    }

    /// Estimates of all keyframes, sorted by time: marginalized keyframes as
    /// they were when they left the window, the rest at their current value.
    pub fn trajectory(&self) -> Vec<KeyframeEstimate> {
        let mut out = self.finished.clone();
        if let Some(w) = &self.window {
            out.extend(w.keyframes.iter().map(|k| Self::estimate_of(w, k)));
        }
        out.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        out
    }

    pub fn scale(&self) -> Option<f64> {
        self.window.as_ref().map(|w| w.scale_gravity.scale())
    }

    pub fn scale_gravity(&self) -> Option<ScaleGravity> {
        self.window.as_ref().map(|w| w.scale_gravity)
    }
}
