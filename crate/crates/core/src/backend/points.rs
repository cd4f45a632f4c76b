//! Point selection, epipolar depth tracing and activation.

use super::config::PointConfig;
use super::window::{ActivePoint, ImmaturePoint, Observation, ObservationStatus, Window};
use crate::camera::CameraModel;
use crate::image::GradientLevel;
use crate::photometric::{
    evaluate_observation, host_capture_time, huber_energy, huber_weight, linearize_observation, project_rs,
    projection_jacobian, HostPatch, HostPoint, PhotometricConfig, PATTERN_RADIUS, PATTERN_SIZE,
};
use crate::state::KeyframeState;
use nalgebra::Vector2;
use rand::Rng;

/// Cell side used to thin candidates before sampling.
const CELL: usize = 4;

/// Picks up to `count` candidate pixels. The image is split into regions;
/// inside each region only pixels whose gradient exceeds the region median by
/// `min_gradient` qualify, the strongest pixel per small cell is kept, and
/// the final set is drawn with probability proportional to gradient magnitude.
pub fn select_candidates<R: Rng>(
    level: &GradientLevel,
    cfg: &PointConfig,
    count: usize,
    rng: &mut R,
) -> Vec<Vector2<f64>> {
    let (w, h) = (level.width, level.height);
    let border = cfg.border.max(PATTERN_RADIUS as usize + 2);
    if count == 0 || w <= 2 * border || h <= 2 * border {
        return Vec::new();
    }
    let region = cfg.region_size.max(CELL);
    let mut pool: Vec<(f64, usize, usize)> = Vec::new();
    let mut ry = border;
    while ry < h - border {
        let ry1 = (ry + region).min(h - border);
        let mut rx = border;
        while rx < w - border {
            let rx1 = (rx + region).min(w - border);
            let mut mags: Vec<f32> = Vec::with_capacity((ry1 - ry) * (rx1 - rx));
            for y in ry..ry1 {
                for x in rx..rx1 {
                    mags.push(level.gradient_sq(x, y).sqrt());
                }
            }
            mags.sort_by(f32::total_cmp);
            let threshold = mags[mags.len() / 2] as f64 + cfg.min_gradient;
            let mut cy = ry;
            while cy < ry1 {
                let mut cx = rx;
                while cx < rx1 {
                    let mut best: Option<(f64, usize, usize)> = None;
                    for y in cy..(cy + CELL).min(ry1) {
                        for x in cx..(cx + CELL).min(rx1) {
                            let g = (level.gradient_sq(x, y) as f64).sqrt();
                            if g > threshold && best.is_none_or(|b| g > b.0) {
                                best = Some((g, x, y));
                            }
                        }
                    }
                    pool.extend(best);
                    cx += CELL;
                }
                cy += CELL;
            }
            rx = rx1;
        }
        ry = ry1;
    }
    // weighted sampling without replacement: key u^(1/g), keep the largest
    let mut keyed: Vec<(f64, usize, usize)> = pool
        .into_iter()
        .map(|(g, x, y)| {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            (u.ln() / g, x, y)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.2, a.1).cmp(&(b.2, b.1))));
    keyed.truncate(count);
    keyed.sort_by_key(|k| (k.2, k.1));
    keyed
        .into_iter()
        .map(|(_, x, y)| Vector2::new(x as f64, y as f64))
        .collect()
}

/// Creates an immature point for a host pixel, or `None` if its patch leaves the image.
pub fn make_immature(
    host_id: usize,
    pixel: Vector2<f64>,
    level: &GradientLevel,
    cam: &CameraModel,
    photo: &PhotometricConfig,
    cfg: &PointConfig,
) -> Option<ImmaturePoint> {
    let patch = HostPatch::sample(level, &pixel, photo)?;
    let host_time = host_capture_time(cam, &pixel, photo).ok()?;
    Some(ImmaturePoint {
        host_id,
        pixel,
        host_time,
        patch,
        idepth_min: cfg.idepth_min,
        idepth_max: cfg.idepth_max,
        quality: 0.0,
        traced: 0,
        failures: 0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TraceOutcome {
    /// The search produced a new inverse-depth interval.
    Good,
    /// The epipolar segment is too short to be informative.
    Skipped,
    /// The segment leaves the image or the projection failed.
    OutOfBounds,
    /// No acceptable match along the segment.
    Outlier,
}

/// Searches the epipolar segment of `point` in the target frame, updating
/// its inverse-depth interval and match quality.
pub fn trace_immature(
    point: &mut ImmaturePoint,
    host: &KeyframeState,
    target: &KeyframeState,
    target_level: &GradientLevel,
    cam: &CameraModel,
    photo: &PhotometricConfig,
    cfg: &PointConfig,
) -> TraceOutcome {
    let (pixel, host_time, patch) = (point.pixel, point.host_time, point.patch);
    let host_point = |idepth: f64| HostPoint {
        pixel,
        idepth,
        host_time,
    };
    // global-shutter relative geometry for sampling: x(d) ~ a + d t
    let rel = target.pose * host.pose.inverse();
    let a = rel.rotation.rotate(&cam.bearing(&point.pixel));
    let t = rel.translation;
    let normalized = |d: f64| {
        let z = a.z + d * t.z;
        (z > 1e-6).then(|| Vector2::new((a.x + d * t.x) / z, (a.y + d * t.y) / z))
    };
    let d_lo = point.idepth_min.max(1e-4);
    let mut d_hi = point.idepth_max;
    if t.z < 0.0 {
        // keep the far end in front of the camera
        d_hi = d_hi.min(0.9 * a.z / -t.z);
    }
    if d_hi <= d_lo {
        return TraceOutcome::OutOfBounds;
    }
    let (Some(n_lo), Some(n_hi)) = (normalized(d_lo), normalized(d_hi)) else {
        return TraceOutcome::OutOfBounds;
    };
    // clip the segment to the image (Liang-Barsky in normalized coordinates)
    let margin = PATTERN_RADIUS + 1.0;
    let lo_box = Vector2::new((margin - cam.cx) / cam.fx, (margin - cam.cy) / cam.fy);
    let hi_box = Vector2::new(
        (cam.width as f64 - 1.0 - margin - cam.cx) / cam.fx,
        (cam.height as f64 - 1.0 - margin - cam.cy) / cam.fy,
    );
    let dir = n_hi - n_lo;
    let (mut l0, mut l1) = (0.0f64, 1.0f64);
    for k in 0..2 {
        if dir[k].abs() < 1e-15 {
            if n_lo[k] < lo_box[k] || n_lo[k] > hi_box[k] {
                return TraceOutcome::OutOfBounds;
            }
            continue;
        }
        let a0 = (lo_box[k] - n_lo[k]) / dir[k];
        let a1 = (hi_box[k] - n_lo[k]) / dir[k];
        l0 = l0.max(a0.min(a1));
        l1 = l1.min(a0.max(a1));
    }
    if l0 >= l1 {
        point.failures += 1;
        return TraceOutcome::OutOfBounds;
    }
    let (n_lo, n_hi) = (n_lo + dir * l0, n_lo + dir * l1);
    let span = Vector2::new((n_hi.x - n_lo.x) * cam.fx, (n_hi.y - n_lo.y) * cam.fy);
    let length = span.norm();
    if length < cfg.min_trace_pixels {
        return TraceOutcome::Skipped;
    }
    let steps = (length.ceil() as usize).clamp(2, 1000);
    let use_x = span.x.abs() >= span.y.abs();
    let energy_of = |d: f64| -> Option<(f64, Vector2<f64>)> {
        let r = evaluate_observation(&host_point(d), &patch, host, target, target_level, cam, photo).ok()?;
        if !cam.in_image(&r.projection.pixel, PATTERN_RADIUS + 1.0) {
            return None;
        }
        let e: f64 = r
            .residuals
            .iter()
            .map(|v| huber_energy(*v, photo.huber_threshold))
            .sum();
        Some((e, r.projection.pixel))
    };
    let mut samples: Vec<(f64, f64, Vector2<f64>)> = Vec::with_capacity(steps + 1);
    for i in 0..=steps {
        let n = n_lo + (n_hi - n_lo) * (i as f64 / steps as f64);
        let d = if use_x {
            (a.x - n.x * a.z) / (n.x * t.z - t.x)
        } else {
            (a.y - n.y * a.z) / (n.y * t.z - t.y)
        };
        if !d.is_finite() || d <= 0.0 {
            continue;
        }
        if let Some((e, px)) = energy_of(d) {
            samples.push((e, d, px));
        }
    }
    if samples.is_empty() {
        point.failures += 1;
        return TraceOutcome::OutOfBounds;
    }
    let best = *samples.iter().min_by(|x, y| x.0.total_cmp(&y.0)).expect("non-empty");
    let second = samples
        .iter()
        .filter(|s| (s.2 - best.2).norm() >= 2.0)
        .map(|s| s.0)
        .fold(f64::INFINITY, f64::min);
    point.traced += 1;
    if best.0 > cfg.max_trace_energy * PATTERN_SIZE as f64 {
        point.failures += 1;
        point.quality = 0.0;
        return TraceOutcome::Outlier;
    }
    point.quality = second / best.0.max(1e-6);

    // Gauss-Newton refinement along the inverse depth
    let mut d = best.1;
    let mut e = best.0;
    for _ in 0..3 {
        let Ok(lin) = linearize_observation(&host_point(d), &patch, host, target, target_level, cam, photo) else {
            break;
        };
        let (mut hh, mut bb) = (0.0, 0.0);
        for k in 0..PATTERN_SIZE {
            let j = lin.rows[k][crate::photometric::cols::IDEPTH];
            let w = huber_weight(lin.residuals[k], photo.huber_threshold);
            hh += w * j * j;
            bb += w * j * lin.residuals[k];
        }
        if hh <= 0.0 {
            break;
        }
        let cand = d - bb / hh;
        if !(cand > 0.0) {
            break;
        }
        match energy_of(cand) {
            Some((ec, _)) if ec < e => {
                d = cand;
                e = ec;
            }
            _ => break,
        }
    }

    // uncertainty from the pixel accuracy of the match along the line
    let Ok(proj) = project_rs(&host_point(d), host, target, cam, photo) else {
        return TraceOutcome::OutOfBounds;
    };
    let Ok(jac) = projection_jacobian(&proj, &host_point(d), host, target, cam, photo) else {
        return TraceOutcome::OutOfBounds;
    };
    let px_per_idepth = jac.d_idepth.norm().max(1e-9);
    let pixel_error = 1.0 + (e / PATTERN_SIZE as f64).sqrt() / 10.0;
    let delta = pixel_error / px_per_idepth;
    point.idepth_min = (d - delta).max(d * 0.1).max(1e-4);
    point.idepth_max = d + delta;
    TraceOutcome::Good
}

impl ImmaturePoint {
    pub fn idepth_estimate(&self) -> f64 {
        0.5 * (self.idepth_min + self.idepth_max)
    }

    pub fn ready(&self, cfg: &PointConfig) -> bool {
        let d = self.idepth_estimate();
        self.traced > 0
            && self.quality >= cfg.min_quality
            && (self.idepth_max - self.idepth_min) * 0.5 <= cfg.max_relative_uncertainty * d
    }
}

/// Traces every immature point of older keyframes into the newest one and
/// removes points that failed repeatedly.
pub fn trace_into_latest(window: &mut Window, photo: &PhotometricConfig, cfg: &PointConfig) {
    let Some(latest) = window.latest() else {
        return;
    };
    let target = latest.state;
    let target_id = latest.id;
    let level = latest.pyramid.level(0).clone();
    let cam = window.calibration.camera.clone();
    let mut immature = std::mem::take(&mut window.immature);
    for p in immature.iter_mut() {
        if p.host_id == target_id {
            continue;
        }
        let Some(host) = window.keyframe(p.host_id) else {
            continue;
        };
        trace_immature(p, &host.state, &target, &level, &cam, photo, cfg);
    }
    immature.retain(|p| p.failures < 2);
    window.immature = immature;
}

/// Promotes converged immature points to active points, respecting the point
/// budget and a minimum pixel spacing per host. Returns the number activated.
pub fn activate_points(window: &mut Window, cfg: &PointConfig, budget: usize) -> usize {
    let room = budget.saturating_sub(window.points.len());
    if room == 0 {
        return 0;
    }
    let mut ready: Vec<usize> = (0..window.immature.len())
        .filter(|&i| window.immature[i].ready(cfg))
        .collect();
    // most certain first; ties broken by position for determinism
    ready.sort_by(|&a, &b| {
        let pa = &window.immature[a];
        let pb = &window.immature[b];
        let ua = (pa.idepth_max - pa.idepth_min) / pa.idepth_estimate();
        let ub = (pb.idepth_max - pb.idepth_min) / pb.idepth_estimate();
        ua.total_cmp(&ub).then(a.cmp(&b))
    });
    let min_dist2 = cfg.min_point_distance * cfg.min_point_distance;
    let mut taken = vec![false; window.immature.len()];
    let mut activated = 0;
    for i in ready {
        if activated >= room {
            break;
        }
        let p = &window.immature[i];
        let crowded = window
            .points
            .iter()
            .any(|q| q.host_id == p.host_id && (q.point.pixel - p.pixel).norm_squared() < min_dist2);
        if crowded {
            taken[i] = true;
            continue;
        }
        let observations = window
            .keyframes
            .iter()
            .filter(|k| k.id != p.host_id)
            .map(|k| Observation {
                target_id: k.id,
                status: ObservationStatus::Good,
                last_energy: 0.0,
            })
            .collect();
        window.points.push(ActivePoint {
            host_id: p.host_id,
            point: HostPoint {
                pixel: p.pixel,
                idepth: p.idepth_estimate(),
                host_time: p.host_time,
            },
            patch: p.patch,
            observations,
        });
        taken[i] = true;
        activated += 1;
    }
    let mut k = 0;
    window.immature.retain(|_| {
        let keep = !taken[k];
        k += 1;
        keep
    });
    activated
}

/// Removes observations that were out of bounds or outliers at the last
/// linearization and points left without any good observation.
pub fn prune_points(window: &mut Window) -> usize {
    let before = window.points.len();
    for p in window.points.iter_mut() {
        p.observations.retain(|o| o.status == ObservationStatus::Good);
    }
    window
        .points
        .retain(|p| !p.observations.is_empty() && p.point.idepth.is_finite() && p.point.idepth > 0.0);
    before - window.points.len()
}

/// Adds an observation in keyframe `target_id` to every active point hosted elsewhere.
pub fn observe_in(window: &mut Window, target_id: usize) {
    for p in window.points.iter_mut() {
        if p.host_id != target_id && p.observations.iter().all(|o| o.target_id != target_id) {
            p.observations.push(Observation {
                target_id,
                status: ObservationStatus::Good,
                last_energy: 0.0,
            });
        }
    }
}

/// Fraction of the points hosted in keyframe `id` that are still observed
/// in the newest keyframe. `None` when it hosts no active point.
pub fn visible_fraction(window: &Window, id: usize) -> Option<f64> {
    let latest = window.latest()?.id;
    let hosted: Vec<&ActivePoint> = window.points.iter().filter(|p| p.host_id == id).collect();
    if hosted.is_empty() {
        return None;
    }
    let seen = hosted
        .iter()
        .filter(|p| {
            p.observations
                .iter()
                .any(|o| o.target_id == latest && o.status == ObservationStatus::Good)
        })
        .count();
    Some(seen as f64 / hosted.len() as f64)
}
