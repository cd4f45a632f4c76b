use crate::align::{align_se3, gravity_angle, similarity_scale};
use crate::EvalError;
use nalgebra::Vector3;
use rsvio_core::lie::Pose3;
use rsvio_dataset::TimedPose;

/// Estimates farther than this from every reference timestamp are dropped.
pub const ASSOCIATION_WINDOW: f64 = 0.010;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMetadata {
    pub label: String,
    pub seed: Option<u64>,
    pub mode: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeyframeError {
    pub timestamp: f64,
    /// Aligned estimated position.
    pub estimate: Vector3<f64>,
    pub reference: Vector3<f64>,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub metadata: RunMetadata,
    /// Root mean square of the aligned position errors, meters.
    pub e_ate: f64,
    pub errors: Vec<KeyframeError>,
    /// Maps estimated positions onto the reference.
    pub alignment: Pose3,
    /// Estimates without a reference pose within the association window.
    pub unmatched: usize,
}

/// Pairs every estimate with the nearest reference timestamp within
/// [`ASSOCIATION_WINDOW`]. Returns `(timestamp, estimate, reference)` triples
/// and the number of unmatched estimates. Both inputs must be time sorted.
pub fn associate(est: &[TimedPose], gt: &[TimedPose]) -> (Vec<(f64, Vector3<f64>, Vector3<f64>)>, usize) {
    let mut pairs = Vec::with_capacity(est.len());
    let mut unmatched = 0;
    for e in est {
        let i = gt.partition_point(|g| g.timestamp < e.timestamp);
        let nearest = [i.checked_sub(1), Some(i)]
            .into_iter()
            .flatten()
            .filter_map(|k| gt.get(k))
            .min_by(|a, b| {
                (a.timestamp - e.timestamp)
                    .abs()
                    .total_cmp(&(b.timestamp - e.timestamp).abs())
            });
        match nearest {
            Some(g) if (g.timestamp - e.timestamp).abs() <= ASSOCIATION_WINDOW => {
                pairs.push((e.timestamp, e.pose.translation, g.pose.translation));
            }
            _ => unmatched += 1,
        }
    }
    (pairs, unmatched)
}

/// Absolute trajectory error of the estimate after rigid alignment (no scale).
pub fn ate(est: &[TimedPose], gt: &[TimedPose], metadata: RunMetadata) -> Result<EvalReport, EvalError> {
    let (pairs, unmatched) = associate(est, gt);
    let e: Vec<_> = pairs.iter().map(|p| p.1).collect();
    let g: Vec<_> = pairs.iter().map(|p| p.2).collect();
    let alignment = align_se3(&e, &g)?;
    let errors: Vec<KeyframeError> = pairs
        .iter()
        .map(|(t, e, g)| {
            let a = alignment.transform_point(e);
            KeyframeError {
                timestamp: *t,
                estimate: a,
                reference: *g,
                error: (a - g).norm(),
            }
        })
        .collect();
    let e_ate = (errors.iter().map(|k| k.error * k.error).sum::<f64>() / errors.len() as f64).sqrt();
    Ok(EvalReport {
        metadata,
        e_ate,
        errors,
        alignment,
        unmatched,
    })
}

/// Length of the reference path through the given positions.
pub fn path_length(poses: &[TimedPose]) -> f64 {
    poses
        .windows(2)
        .map(|w| (w[1].pose.translation - w[0].pose.translation).norm())
        .sum()
}

/// Metric quality of an estimate beyond the position error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricConsistency {
    /// Scale of the best similarity from estimate to reference; 1 is exact.
    pub scale: f64,
    /// Gravity direction error at the last associated pose, radians.
    pub gravity_angle: f64,
}

impl MetricConsistency {
    pub fn scale_error(&self) -> f64 {
        (self.scale - 1.0).abs()
    }
}

/// Scale and gravity-direction agreement between an estimate and the reference.
pub fn metric_consistency(est: &[TimedPose], gt: &[TimedPose]) -> Result<MetricConsistency, EvalError> {
    let (pairs, _) = associate(est, gt);
    let e: Vec<_> = pairs.iter().map(|p| p.1).collect();
    let g: Vec<_> = pairs.iter().map(|p| p.2).collect();
    let scale = similarity_scale(&e, &g)?;
    let t_last = pairs.last().map(|p| p.0).ok_or(EvalError::TooFew(0))?;
    let rotation_at = |poses: &[TimedPose]| {
        poses
            .iter()
            .min_by(|a, b| (a.timestamp - t_last).abs().total_cmp(&(b.timestamp - t_last).abs()))
            .map(|p| p.pose.rotation)
            .ok_or(EvalError::TooFew(0))
    };
    Ok(MetricConsistency {
        scale,
        gravity_angle: gravity_angle(&rotation_at(est)?, &rotation_at(gt)?),
    })
}
