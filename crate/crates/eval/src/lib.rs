//! Trajectory evaluation.
//!
//! Estimated keyframe positions are associated with reference poses by
//! nearest timestamp, rigidly aligned (rotation and translation only, so
//! scale errors remain visible) and summarized as the RMS position error.

mod aggregate;
mod align;
mod plots;
mod report;

pub use aggregate::{aggregate_runs, median, RunOutcome, SequenceSummary, Summary};
pub use align::{align_se3, gravity_angle, similarity_scale};
pub use plots::{emit_plots, grid_svg, trajectory_svg, ERRORS_CSV, GRID_CSV, GRID_SVG, REPORTS_CSV};
pub use report::{
    associate, ate, metric_consistency, path_length, EvalReport, KeyframeError, MetricConsistency, RunMetadata,
    ASSOCIATION_WINDOW,
};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("need at least 3 associated poses, found {0}")]
    TooFew(usize),
    #[error("{0} estimated positions but {1} reference positions")]
    Mismatch(usize, usize),
    #[error("degenerate alignment: {0}")]
    Degenerate(String),
}
