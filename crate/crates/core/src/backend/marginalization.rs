//! Schur-complement marginalization and the marginalization priors kept by
//! the sliding window.
//!
//! Linear systems follow the convention `E(x0 + dx) ~ E0 + 2 b.dx + dx.H dx`,
//! so the Gauss-Newton step solves `H dx = -b`.

use crate::lie::Rot3;
use crate::state::{KeyframeState, ScaleGravity};
use nalgebra::{DMatrix, DVector, Vector3};

/// Outcome of eliminating a block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SchurReport {
    /// Number of eliminated directions that were (numerically) unconstrained.
    pub rank_deficiency: usize,
    /// True when Cholesky failed and the pseudo-inverse was used.
    pub used_pseudo_inverse: bool,
}

/// Symmetric (pseudo-)inverse of a small dense block. The rank decision is
/// made on the Jacobi-scaled matrix, so blocks whose variables live on very
/// different scales (per-row twists next to velocities) keep their weakly
/// constrained directions.
pub fn symmetric_inverse(m: &DMatrix<f64>) -> (DMatrix<f64>, SchurReport) {
    let n = m.nrows();
    if n == 0 {
        return (DMatrix::zeros(0, 0), SchurReport::default());
    }
    let sym = (m + m.transpose()) * 0.5;
    if let Some(ch) = sym.clone().cholesky() {
        let inv = ch.inverse();
        if inv.iter().all(|v| v.is_finite()) {
            return (inv, SchurReport::default());
        }
    }
    let d = jacobi_scale(&sym);
    let scaled = DMatrix::from_fn(n, n, |r, c| sym[(r, c)] / (d[r] * d[c]));
    let eig = scaled.symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let tol = max * n as f64 * f64::EPSILON * 1e3;
    let mut deficiency = 0;
    let mut inv_vals = DVector::zeros(n);
    for (k, &v) in eig.eigenvalues.iter().enumerate() {
        if v > tol {
            inv_vals[k] = 1.0 / v;
        } else {
            deficiency += 1;
        }
    }
    let q = &eig.eigenvectors;
    let inv = q * DMatrix::from_diagonal(&inv_vals) * q.transpose();
    let inv = DMatrix::from_fn(n, n, |r, c| inv[(r, c)] / (d[r] * d[c]));
    (
        inv,
        SchurReport {
            rank_deficiency: deficiency,
            used_pseudo_inverse: true,
        },
    )
}

/// Square roots of the positive diagonal entries (one where the diagonal is
/// not positive).
fn jacobi_scale(h: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(h.nrows(), |i, _| {
        let v = h[(i, i)];
        if v > 0.0 {
            v.sqrt()
        } else {
            1.0
        }
    })
}

/// Eliminates the variables `marg` from `(h, b)`, returning the system over
/// `keep` (in the given order).
pub fn schur_complement(
    h: &DMatrix<f64>,
    b: &DVector<f64>,
    keep: &[usize],
    marg: &[usize],
) -> (DMatrix<f64>, DVector<f64>, SchurReport) {
    let hkk = h.select_rows(keep).select_columns(keep);
    let bk = b.select_rows(keep);
    if marg.is_empty() {
        return (hkk, bk, SchurReport::default());
    }
    let hkm = h.select_rows(keep).select_columns(marg);
    let hmm = h.select_rows(marg).select_columns(marg);
    let bm = b.select_rows(marg);
    let (hmm_inv, report) = symmetric_inverse(&hmm);
    let tmp = &hkm * &hmm_inv;
    let mut hr = hkk - &tmp * hkm.transpose();
    hr = (&hr + hr.transpose()) * 0.5;
    let br = bk - tmp * bm;
    (hr, br, report)
}

/// Relative eigenvalue (after Jacobi scaling) below which a prior direction is
/// treated as unconstrained.
const PRIOR_NULL_TOLERANCE: f64 = 1e-10;

/// Makes a prior `(h, b)` exactly positive semidefinite with `b` in the range
/// of `h`. Without this, round-off in directions the prior does not constrain
/// leaves a linear term with no curvature and the prior energy is unbounded
/// below. The eigen-decomposition is taken on the Jacobi-scaled matrix since
/// photometric and inertial blocks differ by many orders of magnitude.
pub fn condition_prior(h: &DMatrix<f64>, b: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let n = h.nrows();
    if n == 0 {
        return (h.clone(), b.clone());
    }
    let d = jacobi_scale(h);
    let scaled = DMatrix::from_fn(n, n, |r, c| 0.5 * (h[(r, c)] + h[(c, r)]) / (d[r] * d[c]));
    let bs = b.component_div(&d);
    let eig = scaled.symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(*v));
    let tol = PRIOR_NULL_TOLERANCE * max.max(1.0);
    let q = &eig.eigenvectors;
    let mut hs = DMatrix::zeros(n, n);
    let mut bp = DVector::zeros(n);
    for (k, &v) in eig.eigenvalues.iter().enumerate() {
        if v <= tol {
            continue;
        }
        let col = q.column(k);
        hs.ger(v, &col, &col, 1.0);
        bp.axpy(col.dot(&bs), &col, 1.0);
    }
    let hr = DMatrix::from_fn(n, n, |r, c| hs[(r, c)] * d[r] * d[c]);
    (hr, bp.component_mul(&d))
}

/// Size of the scale/gravity block: log-scale and two tilt angles.
pub const GLOBAL_DIM: usize = 3;
/// Size of a keyframe block: pose 6, twist 6, velocity 3, bias 6, affine 2.
pub const KF_DIM: usize = 23;

pub mod kf {
    pub const POSE: usize = 0;
    pub const TWIST: usize = 6;
    pub const VEL: usize = 12;
    pub const BIAS_ACC: usize = 15;
    pub const BIAS_GYRO: usize = 18;
    pub const AFFINE: usize = 21;
}

/// Difference `x (-) x0` of a keyframe block in the solver's tangent space.
pub fn keyframe_difference(x: &KeyframeState, x0: &KeyframeState) -> DVector<f64> {
    let mut d = DVector::zeros(KF_DIM);
    let dp = x.pose.boxminus_left(&x0.pose);
    d.rows_mut(kf::POSE, 6).copy_from(&dp);
    d.rows_mut(kf::TWIST, 6).copy_from(&(x.twist - x0.twist));
    d.rows_mut(kf::VEL, 3).copy_from(&(x.velocity - x0.velocity));
    d.rows_mut(kf::BIAS_ACC, 3).copy_from(&(x.bias.acc - x0.bias.acc));
    d.rows_mut(kf::BIAS_GYRO, 3).copy_from(&(x.bias.gyro - x0.bias.gyro));
    d[kf::AFFINE] = x.affine.a - x0.affine.a;
    d[kf::AFFINE + 1] = x.affine.b - x0.affine.b;
    d
}

pub fn global_difference(x: &ScaleGravity, x0: &ScaleGravity) -> Vector3<f64> {
    let dr = (*x.rotation() * x0.rotation().inverse()).log();
    Vector3::new((x.scale() / x0.scale()).ln(), dr.x, dr.y)
}

/// Applies a tangent-space step to the scale/gravity variable.
pub fn global_retract(x: &ScaleGravity, d: &Vector3<f64>) -> ScaleGravity {
    ScaleGravity::new(
        x.scale() * d[0].exp(),
        (Rot3::exp(&Vector3::new(d[1], d[2], 0.0)) * *x.rotation()).renormalized(),
    )
}

/// Marginalization prior over the global block followed by the window's
/// keyframe blocks, in window order.
#[derive(Clone, Debug)]
pub struct MargPrior {
    pub h: DMatrix<f64>,
    pub b: DVector<f64>,
    /// Linearization point of the global block, once it is constrained.
    pub global_lin: Option<ScaleGravity>,
    /// Linearization point per keyframe, once it is constrained.
    pub kf_lin: Vec<Option<KeyframeState>>,
}

impl Default for MargPrior {
    fn default() -> Self {
        Self::new(0)
    }
}

impl MargPrior {
    pub fn new(num_keyframes: usize) -> Self {
        let n = GLOBAL_DIM + KF_DIM * num_keyframes;
        Self {
            h: DMatrix::zeros(n, n),
            b: DVector::zeros(n),
            global_lin: None,
            kf_lin: vec![None; num_keyframes],
        }
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn num_keyframes(&self) -> usize {
        self.kf_lin.len()
    }

    pub fn is_empty(&self) -> bool {
        self.global_lin.is_none() && self.kf_lin.iter().all(|l| l.is_none())
    }

    /// Appends an unconstrained keyframe block.
    pub fn push_keyframe(&mut self) {
        let n = self.dim();
        let m = n + KF_DIM;
        let mut h = DMatrix::zeros(m, m);
        h.view_mut((0, 0), (n, n)).copy_from(&self.h);
        let mut b = DVector::zeros(m);
        b.rows_mut(0, n).copy_from(&self.b);
        self.h = h;
        self.b = b;
        self.kf_lin.push(None);
    }

    /// `x (-) x0` for every block; unconstrained blocks contribute zero.
    pub fn delta(&self, sg: &ScaleGravity, kfs: &[KeyframeState]) -> DVector<f64> {
        assert_eq!(kfs.len(), self.num_keyframes());
        let mut d = DVector::zeros(self.dim());
        if let Some(g0) = &self.global_lin {
            d.rows_mut(0, GLOBAL_DIM).copy_from(&global_difference(sg, g0));
        }
        for (i, (x, x0)) in kfs.iter().zip(&self.kf_lin).enumerate() {
            if let Some(x0) = x0 {
                d.rows_mut(GLOBAL_DIM + KF_DIM * i, KF_DIM)
                    .copy_from(&keyframe_difference(x, x0));
            }
        }
        d
    }

    /// Prior energy at the given state, relative to its value at the linearization point.
    pub fn energy(&self, sg: &ScaleGravity, kfs: &[KeyframeState]) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let d = self.delta(sg, kfs);
        2.0 * self.b.dot(&d) + d.dot(&(&self.h * &d))
    }

    /// Hessian and gradient of the prior at the given state.
    pub fn linearize(&self, sg: &ScaleGravity, kfs: &[KeyframeState]) -> (DMatrix<f64>, DVector<f64>) {
        let d = self.delta(sg, kfs);
        (self.h.clone(), &self.b + &self.h * d)
    }

    /// Adds factors linearized at the current state and then eliminates the
    /// keyframe at `index`. `free` lists which of that keyframe's dimensions
    /// are actual variables; the others are dropped without elimination.
    pub fn absorb_and_marginalize(
        &mut self,
        factor_h: &DMatrix<f64>,
        factor_b: &DVector<f64>,
        sg: &ScaleGravity,
        kfs: &[KeyframeState],
        index: usize,
        free: &[bool; KF_DIM],
    ) -> SchurReport {
        assert_eq!(factor_h.nrows(), self.dim());
        // Blocks touched for the first time are linearized here.
        let touched = |h: &DMatrix<f64>, start: usize, len: usize| h.rows(start, len).iter().any(|v| *v != 0.0);
        if self.global_lin.is_none() && touched(factor_h, 0, GLOBAL_DIM) {
            self.global_lin = Some(*sg);
        }
        for (i, kf) in kfs.iter().enumerate() {
            if self.kf_lin[i].is_none() && touched(factor_h, GLOBAL_DIM + KF_DIM * i, KF_DIM) {
                self.kf_lin[i] = Some(*kf);
            }
        }
        // Express the new factors around this prior's linearization point.
        let shift = self.delta(sg, kfs);
        let h = &self.h + factor_h;
        let b = &self.b + factor_b - factor_h * shift;

        let start = GLOBAL_DIM + KF_DIM * index;
        let keep: Vec<usize> = (0..self.dim()).filter(|&i| i < start || i >= start + KF_DIM).collect();
        let marg: Vec<usize> = (0..KF_DIM).filter(|&k| free[k]).map(|k| start + k).collect();
        let (hr, br, report) = schur_complement(&h, &b, &keep, &marg);
        if report.used_pseudo_inverse {
            log::debug!(
                "marginalized keyframe block is singular (rank deficiency {}); used pseudo-inverse",
                report.rank_deficiency
            );
        }
        let (hr, br) = condition_prior(&hr, &br);
        self.h = hr;
        self.b = br;
        self.kf_lin.remove(index);
        report
    }
}

/// The three priors maintained for scale re-linearization: one built from
/// visual factors only, the primary prior used in optimization, and a
/// secondary prior that has seen only inertial factors marginalized since the
/// last switch.
#[derive(Clone, Debug, Default)]
pub struct DualPriors {
    pub visual: MargPrior,
    pub primary: MargPrior,
    pub secondary: MargPrior,
    pub switches: usize,
}

/// Factor set handed to [`DualPriors::marginalize`].
pub struct MarginalizedFactors<'a> {
    pub visual_h: &'a DMatrix<f64>,
    pub visual_b: &'a DVector<f64>,
    pub inertial_h: &'a DMatrix<f64>,
    pub inertial_b: &'a DVector<f64>,
}

impl DualPriors {
    pub fn push_keyframe(&mut self) {
        self.visual.push_keyframe();
        self.primary.push_keyframe();
        self.secondary.push_keyframe();
    }

    pub fn marginalize(
        &mut self,
        factors: &MarginalizedFactors<'_>,
        sg: &ScaleGravity,
        kfs: &[KeyframeState],
        index: usize,
        free: &[bool; KF_DIM],
    ) -> SchurReport {
        let all_h = factors.visual_h + factors.inertial_h;
        let all_b = factors.visual_b + factors.inertial_b;
        self.visual
            .absorb_and_marginalize(factors.visual_h, factors.visual_b, sg, kfs, index, free);
        self.secondary
            .absorb_and_marginalize(&all_h, &all_b, sg, kfs, index, free);
        self.primary
            .absorb_and_marginalize(&all_h, &all_b, sg, kfs, index, free)
    }

    /// Log-ratio between the current scale and the primary prior's linearization scale.
    pub fn scale_drift(&self, sg: &ScaleGravity) -> f64 {
        self.primary.global_lin.map_or(0.0, |g0| (sg.scale() / g0.scale()).ln())
    }

    /// Swaps in the secondary prior when the scale moved more than `threshold`
    /// (in log scale) from the primary's linearization point.
    pub fn maybe_switch(&mut self, sg: &ScaleGravity, threshold: f64) -> bool {
        if self.scale_drift(sg).abs() <= threshold {
            return false;
        }
        self.primary = std::mem::replace(&mut self.secondary, self.visual.clone());
        self.switches += 1;
        log::info!(
            "scale moved to {:.4}; switched to the secondary marginalization prior",
            sg.scale()
        );
        true
    }
}
