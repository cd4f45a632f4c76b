use crate::EvalError;
use nalgebra::{Matrix3, Vector3};
use rsvio_core::lie::{Pose3, Rot3};

/// Point sets whose second principal extent is below this (relative to the
/// first, or absolutely) cannot fix a rotation.
const DEGENERACY_TOLERANCE: f64 = 1e-9;

fn centroid(points: &[Vector3<f64>]) -> Vector3<f64> {
    points.iter().sum::<Vector3<f64>>() / points.len() as f64
}

fn spread(points: &[Vector3<f64>], c: &Vector3<f64>) -> nalgebra::Vector3<f64> {
    let cov: Matrix3<f64> = points.iter().map(|p| (p - c) * (p - c).transpose()).sum();
    let mut s = cov.symmetric_eigenvalues();
    s.as_mut_slice().sort_by(|a, b| b.total_cmp(a));
    s.map(|v| v.max(0.0).sqrt())
}

fn check_spread(points: &[Vector3<f64>], c: &Vector3<f64>, which: &str) -> Result<(), EvalError> {
    let s = spread(points, c);
    if s[0] <= DEGENERACY_TOLERANCE || s[1] <= DEGENERACY_TOLERANCE * s[0].max(1.0) {
        return Err(EvalError::Degenerate(format!(
            "{which} positions are coincident or collinear"
        )));
    }
    Ok(())
}

/// The rigid transform `T` minimizing `sum |T est_i - gt_i|^2`.
pub fn align_se3(est: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<Pose3, EvalError> {
    if est.len() != gt.len() {
        return Err(EvalError::Mismatch(est.len(), gt.len()));
    }
    if est.len() < 3 {
        return Err(EvalError::TooFew(est.len()));
    }
    let ce = centroid(est);
    let cg = centroid(gt);
    check_spread(est, &ce, "estimated")?;
    check_spread(gt, &cg, "reference")?;
    let h: Matrix3<f64> = est.iter().zip(gt).map(|(e, g)| (e - ce) * (g - cg).transpose()).sum();
    let svd = h.svd(true, true);
    let u = svd.u.expect("requested");
    let v = svd.v_t.expect("requested").transpose();
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = Rot3::from_matrix_unchecked(v * d * u.transpose());
    let t = cg - r.rotate(&ce);
    Ok(Pose3::new(r, t))
}

/// Scale of the least-squares similarity transform mapping `est` onto `gt`.
/// A metrically correct estimate gives 1.
pub fn similarity_scale(est: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<f64, EvalError> {
    let t = align_se3(est, gt)?;
    let ce = centroid(est);
    let cg = centroid(gt);
    let num: f64 = est
        .iter()
        .zip(gt)
        .map(|(e, g)| t.rotation.rotate(&(e - ce)).dot(&(g - cg)))
        .sum();
    let den: f64 = est.iter().map(|e| (e - ce).norm_squared()).sum();
    Ok(num / den)
}

/// Angle in radians between the gravity directions seen in the body frames
/// of two attitudes `R_WI`, both worlds having gravity along -z.
pub fn gravity_angle(r_est: &Rot3, r_gt: &Rot3) -> f64 {
    let z = Vector3::z();
    let a = r_est.inverse().rotate(&z);
    let b = r_gt.inverse().rotate(&z);
    a.cross(&b).norm().atan2(a.dot(&b))
}
