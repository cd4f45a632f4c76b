//! SO(3), SE(3) and the scale-plus-rotation group used for the metric/non-metric
//! world transform.
//!
//! Twists are 6-vectors ordered translation first, rotation last. Poses act on
//! points as `p_B = R p_A + t`, and the group exponential is the matrix
//! exponential of the hat-mapped twist.

use nalgebra::{Matrix3, Matrix4, Matrix6, UnitQuaternion, Vector3, Vector6};
use std::ops::Mul;

/// se(3) tangent vector: `[v_x, v_y, v_z, w_x, w_y, w_z]`.
pub type Twist6 = Vector6<f64>;

/// Below this rotation angle the Rodrigues coefficients switch to Taylor series.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Below this angle the SE(3) Jacobian coefficients use series expansions; the
/// closed forms lose absolute accuracy through cancellation well before
/// `SMALL_ANGLE`.
const JACOBIAN_SERIES_ANGLE: f64 = 1e-2;

/// Within this distance of pi the rotation axis is recovered from the symmetric part.
const NEAR_PI: f64 = 1e-4;

pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// 4x4 Lie-algebra matrix of a twist.
pub fn hat6(xi: &Twist6) -> Matrix4<f64> {
    let mut m = Matrix4::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&hat(&rotational(xi)));
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&translational(xi));
    m
}

pub fn vee6(m: &Matrix4<f64>) -> Twist6 {
    let w = vee(&m.fixed_view::<3, 3>(0, 0).into_owned());
    Vector6::new(m[(0, 3)], m[(1, 3)], m[(2, 3)], w.x, w.y, w.z)
}

pub fn translational(xi: &Twist6) -> Vector3<f64> {
    xi.fixed_rows::<3>(0).into_owned()
}

pub fn rotational(xi: &Twist6) -> Vector3<f64> {
    xi.fixed_rows::<3>(3).into_owned()
}

pub fn twist(v: &Vector3<f64>, w: &Vector3<f64>) -> Twist6 {
    Vector6::new(v.x, v.y, v.z, w.x, w.y, w.z)
}

/// `sin(t)/t`, `(1-cos t)/t^2`, `(t - sin t)/t^3`.
fn rodrigues_coefficients(theta: f64) -> (f64, f64, f64) {
    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (
            1.0 - t2 / 6.0 + t2 * t2 / 120.0,
            0.5 - t2 / 24.0 + t2 * t2 / 720.0,
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
        )
    } else {
        let half = (0.5 * theta).sin();
        (
            theta.sin() / theta,
            2.0 * half * half / (theta * theta),
            (theta - theta.sin()) / (theta * theta * theta),
        )
    }
}

/// Rotation matrix in SO(3).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rot3(Matrix3<f64>);

impl Default for Rot3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rot3 {
    pub fn identity() -> Self {
        Rot3(Matrix3::identity())
    }

    /// Wraps a matrix that is already orthonormal with determinant +1.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rot3(m)
    }

    /// Projects an approximately orthonormal matrix back onto SO(3).
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        let q = UnitQuaternion::from_matrix_eps(m, 1e-15, 100, UnitQuaternion::identity());
        Rot3(q.to_rotation_matrix().into_inner())
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>) -> Self {
        Rot3(q.to_rotation_matrix().into_inner())
    }

    pub fn to_quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_matrix_eps(&self.0, 1e-15, 100, UnitQuaternion::identity())
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        Self::exp(&(axis.normalize() * angle))
    }

    pub fn rx(angle: f64) -> Self {
        Self::exp(&Vector3::new(angle, 0.0, 0.0))
    }

    pub fn ry(angle: f64) -> Self {
        Self::exp(&Vector3::new(0.0, angle, 0.0))
    }

    pub fn rz(angle: f64) -> Self {
        Self::exp(&Vector3::new(0.0, 0.0, angle))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn exp(phi: &Vector3<f64>) -> Self {
        let theta = phi.norm();
        let (a, b, _) = rodrigues_coefficients(theta);
        let k = hat(phi);
        Rot3(Matrix3::identity() + a * k + b * k * k)
    }

    /// Rotation vector with norm in `[0, pi]`.
    ///
    /// At exactly pi the axis is taken from the column of `(R + I)/2` with the
    /// largest diagonal entry; the sign follows the antisymmetric part when it
    /// is resolvable and is otherwise left as extracted.
    pub fn log(&self) -> Vector3<f64> {
        let r = &self.0;
        let w = vee(&(r - r.transpose())) * 0.5;
        let s = w.norm();
        let c = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        let theta = s.atan2(c);
        if theta < SMALL_ANGLE {
            // theta/sin(theta) ~ 1 + theta^2/6
            return w * (1.0 + theta * theta / 6.0);
        }
        if std::f64::consts::PI - theta > NEAR_PI {
            return w * (theta / theta.sin());
        }
        let sym = (r + r.transpose()) * 0.5 - Matrix3::identity() * c;
        let mut k = 0;
        for i in 1..3 {
            if sym[(i, i)] > sym[(k, k)] {
                k = i;
            }
        }
        let mut axis: Vector3<f64> = sym.column(k).into_owned();
        axis /= axis.norm();
        if axis.dot(&w) < 0.0 {
            axis = -axis;
        }
        axis * theta
    }

    pub fn inverse(&self) -> Self {
        Rot3(self.0.transpose())
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    pub fn angle(&self) -> f64 {
        self.log().norm()
    }

    /// Re-orthonormalizes after long product chains.
    pub fn renormalized(&self) -> Self {
        Self::from_matrix(&self.0)
    }
}

impl Mul for Rot3 {
    type Output = Rot3;
    fn mul(self, rhs: Rot3) -> Rot3 {
        Rot3(self.0 * rhs.0)
    }
}

impl Mul<&Rot3> for &Rot3 {
    type Output = Rot3;
    fn mul(self, rhs: &Rot3) -> Rot3 {
        Rot3(self.0 * rhs.0)
    }
}

/// Rigid transform in SE(3).
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Pose3 {
    pub rotation: Rot3,
    pub translation: Vector3<f64>,
}

impl Pose3 {
    pub fn new(rotation: Rot3, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::new(Rot3::identity(), Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Rot3::identity(), t)
    }

    pub fn from_rotation(r: Rot3) -> Self {
        Self::new(r, Vector3::zeros())
    }

    pub fn exp(xi: &Twist6) -> Self {
        exp_se3(xi, 1.0)
    }

    pub fn log(&self) -> Twist6 {
        log_se3(self)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.inverse();
        Self::new(rt, -(rt.rotate(&self.translation)))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Self {
        Self::new(
            Rot3::from_matrix(&m.fixed_view::<3, 3>(0, 0).into_owned()),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }

    pub fn adjoint(&self) -> Matrix6<f64> {
        adjoint(self)
    }

    pub fn renormalized(&self) -> Self {
        Self::new(self.rotation.renormalized(), self.translation)
    }

    /// Left perturbation `exp(delta) * self`.
    pub fn boxplus_left(&self, delta: &Twist6) -> Self {
        (Pose3::exp(delta) * *self).renormalized()
    }

    /// Inverse of `boxplus_left`: `log(self * other^-1)`.
    pub fn boxminus_left(&self, other: &Pose3) -> Twist6 {
        (*self * other.inverse()).log()
    }
}

impl Mul for Pose3 {
    type Output = Pose3;
    fn mul(self, rhs: Pose3) -> Pose3 {
        Pose3::new(
            self.rotation * rhs.rotation,
            self.rotation.rotate(&rhs.translation) + self.translation,
        )
    }
}

/// `exp(hat(xi) * t)` in closed form.
pub fn exp_se3(xi: &Twist6, t: f64) -> Pose3 {
    let v = translational(xi) * t;
    let w = rotational(xi) * t;
    let theta = w.norm();
    let (a, b, c) = rodrigues_coefficients(theta);
    let k = hat(&w);
    let k2 = k * k;
    let r = Matrix3::identity() + a * k + b * k2;
    let vmat = Matrix3::identity() + b * k + c * k2;
    Pose3::new(Rot3::from_matrix_unchecked(r), vmat * v)
}

pub fn log_se3(pose: &Pose3) -> Twist6 {
    let w = pose.rotation.log();
    let theta = w.norm();
    let k = hat(&w);
    // V^-1 = I - K/2 + d K^2, d = (1 - (theta/2) cot(theta/2)) / theta^2
    let d = if theta < JACOBIAN_SERIES_ANGLE {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half * half.cos() / half.sin()) / (theta * theta)
    };
    let vinv = Matrix3::identity() - 0.5 * k + d * k * k;
    twist(&(vinv * pose.translation), &w)
}

/// Adjoint of a pose with translation-first twist ordering:
/// `[[R, hat(t) R], [0, R]]`.
pub fn adjoint(pose: &Pose3) -> Matrix6<f64> {
    let r = pose.rotation.matrix();
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(r);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&(hat(&pose.translation) * r));
    m
}

/// Left Jacobian of SO(3): `exp(phi + d) ~ exp(J_l(phi) d) exp(phi)`.
pub fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let (_, b, c) = rodrigues_coefficients(theta);
    let k = hat(phi);
    Matrix3::identity() + b * k + c * k * k
}

/// Right Jacobian of SO(3): `exp(phi + d) ~ exp(phi) exp(J_r(phi) d)`.
pub fn so3_right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    so3_left_jacobian(&-phi)
}

pub fn so3_right_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = hat(phi);
    let d = if theta < JACOBIAN_SERIES_ANGLE {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Matrix3::identity() + 0.5 * k + d * k * k
}

/// Left Jacobian of SE(3) for translation-first twists:
/// `exp(xi + d) ~ exp(J_l(xi) d) exp(xi)`.
pub fn se3_left_jacobian(xi: &Twist6) -> Matrix6<f64> {
    let rho = translational(xi);
    let phi = rotational(xi);
    let theta = phi.norm();
    let jl = so3_left_jacobian(&phi);
    let p = hat(&phi);
    let r = hat(&rho);
    let (c1, c2, c3) = if theta < JACOBIAN_SERIES_ANGLE {
        let t2 = theta * theta;
        (
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
            1.0 / 24.0 - t2 / 720.0 + t2 * t2 / 40320.0,
            1.0 / 120.0 - t2 / 2520.0 + t2 * t2 / 120960.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        let t2 = theta * theta;
        (
            (theta - s) / (t2 * theta),
            (t2 + 2.0 * c - 2.0) / (2.0 * t2 * t2),
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t2 * t2 * theta),
        )
    };
    let pr = p * r;
    let rp = r * p;
    let prp = pr * p;
    let pp = p * p;
    let q = 0.5 * r + c1 * (pr + rp + prp) + c2 * (pp * r + rp * p - 3.0 * prp) + c3 * (prp * p + pp * r * p);
    let mut j = Matrix6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&jl);
    j.fixed_view_mut::<3, 3>(3, 3).copy_from(&jl);
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&q);
    j
}

/// Positive scale times a rotation, acting on points as `s R p`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaledRot {
    pub scale: f64,
    pub rotation: Rot3,
}

impl Default for ScaledRot {
    fn default() -> Self {
        Self {
            scale: 1.0,
            rotation: Rot3::identity(),
        }
    }
}

impl ScaledRot {
    pub fn new(scale: f64, rotation: Rot3) -> Self {
        debug_assert!(scale > 0.0);
        Self { scale, rotation }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) * self.scale
    }

    pub fn inverse(&self) -> Self {
        Self::new(1.0 / self.scale, self.rotation.inverse())
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&(self.rotation.matrix() * self.scale));
        m
    }
}

pub fn apply_scaled_rot(s: &ScaledRot, p: &Vector3<f64>) -> Vector3<f64> {
    s.apply(p)
}
