//! SO(3) and SE(3) arithmetic.
//!
//! Rotations are unit quaternions kept in the canonical hemisphere `w >= 0`.
//! Twists are ordered `[rho; phi]`: translation part first, rotation part
//! second. All Jacobians are right Jacobians unless named otherwise, matching
//! the right-multiplicative retraction `P <- P * Exp(delta)` used by the
//! solver.

use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Matrix6, Quaternion, UnitQuaternion, Vector3, Vector6};

use crate::error::{Error, Result};

pub type Tangent3 = Vector3<f64>;
/// Twist `[rho (m); phi (rad)]`.
pub type Tangent6 = Vector6<f64>;

/// Below this angle the Taylor branches are used.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Series branch threshold for the SE(3) `Q` coefficients, whose closed
/// forms lose precision well above `SMALL_ANGLE`.
const Q_SERIES_ANGLE: f64 = 1e-2;

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

#[derive(Clone, Copy, PartialEq)]
pub struct Rotation(UnitQuaternion<f64>);

impl fmt::Debug for Rotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let q = self.0.quaternion();
        write!(f, "Rotation(w={}, x={}, y={}, z={})", q.w, q.i, q.j, q.k)
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Rotation(UnitQuaternion::identity())
    }

    fn canonical(q: Quaternion<f64>) -> Self {
        let q = if q.w < 0.0 { -q } else { q };
        Rotation(UnitQuaternion::from_quaternion(q))
    }

    /// Builds a rotation from quaternion coefficients, normalizing them.
    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        let q = Quaternion::new(w, x, y, z);
        let n = q.norm();
        if !n.is_finite() || n < 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "quaternion ({w}, {x}, {y}, {z}) cannot be normalized"
            )));
        }
        Ok(Self::canonical(q))
    }

    pub fn from_unit_quaternion(q: UnitQuaternion<f64>) -> Self {
        Self::canonical(*q.quaternion())
    }

    /// Projects an (approximately) orthonormal matrix onto SO(3).
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        let r = nalgebra::Rotation3::from_matrix_eps(m, 1e-15, 100, nalgebra::Rotation3::identity());
        Self::from_unit_quaternion(UnitQuaternion::from_rotation_matrix(&r))
    }

    pub fn quaternion(&self) -> &UnitQuaternion<f64> {
        &self.0
    }

    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.0.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        *self.0.to_rotation_matrix().matrix()
    }

    pub fn exp(omega: &Tangent3) -> Result<Self> {
        so3_exp(omega)
    }

    pub fn log(&self) -> Tangent3 {
        so3_log(self)
    }

    pub fn inverse(&self) -> Self {
        Self::canonical(*self.0.inverse().quaternion())
    }

    pub fn compose(&self, other: &Rotation) -> Self {
        Self::canonical(*(self.0 * other.0).quaternion())
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Geodesic angle to `other` in radians.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        self.inverse().compose(other).log().norm()
    }
}

impl Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        self.compose(&rhs)
    }
}

impl Mul<Vector3<f64>> for Rotation {
    type Output = Vector3<f64>;
    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.rotate(&rhs)
    }
}

/// Rigid transform mapping points of the body frame into the parent frame.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Pose::new(Rotation::identity(), Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Pose::new(Rotation::identity(), t)
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        se3_compose(self, other)
    }

    pub fn inverse(&self) -> Pose {
        se3_inverse(self)
    }

    /// `self^-1 * other`
    pub fn between(&self, other: &Pose) -> Pose {
        self.inverse().compose(other)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }

    pub fn exp(xi: &Tangent6) -> Result<Pose> {
        se3_exp(xi)
    }

    pub fn log(&self) -> Tangent6 {
        se3_log(self)
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Pose {
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into();
        Pose::new(Rotation::from_matrix(&r), m.fixed_view::<3, 1>(0, 3).into())
    }

    /// Adjoint for `[rho; phi]` twists: `Ad = [[R, [t]x R], [0, R]]`.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let r = self.rotation.matrix();
        let mut ad = Matrix6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&(skew(&self.translation) * r));
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        ad
    }
}

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

pub fn so3_exp(omega: &Tangent3) -> Result<Rotation> {
    if !omega.iter().all(|c| c.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "so3_exp of non-finite vector {omega:?}"
        )));
    }
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let (w, k) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 8.0, 0.5 - theta2 / 48.0)
    } else {
        let half = 0.5 * theta;
        (half.cos(), half.sin() / theta)
    };
    Ok(Rotation::canonical(Quaternion::new(
        w,
        k * omega.x,
        k * omega.y,
        k * omega.z,
    )))
}

pub fn so3_log(r: &Rotation) -> Tangent3 {
    let q = r.0.quaternion();
    let v = Vector3::new(q.i, q.j, q.k);
    let n = v.norm();
    // canonical form guarantees w >= 0, so the angle lies in [0, pi]
    let w = q.w;
    if n < SMALL_ANGLE {
        v * (2.0 / w) * (1.0 - n * n / (3.0 * w * w))
    } else {
        let theta = 2.0 * n.atan2(w);
        v * (theta / n)
    }
}

/// Coefficients `(a, b)` of `I + a W + b W^2` for the left Jacobian, with
/// `a = (1 - cos t) / t^2` and `b = (t - sin t) / t^3`.
fn jacobian_coefficients(theta: f64) -> (f64, f64) {
    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        let s = (0.5 * theta).sin();
        let t2 = theta * theta;
        (2.0 * s * s / t2, (theta - theta.sin()) / (t2 * theta))
    }
}

/// `1/t^2 - cot(t/2) / (2 t)`, the `W^2` coefficient of the inverse Jacobians.
fn inverse_jacobian_coefficient(theta: f64) -> f64 {
    if theta < SMALL_ANGLE {
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        let half = 0.5 * theta;
        1.0 / (theta * theta) - half.cos() / (half.sin() * 2.0 * theta)
    }
}

pub fn so3_right_jacobian(omega: &Tangent3) -> Matrix3<f64> {
    let (a, b) = jacobian_coefficients(omega.norm());
    let w = skew(omega);
    Matrix3::identity() - w * a + w * w * b
}

pub fn so3_left_jacobian(omega: &Tangent3) -> Matrix3<f64> {
    so3_right_jacobian(&-omega)
}

pub fn so3_right_jacobian_inv(omega: &Tangent3) -> Matrix3<f64> {
    let c = inverse_jacobian_coefficient(omega.norm());
    let w = skew(omega);
    Matrix3::identity() + w * 0.5 + w * w * c
}

pub fn so3_left_jacobian_inv(omega: &Tangent3) -> Matrix3<f64> {
    so3_right_jacobian_inv(&-omega)
}

pub fn se3_compose(a: &Pose, b: &Pose) -> Pose {
    Pose::new(
        a.rotation.compose(&b.rotation),
        a.rotation.rotate(&b.translation) + a.translation,
    )
}

pub fn se3_inverse(a: &Pose) -> Pose {
    let r_inv = a.rotation.inverse();
    Pose::new(r_inv, -r_inv.rotate(&a.translation))
}

pub fn se3_exp(xi: &Tangent6) -> Result<Pose> {
    let rho: Vector3<f64> = xi.fixed_rows::<3>(0).into();
    let phi: Vector3<f64> = xi.fixed_rows::<3>(3).into();
    if !rho.iter().all(|c| c.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "se3_exp of non-finite twist {xi:?}"
        )));
    }
    let r = so3_exp(&phi)?;
    Ok(Pose::new(r, so3_left_jacobian(&phi) * rho))
}

pub fn se3_log(a: &Pose) -> Tangent6 {
    let phi = so3_log(&a.rotation);
    let rho = so3_left_jacobian_inv(&phi) * a.translation;
    let mut xi = Tangent6::zeros();
    xi.fixed_rows_mut::<3>(0).copy_from(&rho);
    xi.fixed_rows_mut::<3>(3).copy_from(&phi);
    xi
}

/// The coupling block `Q(rho, phi)` of the SE(3) left Jacobian.
fn se3_q(rho: &Vector3<f64>, phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let t2 = theta * theta;
    let (c1, c2, c3) = if theta < Q_SERIES_ANGLE {
        let t4 = t2 * t2;
        (
            1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0,
            1.0 / 24.0 - t2 / 720.0 + t4 / 40320.0,
            1.0 / 120.0 - t2 / 2520.0 + t4 / 120960.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        let t4 = t2 * t2;
        (
            (theta - s) / (t2 * theta),
            (t2 + 2.0 * c - 2.0) / (2.0 * t4),
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t4 * theta),
        )
    };
    let p = skew(phi);
    let r = skew(rho);
    let pr = p * r;
    let rp = r * p;
    let prp = pr * p;
    r * 0.5 + (pr + rp + prp) * c1 + (p * pr + rp * p - prp * 3.0) * c2
        + (prp * p + p * prp) * c3
}

fn split(xi: &Tangent6) -> (Vector3<f64>, Vector3<f64>) {
    (xi.fixed_rows::<3>(0).into(), xi.fixed_rows::<3>(3).into())
}

pub fn se3_left_jacobian(xi: &Tangent6) -> Matrix6<f64> {
    let (rho, phi) = split(xi);
    let jl = so3_left_jacobian(&phi);
    let mut j = Matrix6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&jl);
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&se3_q(&rho, &phi));
    j.fixed_view_mut::<3, 3>(3, 3).copy_from(&jl);
    j
}

pub fn se3_left_jacobian_inv(xi: &Tangent6) -> Matrix6<f64> {
    let (rho, phi) = split(xi);
    let jl_inv = so3_left_jacobian_inv(&phi);
    let mut j = Matrix6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&jl_inv);
    j.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(-jl_inv * se3_q(&rho, &phi) * jl_inv));
    j.fixed_view_mut::<3, 3>(3, 3).copy_from(&jl_inv);
    j
}

/// `J_r` with `Log(Exp(xi)^-1 Exp(xi + d)) ~= J_r(xi) d`.
pub fn se3_right_jacobian(xi: &Tangent6) -> Matrix6<f64> {
    se3_left_jacobian(&-xi)
}

pub fn se3_right_jacobian_inv(xi: &Tangent6) -> Matrix6<f64> {
    se3_left_jacobian_inv(&-xi)
}
