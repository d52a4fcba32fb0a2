//! SO(3) / SE(3) matrix Lie groups.
//!
//! Rotations are stored as orthonormal 3×3 matrices. Tangent vectors are
//! ordered `(rotation, translation)` and perturbations are applied on the
//! right: `T ⊕ ξ = T · Exp(ξ)`.

use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Vector3};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Below this angle the Rodrigues coefficients switch to Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-6;

/// Orthonormality defect above which a composed rotation is projected back
/// onto SO(3).
pub const REORTHONORMALIZE_TOL: f64 = 1e-9;

/// The hat operator: `skew(v) * w == v.cross(w)`.
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`skew`] applied to the antisymmetric part of `m`.
pub fn vee(m: &Mat3) -> Vec3 {
    Vec3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// Element of SO(3).
#[derive(Clone, Copy, PartialEq)]
pub struct Rotation(Mat3);

impl fmt::Debug for Rotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (r, p, y) = self.to_euler();
        write!(f, "Rotation(rpy = [{r:.6}, {p:.6}, {y:.6}] rad)")
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Self(Mat3::identity())
    }

    /// Wraps a matrix, projecting it onto SO(3) if it is not already
    /// orthonormal within [`REORTHONORMALIZE_TOL`].
    pub fn from_matrix(m: Mat3) -> Self {
        let r = Self(m);
        if r.orthonormality_defect() > REORTHONORMALIZE_TOL {
            r.projected()
        } else {
            r
        }
    }

    /// Wraps a matrix the caller knows to be a rotation.
    pub fn from_matrix_unchecked(m: Mat3) -> Self {
        Self(m)
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn inverse(&self) -> Self {
        self.transpose()
    }

    pub fn act(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    pub fn exp(omega: &Vec3) -> Self {
        so3_exp(omega)
    }

    pub fn log(&self) -> Vec3 {
        so3_log(self)
    }

    /// `max(‖R Rᵀ − I‖_F, |det R − 1|)`.
    pub fn orthonormality_defect(&self) -> f64 {
        let ortho = (self.0 * self.0.transpose() - Mat3::identity()).norm();
        ortho.max((self.0.determinant() - 1.0).abs())
    }

    /// Nearest rotation in the Frobenius sense (polar decomposition).
    pub fn projected(&self) -> Self {
        let svd = self.0.svd(true, true);
        let u = svd.u.expect("svd u");
        let v_t = svd.v_t.expect("svd v_t");
        let mut d = Mat3::identity();
        if (u * v_t).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        Self(u * d * v_t)
    }

    /// Z-Y-X (yaw, pitch, roll) Euler angles; maps body to navigation frame.
    pub fn from_euler(roll: f64, pitch: f64, yaw: f64) -> Self {
        let (sr, cr) = roll.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let (sy, cy) = yaw.sin_cos();
        Self(Mat3::new(
            cy * cp,
            cy * sp * sr - sy * cr,
            cy * sp * cr + sy * sr,
            sy * cp,
            sy * sp * sr + cy * cr,
            sy * sp * cr - cy * sr,
            -sp,
            cp * sr,
            cp * cr,
        ))
    }

    /// Returns `(roll, pitch, yaw)` in radians.
    pub fn to_euler(&self) -> (f64, f64, f64) {
        let m = &self.0;
        let pitch = (-m[(2, 0)]).clamp(-1.0, 1.0).asin();
        let roll = m[(2, 1)].atan2(m[(2, 2)]);
        let yaw = m[(1, 0)].atan2(m[(0, 0)]);
        (roll, pitch, yaw)
    }
}

impl Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation::from_matrix(self.0 * rhs.0)
    }
}

impl Mul<&Rotation> for &Rotation {
    type Output = Rotation;
    fn mul(self, rhs: &Rotation) -> Rotation {
        Rotation::from_matrix(self.0 * rhs.0)
    }
}

impl Mul<Vec3> for Rotation {
    type Output = Vec3;
    fn mul(self, rhs: Vec3) -> Vec3 {
        self.0 * rhs
    }
}

/// `1 − cos θ` without cancellation for small θ.
fn one_minus_cos(theta: f64) -> f64 {
    let s = (0.5 * theta).sin();
    2.0 * s * s
}

/// Rodrigues' formula.
pub fn so3_exp(omega: &Vec3) -> Rotation {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(omega);
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, one_minus_cos(theta) / theta2)
    };
    Rotation(Mat3::identity() + k * a + k * k * b)
}

/// Rotation vector with angle in `[0, π]`.
pub fn so3_log(r: &Rotation) -> Vec3 {
    let m = r.matrix();
    let cos_theta = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let axis_sin = vee(m); // sin(θ)·axis
    let sin_theta = axis_sin.norm();
    let theta = sin_theta.atan2(cos_theta);

    if theta < SMALL_ANGLE {
        return axis_sin * (1.0 + theta * theta / 6.0);
    }
    if theta < std::f64::consts::PI - 1e-3 {
        return axis_sin * (theta / sin_theta);
    }

    // Near π the antisymmetric part vanishes; recover the axis from the
    // symmetric part (1 − cos θ)·a·aᵀ and take the sign from vee(R).
    let sym = (m + m.transpose()) * 0.5 - Mat3::identity() * cos_theta;
    let one_minus_cos = 1.0 - cos_theta;
    let (mut best, mut best_val) = (0, sym[(0, 0)]);
    for i in 1..3 {
        if sym[(i, i)] > best_val {
            best = i;
            best_val = sym[(i, i)];
        }
    }
    let mut axis: Vec3 = sym.column(best).into_owned() / (best_val * one_minus_cos).sqrt();
    axis /= axis.norm();
    if axis.dot(&axis_sin) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

/// Right Jacobian of SO(3): `Exp(φ + δ) ≈ Exp(φ) Exp(J_r(φ) δ)`.
pub fn right_jacobian(phi: &Vec3) -> Mat3 {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(phi);
    let (a, b) = if theta < SMALL_ANGLE {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        (
            one_minus_cos(theta) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Mat3::identity() - k * a + k * k * b
}

pub fn right_jacobian_inv(phi: &Vec3) -> Mat3 {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(phi);
    let b = if theta < SMALL_ANGLE {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Mat3::identity() + k * 0.5 + k * k * b
}

pub fn left_jacobian(phi: &Vec3) -> Mat3 {
    right_jacobian(&-phi)
}

pub fn left_jacobian_inv(phi: &Vec3) -> Mat3 {
    right_jacobian_inv(&-phi)
}

/// se(3) element, ordered `(rotation, translation)`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Twist {
    pub rot: Vec3,
    pub trans: Vec3,
}

impl Twist {
    pub fn new(rot: Vec3, trans: Vec3) -> Self {
        Self { rot, trans }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    /// The 4×4 matrix `ξ^∧`.
    pub fn hat(&self) -> Matrix4<f64> {
        let mut m = Matrix4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&self.rot));
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.trans);
        m
    }
}

/// Element of SE(3).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vec3,
}

impl Pose {
    pub fn new(rotation: Rotation, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt.matrix() * self.translation),
        }
    }

    pub fn act(&self, p: &Vec3) -> Vec3 {
        self.rotation.matrix() * p + self.translation
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn exp(xi: &Twist) -> Self {
        se3_exp(xi)
    }

    pub fn log(&self) -> Twist {
        se3_log(self)
    }

    /// `self · Exp(xi)`.
    pub fn retract(&self, xi: &Twist) -> Self {
        *self * se3_exp(xi)
    }
}

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        Pose {
            rotation: self.rotation * rhs.rotation,
            translation: self.rotation.matrix() * rhs.translation + self.translation,
        }
    }
}

pub fn se3_exp(xi: &Twist) -> Pose {
    Pose {
        rotation: so3_exp(&xi.rot),
        translation: left_jacobian(&xi.rot) * xi.trans,
    }
}

pub fn se3_log(pose: &Pose) -> Twist {
    let rot = so3_log(&pose.rotation);
    Twist {
        rot,
        trans: left_jacobian_inv(&rot) * pose.translation,
    }
}
