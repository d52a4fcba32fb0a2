//! Navigation state and its tangent-space layout.
//!
//! Tangent ordering, shared by the smoother and the ESKF:
//!
//! ```text
//!  [0..3]   rotation ξ_θ   (rad, body frame, right perturbation)
//!  [3..6]   translation ξ_ρ (m, body frame; p ← p + R·J_l(ξ_θ)·ξ_ρ)
//!  [6..9]   velocity       (m/s, navigation frame, additive)
//!  [9..12]  accel bias     (m/s²)
//!  [12..15] gyro bias      (rad/s)
//!  [15]     baro bias      (m, only when estimated)
//! ```

use nalgebra::{DVector, Vector3};

use crate::lie::{right_jacobian_inv, so3_log, Mat3, Pose, Rotation, Twist, Vec3};

pub const ROT: usize = 0;
pub const POS: usize = 3;
pub const VEL: usize = 6;
pub const BIAS_ACC: usize = 9;
pub const BIAS_GYR: usize = 12;
pub const BARO: usize = 15;

/// Tangent dimension without / with barometer bias.
pub const BASE_DIM: usize = 15;
pub const BARO_DIM: usize = 16;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ImuBias {
    pub accel: Vec3,
    pub gyro: Vec3,
}

impl ImuBias {
    pub fn new(accel: Vec3, gyro: Vec3) -> Self {
        Self { accel, gyro }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn is_finite(&self) -> bool {
        self.accel.iter().chain(self.gyro.iter()).all(|v| v.is_finite())
    }
}

/// Pose (body to navigation), velocity, IMU biases and optional barometer bias.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NavState {
    pub pose: Pose,
    pub velocity: Vec3,
    pub bias: ImuBias,
    pub baro_bias: Option<f64>,
    pub timestamp: f64,
}

impl Default for NavState {
    fn default() -> Self {
        Self {
            pose: Pose::identity(),
            velocity: Vec3::zeros(),
            bias: ImuBias::zero(),
            baro_bias: None,
            timestamp: 0.0,
        }
    }
}

impl NavState {
    pub fn new(pose: Pose, velocity: Vec3, bias: ImuBias, timestamp: f64) -> Self {
        Self {
            pose,
            velocity,
            bias,
            baro_bias: None,
            timestamp,
        }
    }

    pub fn with_baro_bias(mut self, b: f64) -> Self {
        self.baro_bias = Some(b);
        self
    }

    pub fn rotation(&self) -> &Rotation {
        &self.pose.rotation
    }

    pub fn position(&self) -> &Vec3 {
        &self.pose.translation
    }

    /// 15 or 16 depending on whether a barometer bias is carried.
    pub fn tangent_dim(&self) -> usize {
        if self.baro_bias.is_some() {
            BARO_DIM
        } else {
            BASE_DIM
        }
    }

    pub fn is_finite(&self) -> bool {
        self.pose.rotation.matrix().iter().all(|v| v.is_finite())
            && self.pose.translation.iter().all(|v| v.is_finite())
            && self.velocity.iter().all(|v| v.is_finite())
            && self.bias.is_finite()
            && self.baro_bias.is_none_or(f64::is_finite)
    }

    /// On-manifold update. `delta` must have at least 15 entries; entry 15 is
    /// applied to the baro bias when present.
    pub fn retract(&self, delta: &[f64]) -> NavState {
        let seg = |i: usize| Vector3::new(delta[i], delta[i + 1], delta[i + 2]);
        let pose = self.pose.retract(&Twist::new(seg(ROT), seg(POS)));
        let mut out = NavState {
            pose,
            velocity: self.velocity + seg(VEL),
            bias: ImuBias::new(self.bias.accel + seg(BIAS_ACC), self.bias.gyro + seg(BIAS_GYR)),
            baro_bias: self.baro_bias,
            timestamp: self.timestamp,
        };
        if let (Some(b), true) = (out.baro_bias.as_mut(), delta.len() > BARO) {
            *b += delta[BARO];
        }
        out
    }

    /// Local coordinates of `other` around `self`, together with the Jacobian
    /// of those coordinates with respect to a right perturbation of `other`
    /// (evaluated at zero perturbation).
    ///
    /// Rotation: `Log(R_selfᵀ R_other)`, translation: `R_selfᵀ (p_other − p_self)`,
    /// everything else additive.
    pub fn local(&self, other: &NavState, dim: usize) -> (DVector<f64>, Vec<Mat3>) {
        let r0 = self.pose.rotation;
        let dr = so3_log(&(r0.transpose() * other.pose.rotation));
        let dp = r0.transpose().matrix() * (other.pose.translation - self.pose.translation);
        let mut v = DVector::zeros(dim);
        v.fixed_rows_mut::<3>(ROT).copy_from(&dr);
        v.fixed_rows_mut::<3>(POS).copy_from(&dp);
        v.fixed_rows_mut::<3>(VEL)
            .copy_from(&(other.velocity - self.velocity));
        v.fixed_rows_mut::<3>(BIAS_ACC)
            .copy_from(&(other.bias.accel - self.bias.accel));
        v.fixed_rows_mut::<3>(BIAS_GYR)
            .copy_from(&(other.bias.gyro - self.bias.gyro));
        if dim > BARO {
            v[BARO] = other.baro_bias.unwrap_or(0.0) - self.baro_bias.unwrap_or(0.0);
        }
        let d_rot = right_jacobian_inv(&dr);
        let d_pos = r0.transpose().matrix() * other.pose.rotation.matrix();
        (v, vec![d_rot, d_pos])
    }
}
