//! On-manifold IMU preintegration between two keyframes.
//!
//! Within one sample interval the bias-corrected angular rate and specific
//! force are held constant. Rotation is integrated exactly; velocity and
//! position use the midpoint attitude of the interval:
//!
//! ```text
//! ΔR ← ΔR · Exp(ω̃ dt)
//! Δv ← Δv + ΔR·Exp(ω̃ dt/2)·f̃ dt
//! Δp ← Δp + Δv dt + ½ ΔR·Exp(ω̃ dt/2)·f̃ dt²
//! ```
//!
//! Each sample is turned into a one-step delta and appended with the same
//! group composition used by [`PreintegratedImu::append`], so integrating a
//! stream in one or several pieces gives the same result.
//!
//! Error blocks are ordered (rotation, velocity, position) throughout; the
//! bias Jacobian columns are (accel, gyro).

use nalgebra::{SMatrix, SVector};
use thiserror::Error;

use crate::lie::{right_jacobian, right_jacobian_inv, skew, so3_exp, so3_log, Mat3, Rotation, Vec3};
use crate::state::{ImuBias, NavState};

pub type Mat9 = SMatrix<f64, 9, 9>;
pub type Mat96 = SMatrix<f64, 9, 6>;
pub type Vec9 = SVector<f64, 9>;

#[derive(Debug, Error, PartialEq)]
pub enum ImuError {
    #[error("non-positive integration interval dt = {0}")]
    NonPositiveDt(f64),
    #[error("non-finite IMU sample at t = {0}")]
    NonFinite(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuSample {
    pub timestamp: f64,
    /// m/s², body frame
    pub specific_force: Vec3,
    /// rad/s, body frame
    pub angular_rate: Vec3,
}

impl ImuSample {
    pub fn new(timestamp: f64, specific_force: Vec3, angular_rate: Vec3) -> Self {
        Self {
            timestamp,
            specific_force,
            angular_rate,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.timestamp.is_finite()
            && self.specific_force.iter().all(|v| v.is_finite())
            && self.angular_rate.iter().all(|v| v.is_finite())
    }
}

/// Gravity vector in the navigation frame (NED by default).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GravityModel {
    pub vector: Vec3,
}

impl Default for GravityModel {
    fn default() -> Self {
        Self {
            vector: Vec3::new(0.0, 0.0, 9.81),
        }
    }
}

/// Continuous-time white-noise densities of the IMU.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuNoise {
    /// m/s²/√Hz
    pub accel_density: f64,
    /// rad/s/√Hz
    pub gyro_density: f64,
}

impl Default for ImuNoise {
    fn default() -> Self {
        Self {
            accel_density: 2e-3,
            gyro_density: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreintegratedImu {
    pub delta_rotation: Rotation,
    pub delta_velocity: Vec3,
    pub delta_position: Vec3,
    pub delta_time: f64,
    /// 9×9, ordered (rotation, velocity, position).
    pub covariance: Mat9,
    /// ∂(δθ, Δv, Δp)/∂(b_a, b_g) at the linearization bias.
    pub bias_jacobian: Mat96,
    pub linearization_bias: ImuBias,
    pub noise: ImuNoise,
}

/// Residual of the preintegration factor and its Jacobians.
///
/// The residual is "prediction minus measurement" and vanishes when
/// `state_j == preint.predict(state_i)`.
#[derive(Clone, Debug)]
pub struct ImuResidual {
    pub residual: Vec9,
    /// w.r.t. (ξ_θ, ξ_ρ) of pose i
    pub d_pose_i: SMatrix<f64, 9, 6>,
    pub d_vel_i: SMatrix<f64, 9, 3>,
    pub d_pose_j: SMatrix<f64, 9, 6>,
    pub d_vel_j: SMatrix<f64, 9, 3>,
    /// w.r.t. (b_a, b_g) of state i
    pub d_bias_i: Mat96,
}

impl PreintegratedImu {
    pub fn new(bias: ImuBias, noise: ImuNoise) -> Self {
        Self {
            delta_rotation: Rotation::identity(),
            delta_velocity: Vec3::zeros(),
            delta_position: Vec3::zeros(),
            delta_time: 0.0,
            covariance: Mat9::zeros(),
            bias_jacobian: Mat96::zeros(),
            linearization_bias: bias,
            noise,
        }
    }

    /// Zeroes the deltas and restarts with `bias` as the linearization point.
    pub fn reset_with_bias(&mut self, bias: ImuBias) {
        *self = Self::new(bias, self.noise);
    }

    /// One-sample delta for a bias-corrected input held over `dt`.
    fn single_step(&self, sample: &ImuSample, dt: f64) -> PreintegratedImu {
        let omega = sample.angular_rate - self.linearization_bias.gyro;
        let force = sample.specific_force - self.linearization_bias.accel;

        let phi = omega * dt;
        let half = phi * 0.5;
        let mid = so3_exp(&half);
        let mid_m = *mid.matrix();
        let dv = mid_m * force * dt;

        let mut jac = Mat96::zeros();
        // rotation w.r.t. gyro bias
        jac.fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&(-right_jacobian(&phi) * dt));
        // velocity
        let dv_dbg = mid_m * skew(&force) * right_jacobian(&half) * (0.5 * dt * dt);
        jac.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-mid_m * dt));
        jac.fixed_view_mut::<3, 3>(3, 3).copy_from(&dv_dbg);
        // position
        jac.fixed_view_mut::<3, 3>(6, 0)
            .copy_from(&(-mid_m * (0.5 * dt * dt)));
        jac.fixed_view_mut::<3, 3>(6, 3).copy_from(&(dv_dbg * (0.5 * dt)));

        let mut q = SMatrix::<f64, 6, 6>::zeros();
        let qa = self.noise.accel_density.powi(2) / dt;
        let qg = self.noise.gyro_density.powi(2) / dt;
        for i in 0..3 {
            q[(i, i)] = qa;
            q[(i + 3, i + 3)] = qg;
        }

        PreintegratedImu {
            delta_rotation: so3_exp(&phi),
            delta_velocity: dv,
            delta_position: dv * (0.5 * dt),
            delta_time: dt,
            covariance: jac * q * jac.transpose(),
            bias_jacobian: jac,
            linearization_bias: self.linearization_bias,
            noise: self.noise,
        }
    }

    /// Integrates one sample held constant over `dt`.
    pub fn integrate(&mut self, sample: &ImuSample, dt: f64) -> Result<(), ImuError> {
        if !(dt > 0.0) {
            return Err(ImuError::NonPositiveDt(dt));
        }
        if !sample.is_finite() || !dt.is_finite() {
            return Err(ImuError::NonFinite(sample.timestamp));
        }
        let step = self.single_step(sample, dt);
        *self = self.append(&step);
        Ok(())
    }

    /// Composes `self` (earlier) with `later`. Both must share the
    /// linearization bias.
    pub fn append(&self, later: &PreintegratedImu) -> PreintegratedImu {
        let ra = *self.delta_rotation.matrix();
        let rb_t = later.delta_rotation.matrix().transpose();
        let dt_b = later.delta_time;

        // error-state transition of the earlier block
        let mut f = Mat9::identity();
        f.fixed_view_mut::<3, 3>(0, 0).copy_from(&rb_t);
        f.fixed_view_mut::<3, 3>(3, 0)
            .copy_from(&(-ra * skew(&later.delta_velocity)));
        f.fixed_view_mut::<3, 3>(6, 0)
            .copy_from(&(-ra * skew(&later.delta_position)));
        f.fixed_view_mut::<3, 3>(6, 3)
            .copy_from(&(Mat3::identity() * dt_b));
        // maps the later block's errors
        let mut g = Mat9::zeros();
        g.fixed_view_mut::<3, 3>(0, 0).copy_from(&Mat3::identity());
        g.fixed_view_mut::<3, 3>(3, 3).copy_from(&ra);
        g.fixed_view_mut::<3, 3>(6, 6).copy_from(&ra);

        let cov = f * self.covariance * f.transpose() + g * later.covariance * g.transpose();
        let cov = (cov + cov.transpose()) * 0.5;

        PreintegratedImu {
            delta_rotation: self.delta_rotation * later.delta_rotation,
            delta_velocity: self.delta_velocity + ra * later.delta_velocity,
            delta_position: self.delta_position
                + self.delta_velocity * dt_b
                + ra * later.delta_position,
            delta_time: self.delta_time + dt_b,
            covariance: cov,
            bias_jacobian: f * self.bias_jacobian + g * later.bias_jacobian,
            linearization_bias: self.linearization_bias,
            noise: self.noise,
        }
    }

    fn bias_delta(&self, bias: &ImuBias) -> SVector<f64, 6> {
        let da = bias.accel - self.linearization_bias.accel;
        let dg = bias.gyro - self.linearization_bias.gyro;
        SVector::<f64, 6>::new(da.x, da.y, da.z, dg.x, dg.y, dg.z)
    }

    /// Deltas corrected to first order for a different bias.
    pub fn corrected(&self, bias: &ImuBias) -> (Rotation, Vec3, Vec3) {
        let db = self.bias_delta(bias);
        let j = &self.bias_jacobian;
        let dtheta: Vec3 = j.fixed_view::<3, 6>(0, 0) * db;
        (
            self.delta_rotation * so3_exp(&dtheta),
            self.delta_velocity + j.fixed_view::<3, 6>(3, 0) * db,
            self.delta_position + j.fixed_view::<3, 6>(6, 0) * db,
        )
    }

    /// Propagates `state` across the preintegration interval using the
    /// state's own bias (first-order corrected).
    pub fn predict(&self, state: &NavState, gravity: &GravityModel) -> NavState {
        let (dr, dv, dp) = self.corrected(&state.bias);
        let g = gravity.vector;
        let dt = self.delta_time;
        let r = state.pose.rotation;
        let mut out = *state;
        out.pose.rotation = r * dr;
        out.velocity = state.velocity + g * dt + r.matrix() * dv;
        out.pose.translation =
            state.pose.translation + state.velocity * dt + g * (0.5 * dt * dt) + r.matrix() * dp;
        out.timestamp = state.timestamp + dt;
        out
    }

    pub fn residual_and_jacobians(
        &self,
        state_i: &NavState,
        state_j: &NavState,
        gravity: &GravityModel,
    ) -> ImuResidual {
        let db = self.bias_delta(&state_i.bias);
        let jb = &self.bias_jacobian;
        let jtheta = jb.fixed_view::<3, 6>(0, 0).into_owned();
        let theta_corr: Vec3 = jtheta * db;
        let (dr, dv, dp) = self.corrected(&state_i.bias);

        let g = gravity.vector;
        let dt = self.delta_time;
        let ri = *state_i.pose.rotation.matrix();
        let rj = *state_j.pose.rotation.matrix();
        let ri_t = ri.transpose();

        let rel = state_i.pose.rotation.transpose() * state_j.pose.rotation;
        let r_rot = so3_log(&(dr.transpose() * rel));
        let v_term = ri_t * (state_j.velocity - state_i.velocity - g * dt);
        let p_term = ri_t
            * (state_j.pose.translation
                - state_i.pose.translation
                - state_i.velocity * dt
                - g * (0.5 * dt * dt));

        let mut residual = Vec9::zeros();
        residual.fixed_rows_mut::<3>(0).copy_from(&r_rot);
        residual.fixed_rows_mut::<3>(3).copy_from(&(v_term - dv));
        residual.fixed_rows_mut::<3>(6).copy_from(&(p_term - dp));

        let jr_inv = right_jacobian_inv(&r_rot);

        let mut d_pose_i = SMatrix::<f64, 9, 6>::zeros();
        d_pose_i
            .fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&(-jr_inv * rj.transpose() * ri));
        d_pose_i.fixed_view_mut::<3, 3>(3, 0).copy_from(&skew(&v_term));
        d_pose_i.fixed_view_mut::<3, 3>(6, 0).copy_from(&skew(&p_term));
        d_pose_i
            .fixed_view_mut::<3, 3>(6, 3)
            .copy_from(&(-Mat3::identity()));

        let mut d_pose_j = SMatrix::<f64, 9, 6>::zeros();
        d_pose_j.fixed_view_mut::<3, 3>(0, 0).copy_from(&jr_inv);
        d_pose_j.fixed_view_mut::<3, 3>(6, 3).copy_from(&(ri_t * rj));

        let mut d_vel_i = SMatrix::<f64, 9, 3>::zeros();
        d_vel_i.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-ri_t));
        d_vel_i.fixed_view_mut::<3, 3>(6, 0).copy_from(&(-ri_t * dt));

        let mut d_vel_j = SMatrix::<f64, 9, 3>::zeros();
        d_vel_j.fixed_view_mut::<3, 3>(3, 0).copy_from(&ri_t);

        let mut d_bias_i = Mat96::zeros();
        let exp_r_t = so3_exp(&r_rot).matrix().transpose();
        d_bias_i
            .fixed_view_mut::<3, 6>(0, 0)
            .copy_from(&(-jr_inv * exp_r_t * right_jacobian(&theta_corr) * jtheta));
        d_bias_i
            .fixed_view_mut::<3, 6>(3, 0)
            .copy_from(&(-jb.fixed_view::<3, 6>(3, 0)));
        d_bias_i
            .fixed_view_mut::<3, 6>(6, 0)
            .copy_from(&(-jb.fixed_view::<3, 6>(6, 0)));

        ImuResidual {
            residual,
            d_pose_i,
            d_vel_i,
            d_pose_j,
            d_vel_j,
            d_bias_i,
        }
    }
}
