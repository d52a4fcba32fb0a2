//! Error-state Kalman filter over the same state and tangent ordering as the
//! smoother, used as the benchmark estimator.
//!
//! The nominal state is integrated with the same midpoint strapdown step the
//! preintegration uses; the error state is right-multiplicative on attitude
//! and body-frame on position so covariances are directly comparable with the
//! smoother's marginals. Outliers are handled only by the per-component
//! natural test.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::factors::{
    aoa_factor, baro_factor, gnss_compass_factor, gnss_position_factor, range_factor,
    CompassBaseline, Measurement, RadioFrameConfig, DEFAULT_GEOMETRY_FLOOR,
};
use crate::lie::{right_jacobian, skew, so3_exp, Mat3, Vec3};
use crate::preint::{GravityModel, ImuNoise, ImuSample};
use crate::robust::{natural_test, GateConfig};
use crate::smoother::BiasRandomWalk;
use crate::state::{NavState, BARO, BIAS_ACC, BIAS_GYR, POS, ROT, VEL};

#[derive(Debug, Error, PartialEq)]
pub enum EskfError {
    #[error("propagation interval must be positive, got {0} s")]
    NonPositiveDt(f64),
    #[error("non-finite IMU sample at t = {0}")]
    NonFinite(f64),
    #[error("covariance must be {0}x{0} symmetric positive semidefinite")]
    BadCovariance(usize),
    #[error("innovation covariance is not positive definite; update skipped")]
    NotPositiveDefinite,
    #[error("measurement has {rows} rows but Jacobian/noise disagree")]
    DimensionMismatch { rows: usize },
}

#[derive(Clone, Debug)]
pub struct EskfConfig {
    pub gravity: GravityModel,
    pub noise: ImuNoise,
    pub bias_walk: BiasRandomWalk,
    /// Natural test on the radio aiding (AoA, range, barometer); `None`
    /// disables gating.
    pub gate: Option<GateConfig>,
    pub radio: RadioFrameConfig,
    pub compass_baseline: CompassBaseline,
    pub geometry_floor: f64,
}

impl Default for EskfConfig {
    fn default() -> Self {
        Self {
            gravity: GravityModel::default(),
            noise: ImuNoise::default(),
            bias_walk: BiasRandomWalk::default(),
            gate: Some(GateConfig::default()),
            radio: RadioFrameConfig::default(),
            compass_baseline: CompassBaseline(Vec3::x()),
            geometry_floor: DEFAULT_GEOMETRY_FLOOR,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EskfState {
    pub nominal: NavState,
    pub covariance: DMatrix<f64>,
}

/// What an update did with each measurement component.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateOutcome {
    /// Per-component gate decisions (all `true` when gating is off).
    pub accepted: Vec<bool>,
    /// `false` when the measurement was unusable at the current state.
    pub usable: bool,
}

impl UpdateOutcome {
    pub fn rejected_count(&self) -> usize {
        self.accepted.iter().filter(|a| !**a).count()
    }
}

/// Midpoint strapdown step with the state's own bias, identical to one
/// preintegration step followed by prediction.
pub fn strapdown(state: &NavState, sample: &ImuSample, dt: f64, gravity: &GravityModel) -> NavState {
    let omega = sample.angular_rate - state.bias.gyro;
    let force = sample.specific_force - state.bias.accel;
    let phi = omega * dt;
    let mid = so3_exp(&(phi * 0.5));
    let r = *state.rotation().matrix();
    let dv = r * (mid.matrix() * force * dt);
    let g = gravity.vector;
    let mut out = *state;
    out.pose.rotation = state.pose.rotation * so3_exp(&phi);
    out.velocity = state.velocity + g * dt + dv;
    out.pose.translation = state.pose.translation + state.velocity * dt + g * (0.5 * dt * dt) + dv * (0.5 * dt);
    out.timestamp = state.timestamp + dt;
    out
}

fn put(m: &mut DMatrix<f64>, r: usize, c: usize, b: &Mat3) {
    m.view_mut((r, c), (3, 3)).copy_from(b);
}

/// Error-state transition `F` and noise input `G` (columns: accel, gyro) for
/// one strapdown step from `state`.
pub fn transition(state: &NavState, sample: &ImuSample, dt: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let dim = state.tangent_dim();
    let omega = sample.angular_rate - state.bias.gyro;
    let force = sample.specific_force - state.bias.accel;
    let phi = omega * dt;
    let gamma = *so3_exp(&phi).matrix();
    let mid = *so3_exp(&(phi * 0.5)).matrix();
    let r = *state.rotation().matrix();
    let r_next_t = (r * gamma).transpose();
    let a = mid * force * dt;

    let dth_dbg = -right_jacobian(&phi) * dt;
    let dv_dth = -r * skew(&a);
    let dv_dba = -r * mid * dt;
    let dv_dbg = r * mid * skew(&force) * right_jacobian(&(phi * 0.5)) * (0.5 * dt * dt);

    let mut f = DMatrix::identity(dim, dim);
    put(&mut f, ROT, ROT, &gamma.transpose());
    put(&mut f, ROT, BIAS_GYR, &dth_dbg);
    put(&mut f, VEL, ROT, &dv_dth);
    put(&mut f, VEL, BIAS_ACC, &dv_dba);
    put(&mut f, VEL, BIAS_GYR, &dv_dbg);
    // position error is body-frame at the start and end of the step
    put(&mut f, POS, POS, &gamma.transpose());
    put(&mut f, POS, VEL, &(r_next_t * dt));
    put(&mut f, POS, ROT, &(r_next_t * dv_dth * (0.5 * dt)));
    put(&mut f, POS, BIAS_ACC, &(r_next_t * dv_dba * (0.5 * dt)));
    put(&mut f, POS, BIAS_GYR, &(r_next_t * dv_dbg * (0.5 * dt)));

    // measurement noise enters exactly like the bias
    let mut g = DMatrix::zeros(dim, 6);
    g.view_mut((0, 0), (dim, 3)).copy_from(&f.columns(BIAS_ACC, 3));
    g.view_mut((0, 3), (dim, 3)).copy_from(&f.columns(BIAS_GYR, 3));
    // the bias rows of those columns are the bias identity, not noise paths
    g.rows_mut(BIAS_ACC, 6).fill(0.0);
    (f, g)
}

#[derive(Clone, Debug)]
pub struct Eskf {
    config: EskfConfig,
    state: EskfState,
}

impl Eskf {
    pub fn new(config: EskfConfig, nominal: NavState, covariance: DMatrix<f64>) -> Result<Self, EskfError> {
        let dim = nominal.tangent_dim();
        let sym = (&covariance - covariance.transpose()).amax();
        if covariance.nrows() != dim || covariance.ncols() != dim || sym > 1e-9 * (1.0 + covariance.amax()) {
            return Err(EskfError::BadCovariance(dim));
        }
        if covariance.clone().symmetric_eigen().eigenvalues.min() < -1e-12 * (1.0 + covariance.amax()) {
            return Err(EskfError::BadCovariance(dim));
        }
        Ok(Self {
            config,
            state: EskfState { nominal, covariance },
        })
    }

    pub fn config(&self) -> &EskfConfig {
        &self.config
    }

    pub fn state(&self) -> &EskfState {
        &self.state
    }

    pub fn nominal(&self) -> &NavState {
        &self.state.nominal
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.state.covariance
    }

    pub fn propagate(&mut self, sample: &ImuSample, dt: f64) -> Result<(), EskfError> {
        if !(dt > 0.0) {
            return Err(EskfError::NonPositiveDt(dt));
        }
        if !sample.is_finite() || !dt.is_finite() {
            return Err(EskfError::NonFinite(sample.timestamp));
        }
        let nominal = &self.state.nominal;
        let (f, g) = transition(nominal, sample, dt);
        let mut q = DMatrix::zeros(6, 6);
        let qa = self.config.noise.accel_density.powi(2) / dt;
        let qg = self.config.noise.gyro_density.powi(2) / dt;
        for i in 0..3 {
            q[(i, i)] = qa;
            q[(i + 3, i + 3)] = qg;
        }
        let mut p = &f * &self.state.covariance * f.transpose() + &g * q * g.transpose();
        let walk = &self.config.bias_walk;
        for i in 0..3 {
            p[(BIAS_ACC + i, BIAS_ACC + i)] += walk.accel.powi(2) * dt;
            p[(BIAS_GYR + i, BIAS_GYR + i)] += walk.gyro.powi(2) * dt;
        }
        if p.nrows() > BARO {
            p[(BARO, BARO)] += walk.baro.powi(2) * dt;
        }
        self.state.covariance = (&p + p.transpose()) * 0.5;
        self.state.nominal = strapdown(nominal, sample, dt, &self.config.gravity);
        Ok(())
    }

    /// Kalman update with innovation `z − h`, Jacobian `∂h/∂ξ` and noise
    /// covariance. Components failing the natural test are dropped.
    pub fn update(
        &mut self,
        innovation: &DVector<f64>,
        h: &DMatrix<f64>,
        noise: &DMatrix<f64>,
    ) -> Result<UpdateOutcome, EskfError> {
        self.update_gated(innovation, h, noise, true)
    }

    fn update_gated(
        &mut self,
        innovation: &DVector<f64>,
        h: &DMatrix<f64>,
        noise: &DMatrix<f64>,
        gated: bool,
    ) -> Result<UpdateOutcome, EskfError> {
        let m = innovation.len();
        let dim = self.state.covariance.nrows();
        if h.nrows() != m || h.ncols() != dim || noise.nrows() != m || noise.ncols() != m {
            return Err(EskfError::DimensionMismatch { rows: m });
        }
        let p = &self.state.covariance;
        let s = h * p * h.transpose() + noise;
        let gate = self.config.gate.filter(|_| gated);
        let accepted = match &gate {
            Some(gate) => natural_test(innovation, &s, gate).map_err(|_| EskfError::NotPositiveDefinite)?,
            None => {
                if s.clone().cholesky().is_none() {
                    return Err(EskfError::NotPositiveDefinite);
                }
                vec![true; m]
            }
        };
        let rows: Vec<usize> = (0..m).filter(|&i| accepted[i]).collect();
        if !rows.is_empty() {
            let nu = innovation.select_rows(&rows);
            let ha = h.select_rows(&rows);
            let ra = noise.select_rows(&rows).select_columns(&rows);
            let sa = s.select_rows(&rows).select_columns(&rows);
            let chol = sa.cholesky().ok_or(EskfError::NotPositiveDefinite)?;
            // K = P Hᵀ S⁻¹
            let k = chol.solve(&(&ha * p)).transpose();
            let dx = &k * nu;
            let i_kh = DMatrix::identity(dim, dim) - &k * &ha;
            let joseph = &i_kh * p * i_kh.transpose() + &k * ra * k.transpose();
            self.state.covariance = (&joseph + joseph.transpose()) * 0.5;
            self.state.nominal = self.state.nominal.retract(dx.as_slice());
        }
        Ok(UpdateOutcome {
            accepted,
            usable: true,
        })
    }

    /// Builds the innovation for an aiding measurement at the current nominal
    /// state and updates with it. Unusable geometry leaves the state alone.
    pub fn update_measurement(&mut self, measurement: &Measurement) -> Result<UpdateOutcome, EskfError> {
        let s = self.state.nominal;
        let dim = s.tangent_dim();
        let cfg = &self.config;
        let embed = |h_pose: &[f64], rows: usize| {
            let mut h = DMatrix::zeros(rows, dim);
            for c in 0..6 {
                for r in 0..rows {
                    h[(r, ROT + c)] = h_pose[c * rows + r];
                }
            }
            h
        };
        let (nu, h, noise) = match measurement {
            Measurement::Gnss(z) => {
                let inn = gnss_position_factor(&s, &z.position);
                (
                    DVector::from_column_slice(inn.residual.as_slice()),
                    embed(inn.h_pose.as_slice(), 3),
                    DMatrix::from_column_slice(3, 3, z.covariance.as_slice()),
                )
            }
            Measurement::Compass(z) => {
                let inn = gnss_compass_factor(&s, &z.vector, &cfg.compass_baseline);
                (
                    DVector::from_column_slice(inn.residual.as_slice()),
                    embed(inn.h_pose.as_slice(), 3),
                    DMatrix::from_column_slice(3, 3, z.covariance.as_slice()),
                )
            }
            Measurement::Aoa(z) => match aoa_factor(&s, z, &cfg.radio, cfg.geometry_floor) {
                Ok(inn) => (
                    DVector::from_column_slice(inn.residual.as_slice()),
                    embed(inn.h_pose.as_slice(), 2),
                    DMatrix::from_column_slice(2, 2, z.noise_cov.as_slice()),
                ),
                Err(_) => return Ok(UpdateOutcome::default()),
            },
            Measurement::Range(z) => match range_factor(&s, z, &cfg.radio, cfg.geometry_floor) {
                Ok(inn) => (
                    DVector::from_column_slice(inn.residual.as_slice()),
                    embed(inn.h_pose.as_slice(), 1),
                    DMatrix::from_element(1, 1, z.variance),
                ),
                Err(_) => return Ok(UpdateOutcome::default()),
            },
            Measurement::Baro(z) => match baro_factor(&s, s.baro_bias.unwrap_or(0.0), z) {
                Ok(inn) => {
                    let mut h = embed(inn.h_pose.as_slice(), 1);
                    if dim > BARO {
                        h[(0, BARO)] = inn.h_bias;
                    }
                    (
                        DVector::from_element(1, inn.residual),
                        h,
                        DMatrix::from_element(1, 1, z.variance),
                    )
                }
                Err(_) => return Ok(UpdateOutcome::default()),
            },
        };
        // like the smoother's kernels, the gate guards the radio aiding only
        let radio = matches!(measurement, Measurement::Aoa(_) | Measurement::Range(_) | Measurement::Baro(_));
        self.update_gated(&nu, &h, &noise, radio)
    }

    /// Marginal position covariance in the navigation frame.
    pub fn position_covariance(&self) -> Mat3 {
        let r = *self.state.nominal.rotation().matrix();
        let b: Mat3 = self.state.covariance.fixed_view::<3, 3>(POS, POS).into_owned();
        r * b * r.transpose()
    }
}
