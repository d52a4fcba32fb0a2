//! Aiding measurement models with analytic Jacobians.
//!
//! Every model returns the innovation `z − h(x̂)` together with `∂h/∂ξ`, the
//! Jacobian of the prediction with respect to the right SE(3) perturbation
//! `(ξ_θ, ξ_ρ)` of the body pose. To first order the position responds to
//! `ξ_ρ` as `p̂ + R̂ ξ_ρ`, which is where the `R̂` blocks below come from.

use nalgebra::{Matrix2, RowVector3, SMatrix, SVector};
use thiserror::Error;

use crate::lie::{skew, Mat3, Rotation, Vec3};
use crate::state::NavState;

/// Minimum horizontal range (AoA) or total range (range factor), metres.
pub const DEFAULT_GEOMETRY_FLOOR: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum FactorError {
    #[error("degenerate geometry: {0}")]
    Unusable(&'static str),
    #[error("pressure must be positive, got {0} kPa")]
    NonPositivePressure(f64),
}

/// Wraps an angle to `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let mut w = a.rem_euclid(TAU);
    if w > PI {
        w -= TAU;
    }
    w
}

/// Default 1σ noise levels of the aiding sensors.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct MeasurementNoise {
    /// m, per axis
    pub rtk_position: f64,
    /// deg, direction error of the compass baseline
    pub compass_deg: f64,
    /// deg, per axis
    pub aoa_deg: f64,
    /// m
    pub range: f64,
    /// m, derived altitude
    pub baro_altitude: f64,
}

impl Default for MeasurementNoise {
    fn default() -> Self {
        Self {
            rtk_position: 0.02,
            compass_deg: 1.0,
            aoa_deg: 3.0,
            range: 0.5,
            baro_altitude: 0.5,
        }
    }
}

/// Orientation and origin of the phased-array radio frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadioFrameConfig {
    /// R_r^n, radio to navigation
    pub rotation: Rotation,
    /// l^n_PARS, navigation frame
    pub lever_arm: Vec3,
}

impl Default for RadioFrameConfig {
    fn default() -> Self {
        Self {
            rotation: Rotation::identity(),
            lever_arm: Vec3::zeros(),
        }
    }
}

/// Body-frame baseline between the two GNSS antennas.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompassBaseline(pub Vec3);

impl CompassBaseline {
    /// Rejects a zero baseline.
    pub fn new(l: Vec3) -> Option<Self> {
        (l.norm() > 0.0).then_some(Self(l))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GnssPosition {
    pub timestamp: f64,
    pub position: Vec3,
    pub covariance: Mat3,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompassMeasurement {
    pub timestamp: f64,
    /// Baseline vector resolved in the navigation frame.
    pub vector: Vec3,
    pub covariance: Mat3,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AoaMeasurement {
    pub timestamp: f64,
    /// Ψ, radians in (−π, π]
    pub azimuth: f64,
    /// α, radians in [−π/2, π/2]
    pub elevation: f64,
    pub noise_cov: Matrix2<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RangeMeasurement {
    pub timestamp: f64,
    pub range: f64,
    pub variance: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaroMeasurement {
    pub timestamp: f64,
    /// kPa
    pub pressure: f64,
    /// variance of the derived altitude, m²
    pub variance: f64,
}

/// Any aiding measurement an estimator can consume.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Measurement {
    Gnss(GnssPosition),
    Compass(CompassMeasurement),
    Aoa(AoaMeasurement),
    Range(RangeMeasurement),
    Baro(BaroMeasurement),
}

impl Measurement {
    pub fn timestamp(&self) -> f64 {
        match self {
            Measurement::Gnss(m) => m.timestamp,
            Measurement::Compass(m) => m.timestamp,
            Measurement::Aoa(m) => m.timestamp,
            Measurement::Range(m) => m.timestamp,
            Measurement::Baro(m) => m.timestamp,
        }
    }
}

/// Innovation `z − h` and pose Jacobian `∂h/∂(ξ_θ, ξ_ρ)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Innovation<const M: usize> {
    pub residual: SVector<f64, M>,
    pub h_pose: SMatrix<f64, M, 6>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaroInnovation {
    pub residual: f64,
    pub h_pose: SMatrix<f64, 1, 6>,
    pub h_bias: f64,
}

fn pose_block<const M: usize>(rot: SMatrix<f64, M, 3>, trans: SMatrix<f64, M, 3>) -> SMatrix<f64, M, 6> {
    let mut h = SMatrix::<f64, M, 6>::zeros();
    h.fixed_view_mut::<M, 3>(0, 0).copy_from(&rot);
    h.fixed_view_mut::<M, 3>(0, 3).copy_from(&trans);
    h
}

/// GNSS position: `h = p̂`, `H = [0  R̂]`.
pub fn gnss_position_factor(state: &NavState, z: &Vec3) -> Innovation<3> {
    Innovation {
        residual: z - state.position(),
        h_pose: pose_block(Mat3::zeros(), *state.rotation().matrix()),
    }
}

/// GNSS compass: `h = R̂ l`, `H = [−R̂ ⌊l⌋  0]`.
pub fn gnss_compass_factor(state: &NavState, z: &Vec3, baseline: &CompassBaseline) -> Innovation<3> {
    let r = state.rotation().matrix();
    Innovation {
        residual: z - r * baseline.0,
        h_pose: pose_block(-r * skew(&baseline.0), Mat3::zeros()),
    }
}

/// `p̂^r = (R_r^n)ᵀ (p̂^n − l^n)`.
pub fn body_to_radio(state: &NavState, cfg: &RadioFrameConfig) -> Vec3 {
    nav_to_radio(state.position(), cfg)
}

pub fn nav_to_radio(p_nav: &Vec3, cfg: &RadioFrameConfig) -> Vec3 {
    cfg.rotation.matrix().transpose() * (p_nav - cfg.lever_arm)
}

pub fn radio_to_nav(p_radio: &Vec3, cfg: &RadioFrameConfig) -> Vec3 {
    cfg.rotation.matrix() * p_radio + cfg.lever_arm
}

/// `∂p̂^r/∂(ξ_θ, ξ_ρ) = [0  (R_r^n)ᵀ R̂]`.
fn radio_position_jacobian(state: &NavState, cfg: &RadioFrameConfig) -> SMatrix<f64, 3, 6> {
    pose_block(
        Mat3::zeros(),
        cfg.rotation.matrix().transpose() * state.rotation().matrix(),
    )
}

/// Azimuth and elevation of a radio-frame position.
pub fn aoa_of(p: &Vec3) -> (f64, f64) {
    let horizontal = p.x.hypot(p.y);
    (p.y.atan2(p.x), (-p.z).atan2(horizontal))
}

/// Spherical to Cartesian in the radio frame, inverse of (`aoa_of`, norm).
pub fn radio_position_from_spherical(azimuth: f64, elevation: f64, range: f64) -> Vec3 {
    let (sa, ca) = azimuth.sin_cos();
    let (se, ce) = elevation.sin_cos();
    Vec3::new(range * ce * ca, range * ce * sa, -range * se)
}

/// Azimuth/elevation factor. The azimuth innovation is wrapped to (−π, π].
pub fn aoa_factor(
    state: &NavState,
    z: &AoaMeasurement,
    cfg: &RadioFrameConfig,
    floor: f64,
) -> Result<Innovation<2>, FactorError> {
    let p = body_to_radio(state, cfg);
    let horiz2 = p.x * p.x + p.y * p.y;
    let horiz = horiz2.sqrt();
    if horiz < floor {
        return Err(FactorError::Unusable("horizontal range below floor"));
    }
    let (az, el) = aoa_of(&p);
    let norm2 = p.norm_squared();

    let d_az = RowVector3::new(-p.y, p.x, 0.0) / horiz2;
    let d_el = RowVector3::new(p.x * p.z / horiz, p.y * p.z / horiz, -horiz) / norm2;
    let mut d = SMatrix::<f64, 2, 3>::zeros();
    d.row_mut(0).copy_from(&d_az);
    d.row_mut(1).copy_from(&d_el);

    Ok(Innovation {
        residual: SVector::<f64, 2>::new(wrap_angle(z.azimuth - az), z.elevation - el),
        h_pose: d * radio_position_jacobian(state, cfg),
    })
}

/// Range from the radio-frame origin: `h = ‖p̂^r‖`, `H = p̂ᵀ/‖p̂‖ · H_p`.
pub fn range_factor(
    state: &NavState,
    z: &RangeMeasurement,
    cfg: &RadioFrameConfig,
    floor: f64,
) -> Result<Innovation<1>, FactorError> {
    let p = body_to_radio(state, cfg);
    let rho = p.norm();
    if rho < floor {
        return Err(FactorError::Unusable("range below floor"));
    }
    let unit = p.transpose() / rho;
    Ok(Innovation {
        residual: SVector::<f64, 1>::new(z.range - rho),
        h_pose: unit * radio_position_jacobian(state, cfg),
    })
}

const BARO_P0: f64 = 101.29;
const BARO_EXP: f64 = 5.256;
const BARO_T_SCALE: f64 = 288.08;
const BARO_T0: f64 = 288.14;
const BARO_LAPSE: f64 = -0.00649;

/// Standard-atmosphere altitude (m) from pressure (kPa).
pub fn pressure_to_altitude(p_kpa: f64) -> Result<f64, FactorError> {
    if !(p_kpa > 0.0) {
        return Err(FactorError::NonPositivePressure(p_kpa));
    }
    Ok(((p_kpa / BARO_P0).powf(1.0 / BARO_EXP) * BARO_T_SCALE - BARO_T0) / BARO_LAPSE)
}

/// Inverse of [`pressure_to_altitude`].
pub fn altitude_to_pressure(h: f64) -> f64 {
    BARO_P0 * ((BARO_LAPSE * h + BARO_T0) / BARO_T_SCALE).powf(BARO_EXP)
}

/// Barometric altitude: `h = −p̂_D + b̂_baro`.
///
/// The pose Jacobian is derived from this prediction: `∂h/∂ξ_ρ = −e₃ᵀ R̂`.
pub fn baro_factor(
    state: &NavState,
    baro_bias: f64,
    z: &BaroMeasurement,
) -> Result<BaroInnovation, FactorError> {
    let measured = pressure_to_altitude(z.pressure)?;
    let predicted = -state.position().z + baro_bias;
    let down = RowVector3::new(0.0, 0.0, -1.0) * state.rotation().matrix();
    Ok(BaroInnovation {
        residual: measured - predicted,
        h_pose: pose_block(SMatrix::<f64, 1, 3>::zeros(), down),
        h_bias: 1.0,
    })
}
