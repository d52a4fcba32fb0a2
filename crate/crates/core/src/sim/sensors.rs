//! Sensor specifications and measurement synthesis.
//!
//! All streams come from one seeded generator consumed in a fixed order:
//! the whole IMU stream first, then RTK, compass, AoA, range and baro. Every
//! event draws the same number of variates whatever the enable flags are, so
//! changing a noise level never shifts the outlier pattern of a seed.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::factors::{
    altitude_to_pressure, aoa_of, nav_to_radio, wrap_angle, AoaMeasurement, BaroMeasurement,
    CompassBaseline, CompassMeasurement, GnssPosition, Measurement, RadioFrameConfig, RangeMeasurement,
};
use crate::lie::{so3_log, Mat3, Rotation, Vec3};
use crate::preint::{GravityModel, ImuNoise, ImuSample};

use super::trajectory::Trajectory;
use super::SimError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImuSpec {
    /// Hz
    pub rate: f64,
    /// m/s²/√Hz
    pub accel_noise_density: f64,
    /// rad/s/√Hz
    pub gyro_noise_density: f64,
    /// m/s², initial value
    pub accel_bias: [f64; 3],
    /// rad/s, initial value
    pub gyro_bias: [f64; 3],
    /// m/s²/√s
    pub accel_bias_walk: f64,
    /// rad/s/√s
    pub gyro_bias_walk: f64,
}

impl Default for ImuSpec {
    fn default() -> Self {
        Self {
            rate: 200.0,
            accel_noise_density: 2e-3,
            gyro_noise_density: 1e-4,
            accel_bias: [0.0; 3],
            gyro_bias: [0.0; 3],
            accel_bias_walk: 0.0,
            gyro_bias_walk: 0.0,
        }
    }
}

impl ImuSpec {
    /// Noise densities the estimators should assume.
    pub fn noise(&self) -> ImuNoise {
        ImuNoise {
            accel_density: self.accel_noise_density.max(1e-6),
            gyro_density: self.gyro_noise_density.max(1e-8),
        }
    }
}

/// With probability `probability` an event's noise is drawn with standard
/// deviation `kappa·σ` and shifted by `offset` (same unit as σ).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutlierModel {
    pub probability: f64,
    pub kappa: f64,
    pub offset: f64,
}

impl Default for OutlierModel {
    fn default() -> Self {
        Self {
            probability: 0.0,
            kappa: 20.0,
            offset: 0.0,
        }
    }
}

impl OutlierModel {
    fn validate(&self, field: &'static str) -> Result<(), SimError> {
        if !(0.0..1.0).contains(&self.probability) {
            return Err(SimError::Invalid(field, "outlier probability must lie in [0, 1)"));
        }
        if !(self.kappa > 0.0) {
            return Err(SimError::Invalid(field, "kappa must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AidingSpec {
    /// Hz
    pub rate: f64,
    /// 1σ in the sensor's unit (m or deg)
    pub sigma: f64,
    #[serde(default)]
    pub outliers: OutlierModel,
}

impl AidingSpec {
    pub fn new(rate: f64, sigma: f64) -> Self {
        Self {
            rate,
            sigma,
            outliers: OutlierModel::default(),
        }
    }
}

/// Range is produced at AoA epochs from the RTK-noised position; `sigma` is
/// what the estimators assume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeSpec {
    pub sigma: f64,
    #[serde(default)]
    pub outliers: OutlierModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaroSpec {
    pub rate: f64,
    /// m, derived altitude
    pub sigma: f64,
    /// m, initial bias of the derived altitude
    #[serde(default)]
    pub bias: f64,
    /// m/√s
    #[serde(default)]
    pub bias_walk: f64,
    #[serde(default)]
    pub outliers: OutlierModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RadioSpec {
    /// radio origin in NED, m
    pub lever_arm: [f64; 3],
    pub roll_deg: f64,
    pub pitch_deg: f64,
    pub yaw_deg: f64,
}

impl Default for RadioSpec {
    fn default() -> Self {
        Self {
            lever_arm: [0.0; 3],
            roll_deg: 0.0,
            pitch_deg: 0.0,
            yaw_deg: 0.0,
        }
    }
}

impl RadioSpec {
    pub fn frame(&self) -> RadioFrameConfig {
        RadioFrameConfig {
            rotation: Rotation::from_euler(
                self.roll_deg.to_radians(),
                self.pitch_deg.to_radians(),
                self.yaw_deg.to_radians(),
            ),
            lever_arm: Vec3::from(self.lever_arm),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorSuiteSpec {
    pub imu: ImuSpec,
    pub rtk: AidingSpec,
    /// `sigma` in degrees
    pub compass: AidingSpec,
    /// body frame, m
    pub compass_baseline: [f64; 3],
    /// `sigma` in degrees, applied to azimuth and elevation
    pub aoa: AidingSpec,
    pub range: RangeSpec,
    pub baro: BaroSpec,
    #[serde(default)]
    pub radio: RadioSpec,
}

impl Default for SensorSuiteSpec {
    fn default() -> Self {
        Self {
            imu: ImuSpec::default(),
            rtk: AidingSpec::new(1.0, 0.02),
            compass: AidingSpec::new(1.0, 1.0),
            compass_baseline: [1.0, 0.0, 0.0],
            aoa: AidingSpec::new(16.6, 3.0),
            range: RangeSpec {
                sigma: 0.5,
                outliers: OutlierModel::default(),
            },
            baro: BaroSpec {
                rate: 2.0,
                sigma: 0.5,
                bias: 0.0,
                bias_walk: 0.0,
                outliers: OutlierModel::default(),
            },
            radio: RadioSpec::default(),
        }
    }
}

impl SensorSuiteSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        let rates = [
            ("sensors.imu.rate", self.imu.rate),
            ("sensors.rtk.rate", self.rtk.rate),
            ("sensors.compass.rate", self.compass.rate),
            ("sensors.aoa.rate", self.aoa.rate),
            ("sensors.baro.rate", self.baro.rate),
        ];
        for (field, r) in rates {
            if !(r > 0.0 && r.is_finite()) {
                return Err(SimError::Invalid(field, "rate must be positive"));
            }
        }
        let sigmas = [
            ("sensors.rtk.sigma", self.rtk.sigma),
            ("sensors.compass.sigma", self.compass.sigma),
            ("sensors.aoa.sigma", self.aoa.sigma),
            ("sensors.range.sigma", self.range.sigma),
            ("sensors.baro.sigma", self.baro.sigma),
        ];
        for (field, s) in sigmas {
            if !(s > 0.0 && s.is_finite()) {
                return Err(SimError::Invalid(field, "sigma must be positive"));
            }
        }
        self.rtk.outliers.validate("sensors.rtk.outliers")?;
        self.compass.outliers.validate("sensors.compass.outliers")?;
        self.aoa.outliers.validate("sensors.aoa.outliers")?;
        self.range.outliers.validate("sensors.range.outliers")?;
        self.baro.outliers.validate("sensors.baro.outliers")?;
        if self.baseline().is_none() {
            return Err(SimError::Invalid("sensors.compass_baseline", "must be non-zero"));
        }
        Ok(())
    }

    pub fn baseline(&self) -> Option<CompassBaseline> {
        CompassBaseline::new(Vec3::from(self.compass_baseline))
    }
}

/// Switches for the error sources; all on by default.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Perturbations {
    pub noise: bool,
    pub biases: bool,
    pub outliers: bool,
}

impl Default for Perturbations {
    fn default() -> Self {
        Self {
            noise: true,
            biases: true,
            outliers: true,
        }
    }
}

impl Perturbations {
    pub fn none() -> Self {
        Self {
            noise: false,
            biases: false,
            outliers: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PostAiding {
    AoaRange,
    AoaBaro,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreAiding {
    pub compass: bool,
    pub baro: bool,
}

impl Default for PreAiding {
    fn default() -> Self {
        Self {
            compass: true,
            baro: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub start: f64,
    pub end: f64,
}

/// RTK (plus the pre-handover extras) before `handover_time`, the PARS
/// configuration afterwards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandoverSchedule {
    pub handover_time: f64,
    #[serde(default)]
    pub pre: PreAiding,
    pub post: PostAiding,
    pub segments: Vec<Segment>,
}

impl HandoverSchedule {
    pub fn validate(&self, duration: f64) -> Result<(), SimError> {
        if !(self.handover_time > 0.0 && self.handover_time < duration) {
            return Err(SimError::Invalid("handover.handover_time", "must lie inside the run"));
        }
        let mut t = 0.0;
        for s in &self.segments {
            if (s.start - t).abs() > 1e-9 || !(s.end > s.start) {
                return Err(SimError::Invalid("handover.segments", "segments must partition the run"));
            }
            t = s.end;
        }
        if self.segments.is_empty() || (t - duration).abs() > 1e-9 {
            return Err(SimError::Invalid("handover.segments", "segments must partition the run"));
        }
        Ok(())
    }

    /// Index of the segment containing `t`; the last segment is closed.
    pub fn segment_of(&self, t: f64) -> Option<usize> {
        let last = self.segments.len().checked_sub(1)?;
        self.segments
            .iter()
            .position(|s| t >= s.start && t < s.end)
            .or_else(|| (t == self.segments[last].end).then_some(last))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EventPayload {
    Imu(ImuSample),
    Aiding(Measurement),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SensorEvent {
    pub timestamp: f64,
    pub payload: EventPayload,
    /// Truth metadata; never handed to estimators.
    pub is_outlier: bool,
}

impl SensorEvent {
    pub fn kind(&self) -> &'static str {
        match &self.payload {
            EventPayload::Imu(_) => "imu",
            EventPayload::Aiding(m) => measurement_kind(m),
        }
    }
}

pub fn measurement_kind(m: &Measurement) -> &'static str {
    match m {
        Measurement::Gnss(_) => "rtk",
        Measurement::Compass(_) => "compass",
        Measurement::Aoa(_) => "aoa",
        Measurement::Range(_) => "range",
        Measurement::Baro(_) => "baro",
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn normal3(rng: &mut ChaCha8Rng) -> Vec3 {
    let x = normal(rng);
    let y = normal(rng);
    let z = normal(rng);
    Vec3::new(x, y, z)
}

/// Epochs `k/rate` inside `[from, to)`, strictly after zero.
fn epochs(rate: f64, from: f64, to: f64) -> impl Iterator<Item = f64> {
    let k0 = (from * rate).ceil().max(1.0) as u64;
    (k0..)
        .map(move |k| k as f64 / rate)
        .skip_while(move |t| *t < from)
        .take_while(move |t| *t < to)
}

/// IMU samples at `k/rate`, each valid until the next one.
///
/// The sample over `[t_k, t_k+1)` is chosen so that one midpoint strapdown
/// step reproduces the true attitude and velocity at `t_k+1` exactly:
/// `ω = Log(R_kᵀ R_k+1)/dt` and `f = (R_k Exp(ω dt/2))ᵀ ((v_k+1 − v_k)/dt − g)`.
pub fn synthesize_imu(
    trajectory: &Trajectory,
    spec: &ImuSpec,
    gravity: &GravityModel,
    perturb: Perturbations,
    rng: &mut ChaCha8Rng,
) -> Vec<ImuSample> {
    let dt = 1.0 / spec.rate;
    let n = (trajectory.duration() * spec.rate + 1e-9).floor() as usize;
    let noise_on = if perturb.noise { 1.0 } else { 0.0 };
    let bias_on = if perturb.biases { 1.0 } else { 0.0 };
    let sa = spec.accel_noise_density / dt.sqrt() * noise_on;
    let sg = spec.gyro_noise_density / dt.sqrt() * noise_on;
    let wa = spec.accel_bias_walk * dt.sqrt() * bias_on;
    let wg = spec.gyro_bias_walk * dt.sqrt() * bias_on;
    let mut ba = Vec3::from(spec.accel_bias) * bias_on;
    let mut bg = Vec3::from(spec.gyro_bias) * bias_on;

    let mut out = Vec::with_capacity(n + 1);
    let mut prev = trajectory.at(0.0);
    for k in 0..=n {
        let t = k as f64 * dt;
        let next = trajectory.at((k + 1) as f64 * dt);
        let omega = so3_log(&(prev.rotation.transpose() * next.rotation)) / dt;
        let mid = prev.rotation * crate::lie::so3_exp(&(omega * (0.5 * dt)));
        let force = mid.matrix().transpose() * ((next.velocity - prev.velocity) / dt - gravity.vector);
        let na = normal3(rng);
        let ng = normal3(rng);
        out.push(ImuSample::new(t, force + ba + na * sa, omega + bg + ng * sg));
        ba += normal3(rng) * wa;
        bg += normal3(rng) * wg;
        prev = next;
    }
    out
}

struct Draw {
    outlier: bool,
    scale: f64,
    offset: f64,
}

fn draw_outlier(rng: &mut ChaCha8Rng, model: &OutlierModel, enabled: bool) -> Draw {
    let u: f64 = rng.random();
    let outlier = enabled && u < model.probability;
    Draw {
        outlier,
        scale: if outlier { model.kappa } else { 1.0 },
        offset: if outlier { model.offset } else { 0.0 },
    }
}

/// Aiding events per the handover schedule, merged in time order.
pub fn synthesize_aiding(
    trajectory: &Trajectory,
    sensors: &SensorSuiteSpec,
    schedule: &HandoverSchedule,
    perturb: Perturbations,
    rng: &mut ChaCha8Rng,
) -> Vec<SensorEvent> {
    let end = trajectory.duration() + 1e-9;
    let th = schedule.handover_time;
    let noise_on = if perturb.noise { 1.0 } else { 0.0 };
    let radio = sensors.radio.frame();
    let mut events = Vec::new();
    let mut push = |t: f64, m: Measurement, outlier: bool| {
        events.push(SensorEvent {
            timestamp: t,
            payload: EventPayload::Aiding(m),
            is_outlier: outlier,
        })
    };

    let rtk = &sensors.rtk;
    for t in epochs(rtk.rate, 0.0, th) {
        let d = draw_outlier(rng, &rtk.outliers, perturb.outliers);
        let n = normal3(rng);
        let truth = trajectory.at(t);
        let sigma = rtk.sigma * d.scale * if d.outlier { 1.0 } else { noise_on };
        let position = truth.position + n * sigma + Vec3::repeat(d.offset);
        push(
            t,
            Measurement::Gnss(GnssPosition {
                timestamp: t,
                position,
                covariance: Mat3::identity() * rtk.sigma.powi(2),
            }),
            d.outlier,
        );
    }

    if schedule.pre.compass {
        let c = &sensors.compass;
        let l = Vec3::from(sensors.compass_baseline);
        let sigma_m = c.sigma.to_radians() * l.norm();
        for t in epochs(c.rate, 0.0, th) {
            let d = draw_outlier(rng, &c.outliers, perturb.outliers);
            let n = normal3(rng);
            let truth = trajectory.at(t);
            let sigma = sigma_m * d.scale * if d.outlier { 1.0 } else { noise_on };
            let vector = truth.rotation.matrix() * l + n * sigma + Vec3::repeat(d.offset.to_radians() * l.norm());
            push(
                t,
                Measurement::Compass(CompassMeasurement {
                    timestamp: t,
                    vector,
                    covariance: Mat3::identity() * sigma_m.powi(2),
                }),
                d.outlier,
            );
        }
    }

    let aoa_times: Vec<f64> = epochs(sensors.aoa.rate, th, end).collect();
    let a = &sensors.aoa;
    let sigma_rad = a.sigma.to_radians();
    for &t in &aoa_times {
        let d = draw_outlier(rng, &a.outliers, perturb.outliers);
        let n_az = normal(rng);
        let n_el = normal(rng);
        let truth = trajectory.at(t);
        let (az, el) = aoa_of(&nav_to_radio(&truth.position, &radio));
        let sigma = sigma_rad * d.scale * if d.outlier { 1.0 } else { noise_on };
        let offset = d.offset.to_radians();
        push(
            t,
            Measurement::Aoa(AoaMeasurement {
                timestamp: t,
                azimuth: wrap_angle(az + n_az * sigma + offset),
                elevation: el + n_el * sigma + offset,
                noise_cov: nalgebra::Matrix2::identity() * sigma_rad.powi(2),
            }),
            d.outlier,
        );
    }

    if schedule.post == PostAiding::AoaRange {
        let r = &sensors.range;
        for &t in &aoa_times {
            let d = draw_outlier(rng, &r.outliers, perturb.outliers);
            let e = normal3(rng);
            let n_out = normal(rng);
            let truth = trajectory.at(t);
            let p = truth.position + e * (sensors.rtk.sigma * noise_on);
            let mut range = nav_to_radio(&p, &radio).norm();
            if d.outlier {
                range += n_out * r.sigma * d.scale + d.offset;
            }
            push(
                t,
                Measurement::Range(RangeMeasurement {
                    timestamp: t,
                    range,
                    variance: r.sigma.powi(2),
                }),
                d.outlier,
            );
        }
    }

    let b = &sensors.baro;
    let baro_windows: Vec<(f64, f64)> = match (schedule.pre.baro, schedule.post) {
        (true, PostAiding::AoaBaro) => vec![(0.0, end)],
        (true, PostAiding::AoaRange) => vec![(0.0, th)],
        (false, PostAiding::AoaBaro) => vec![(th, end)],
        (false, PostAiding::AoaRange) => vec![],
    };
    let bias_on = if perturb.biases { 1.0 } else { 0.0 };
    for (from, to) in baro_windows {
        let mut bias = b.bias * bias_on;
        let mut t_prev = 0.0;
        for t in epochs(b.rate, from, to) {
            let d = draw_outlier(rng, &b.outliers, perturb.outliers);
            let n = normal(rng);
            let w = normal(rng);
            bias += w * b.bias_walk * (t - t_prev).sqrt() * bias_on;
            t_prev = t;
            let truth = trajectory.at(t);
            let sigma = b.sigma * d.scale * if d.outlier { 1.0 } else { noise_on };
            let altitude = -truth.position.z + bias + n * sigma + d.offset;
            push(
                t,
                Measurement::Baro(BaroMeasurement {
                    timestamp: t,
                    pressure: altitude_to_pressure(altitude),
                    variance: b.sigma.powi(2),
                }),
                d.outlier,
            );
        }
    }

    // stable: equal timestamps keep generation order
    events.sort_by(|x, y| x.timestamp.total_cmp(&y.timestamp));
    events
}
