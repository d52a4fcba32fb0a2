//! Synthetic GNSS-to-PARS handover scenarios.
//!
//! A [`ScenarioSpec`] bundles a trajectory, a sensor suite and a handover
//! schedule. [`ScenarioSpec::generate`] turns it into truth plus time-ordered
//! sensor streams for one seed. Estimators only ever see a [`SensorFeed`],
//! which carries no outlier flags.

pub mod run;
pub mod sensors;
pub mod trajectory;

use std::fmt::Write as _;
use std::io::{self, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::factors::{wrap_angle, Measurement};
use crate::preint::{GravityModel, ImuSample};

pub use sensors::{
    AidingSpec, BaroSpec, EventPayload, HandoverSchedule, ImuSpec, OutlierModel, Perturbations,
    PostAiding, PreAiding, RadioSpec, RangeSpec, Segment, SensorEvent, SensorSuiteSpec,
};
pub use trajectory::{RapidYaw, Trajectory, TrajectorySpec, TruthState, Waypoint, YawProfile};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("{0}: {1}")]
    Invalid(&'static str, &'static str),
    #[error("waypoints need {needed:.2} s but the run lasts {duration:.2} s")]
    Unreachable { needed: f64, duration: f64 },
    #[error("heading changes at waypoint {0} but it has no hold time to turn in")]
    YawSlewNeedsHold(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    pub trajectory: TrajectorySpec,
    pub sensors: SensorSuiteSpec,
    pub handover: HandoverSchedule,
    #[serde(default)]
    pub perturbations: Perturbations,
}

/// Named built-in scenarios.
pub const PRESETS: [&str; 2] = ["aoa-range", "aoa-baro"];

/// Seconds of stationary data at the start used for initialization.
pub const STATIONARY_LEAD: f64 = 5.0;

/// Representative survey pattern (not a reproduction of any recorded
/// flight): a lawnmower at 10 m height, 20–60 m from the radio, with yaw
/// turns during short holds. Legs are added while they fit in `duration`.
fn survey_waypoints(duration: f64, speed: f64, accel: f64) -> Vec<Waypoint> {
    let corners = [
        [20.0, 0.0],
        [50.0, 0.0],
        [50.0, 15.0],
        [20.0, 15.0],
        [20.0, 30.0],
        [50.0, 30.0],
        [50.0, 45.0],
        [20.0, 45.0],
        [20.0, 60.0],
        [50.0, 60.0],
    ];
    let hold = 2.0;
    let leg_time = |d: f64| {
        if d <= speed * speed / accel {
            2.0 * (d / accel).sqrt()
        } else {
            d / speed + speed / accel
        }
    };
    let mut wps = vec![Waypoint::new([corners[0][0], corners[0][1], -10.0], STATIONARY_LEAD)];
    let mut t = STATIONARY_LEAD;
    let mut i = 1;
    while i < corners.len() * 4 {
        let c = corners[i % corners.len()];
        let last = wps.last().expect("non-empty").position;
        let d = ((c[0] - last[0]).powi(2) + (c[1] - last[1]).powi(2)).sqrt();
        let needed = leg_time(d) + hold;
        if t + needed > duration - 1.0 {
            break;
        }
        t += needed;
        wps.push(Waypoint::new([c[0], c[1], -10.0], hold));
        i += 1;
    }
    wps
}

fn segments(duration: f64, handover: f64) -> Vec<Segment> {
    let span = (duration - handover) / 3.0;
    let mut out = vec![Segment {
        name: "RTK".into(),
        start: 0.0,
        end: handover,
    }];
    for k in 0..3 {
        out.push(Segment {
            name: format!("{}", k + 1),
            start: handover + k as f64 * span,
            end: if k == 2 { duration } else { handover + (k + 1) as f64 * span },
        });
    }
    out
}

impl ScenarioSpec {
    /// `aoa-range` or `aoa-baro` over `duration` seconds with the handover a
    /// third of the way in. Segment 1 contains a rapid-yaw excursion.
    pub fn preset(name: &str, duration: f64) -> Option<Self> {
        let post = match name {
            "aoa-range" => PostAiding::AoaRange,
            "aoa-baro" => PostAiding::AoaBaro,
            _ => return None,
        };
        let handover = (duration / 3.0).round();
        let seg = segments(duration, handover);
        let seg1 = &seg[1];
        let speed = 2.0;
        let accel = 1.0;
        let trajectory = TrajectorySpec {
            waypoints: survey_waypoints(duration, speed, accel),
            cruise_speed: speed,
            max_accel: accel,
            yaw: YawProfile::FollowPath,
            rapid_yaw: Some(RapidYaw {
                start: seg1.start + 0.2 * (seg1.end - seg1.start),
                end: seg1.start + 0.8 * (seg1.end - seg1.start),
                amplitude_deg: 60.0,
                period: 3.0,
            }),
            wobble_deg: 2.0,
            duration,
        };
        let mut sensors = SensorSuiteSpec::default();
        sensors.imu.accel_bias = [0.05, -0.03, 0.02];
        sensors.imu.gyro_bias = [1e-3, -5e-4, 8e-4];
        sensors.imu.accel_bias_walk = 1e-4;
        sensors.imu.gyro_bias_walk = 1e-6;
        sensors.aoa.outliers = OutlierModel {
            probability: 0.1,
            kappa: 20.0,
            offset: 0.0,
        };
        let pre = match post {
            PostAiding::AoaRange => PreAiding {
                compass: true,
                baro: false,
            },
            PostAiding::AoaBaro => {
                sensors.baro.bias = 2.0;
                PreAiding {
                    compass: true,
                    baro: true,
                }
            }
        };
        Some(Self {
            name: name.to_string(),
            trajectory,
            sensors,
            handover: HandoverSchedule {
                handover_time: handover,
                pre,
                post,
                segments: seg,
            },
            perturbations: Perturbations::default(),
        })
    }

    pub fn with_outlier_probability(mut self, p: f64) -> Self {
        self.sensors.aoa.outliers.probability = p;
        self
    }

    pub fn with_imu_rate(mut self, rate: f64) -> Self {
        self.sensors.imu.rate = rate;
        self
    }

    pub fn noiseless(mut self) -> Self {
        self.perturbations = Perturbations::none();
        self
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.sensors.validate()?;
        self.handover.validate(self.trajectory.duration)?;
        Trajectory::new(self.trajectory.clone()).map(|_| ())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("scenario is always representable")
    }

    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    /// Truth and sensor streams for one seed.
    pub fn generate(&self, seed: u64) -> Result<GeneratedScenario, SimError> {
        self.sensors.validate()?;
        self.handover.validate(self.trajectory.duration)?;
        let trajectory = Trajectory::new(self.trajectory.clone())?;
        let gravity = GravityModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let imu = sensors::synthesize_imu(&trajectory, &self.sensors.imu, &gravity, self.perturbations, &mut rng);
        let aiding = sensors::synthesize_aiding(&trajectory, &self.sensors, &self.handover, self.perturbations, &mut rng);
        Ok(GeneratedScenario {
            spec: self.clone(),
            trajectory,
            imu,
            aiding,
            seed,
        })
    }
}

#[derive(Clone, Debug)]
pub struct GeneratedScenario {
    pub spec: ScenarioSpec,
    pub trajectory: Trajectory,
    pub imu: Vec<ImuSample>,
    pub aiding: Vec<SensorEvent>,
    pub seed: u64,
}

/// What an estimator is allowed to see.
#[derive(Clone, Debug)]
pub struct SensorFeed<'a> {
    pub imu: &'a [ImuSample],
    pub aiding: Vec<Measurement>,
}

fn fmt_f(out: &mut String, v: f64) {
    let _ = write!(out, ",{v:.8e}");
}

impl GeneratedScenario {
    pub fn feed(&self) -> SensorFeed<'_> {
        SensorFeed {
            imu: &self.imu,
            aiding: self
                .aiding
                .iter()
                .filter_map(|e| match e.payload {
                    EventPayload::Aiding(m) => Some(m),
                    EventPayload::Imu(_) => None,
                })
                .collect(),
        }
    }

    pub fn outlier_fraction(&self, kind: &str) -> Option<f64> {
        let events: Vec<_> = self.aiding.iter().filter(|e| e.kind() == kind).collect();
        (!events.is_empty())
            .then(|| events.iter().filter(|e| e.is_outlier).count() as f64 / events.len() as f64)
    }

    /// Truth every `dt` seconds: `time,n,e,d,vn,ve,vd,roll_deg,pitch_deg,yaw_deg`.
    pub fn write_truth_csv<W: Write>(&self, mut w: W, dt: f64) -> io::Result<()> {
        writeln!(w, "time,n,e,d,vn,ve,vd,roll_deg,pitch_deg,yaw_deg")?;
        for s in self.trajectory.sample(dt) {
            let (r, p, y) = s.rotation.to_euler();
            let mut line = format!("{:.8e}", s.time);
            for v in s.position.iter().chain(s.velocity.iter()) {
                fmt_f(&mut line, *v);
            }
            for v in [r, p, wrap_angle(y)] {
                fmt_f(&mut line, v.to_degrees());
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    /// All events in time order: `time,kind,v0..v5,is_outlier`. Payload
    /// columns per kind: imu `fx,fy,fz,wx,wy,wz`; rtk `n,e,d`; compass
    /// `x,y,z`; aoa `azimuth,elevation` (rad); range `range`; baro `kPa`.
    /// Unused columns are empty.
    pub fn write_events_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "time,kind,v0,v1,v2,v3,v4,v5,is_outlier")?;
        let imu = self.imu.iter().map(|s| SensorEvent {
            timestamp: s.timestamp,
            payload: EventPayload::Imu(*s),
            is_outlier: false,
        });
        let mut all: Vec<SensorEvent> = imu.chain(self.aiding.iter().copied()).collect();
        all.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        for e in all {
            let values: Vec<f64> = match &e.payload {
                EventPayload::Imu(s) => s.specific_force.iter().chain(s.angular_rate.iter()).copied().collect(),
                EventPayload::Aiding(Measurement::Gnss(m)) => m.position.iter().copied().collect(),
                EventPayload::Aiding(Measurement::Compass(m)) => m.vector.iter().copied().collect(),
                EventPayload::Aiding(Measurement::Aoa(m)) => vec![m.azimuth, m.elevation],
                EventPayload::Aiding(Measurement::Range(m)) => vec![m.range],
                EventPayload::Aiding(Measurement::Baro(m)) => vec![m.pressure],
            };
            let mut line = format!("{:.8e},{}", e.timestamp, e.kind());
            for i in 0..6 {
                match values.get(i) {
                    Some(v) => fmt_f(&mut line, *v),
                    None => line.push(','),
                }
            }
            let _ = write!(line, ",{}", e.is_outlier as u8);
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}
