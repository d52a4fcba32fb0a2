//! Analytic multirotor reference trajectories.
//!
//! Translation follows waypoints with trapezoidal speed profiles, so the
//! acceleration is piecewise constant and position is C¹. Attitude is built
//! from a yaw profile plus an optional small roll/pitch wobble.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::factors::wrap_angle;
use crate::lie::{so3_log, Rotation, Vec3};

use super::SimError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    /// NED, metres
    pub position: [f64; 3],
    /// seconds spent stationary on arrival
    #[serde(default)]
    pub hold: f64,
}

impl Waypoint {
    pub fn new(position: [f64; 3], hold: f64) -> Self {
        Self { position, hold }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum YawProfile {
    /// Heading along each leg, slewing during holds.
    FollowPath,
    Fixed { yaw_deg: f64 },
}

/// Sinusoidal yaw excursion added on top of the base profile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RapidYaw {
    pub start: f64,
    pub end: f64,
    pub amplitude_deg: f64,
    pub period: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub waypoints: Vec<Waypoint>,
    /// m/s
    pub cruise_speed: f64,
    /// m/s²
    #[serde(default = "default_accel")]
    pub max_accel: f64,
    pub yaw: YawProfile,
    #[serde(default)]
    pub rapid_yaw: Option<RapidYaw>,
    /// roll/pitch wobble amplitude, degrees (0 disables)
    #[serde(default)]
    pub wobble_deg: f64,
    pub duration: f64,
}

fn default_accel() -> f64 {
    1.0
}

/// Constant-acceleration translation phase.
#[derive(Clone, Copy, Debug)]
struct Phase {
    t0: f64,
    p0: Vec3,
    v0: Vec3,
    a: Vec3,
}

/// Yaw blend between two headings over `[t0, t1]`.
#[derive(Clone, Copy, Debug)]
struct YawPhase {
    t0: f64,
    t1: f64,
    y0: f64,
    y1: f64,
}

/// Ground truth at one instant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruthState {
    pub time: f64,
    pub rotation: Rotation,
    pub position: Vec3,
    pub velocity: Vec3,
    pub acceleration: Vec3,
    /// body frame
    pub angular_rate: Vec3,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    spec: TrajectorySpec,
    phases: Vec<Phase>,
    yaw_phases: Vec<YawPhase>,
    motion_start: f64,
    path_end: f64,
}

impl Trajectory {
    pub fn new(spec: TrajectorySpec) -> Result<Self, SimError> {
        if spec.waypoints.is_empty() {
            return Err(SimError::Invalid("trajectory.waypoints", "at least one waypoint is required"));
        }
        if !(spec.duration > 0.0) {
            return Err(SimError::Invalid("trajectory.duration", "must be positive"));
        }
        if !(spec.cruise_speed > 0.0) {
            return Err(SimError::Invalid("trajectory.cruise_speed", "must be positive"));
        }
        if !(spec.max_accel > 0.0) {
            return Err(SimError::Invalid("trajectory.max_accel", "must be positive"));
        }
        if spec.waypoints.iter().any(|w| !(w.hold >= 0.0)) {
            return Err(SimError::Invalid("trajectory.waypoints.hold", "must be non-negative"));
        }
        if let Some(r) = &spec.rapid_yaw {
            if !(r.period > 0.0) || !(r.end > r.start) {
                return Err(SimError::Invalid("trajectory.rapid_yaw", "needs end > start and period > 0"));
            }
        }

        let v = spec.cruise_speed;
        let acc = spec.max_accel;
        let wp: Vec<Vec3> = spec.waypoints.iter().map(|w| Vec3::from(w.position)).collect();
        let mut phases = Vec::new();
        let mut t = 0.0;
        let mut headings = Vec::new();
        let mut leg_times = Vec::new();

        let fixed_yaw = match spec.yaw {
            YawProfile::Fixed { yaw_deg } => Some(yaw_deg.to_radians()),
            YawProfile::FollowPath => None,
        };

        for i in 0..wp.len() {
            let hold = spec.waypoints[i].hold;
            let hold_start = t;
            phases.push(Phase {
                t0: t,
                p0: wp[i],
                v0: Vec3::zeros(),
                a: Vec3::zeros(),
            });
            t += hold;
            let hold_span = (hold_start, t);
            if i + 1 == wp.len() {
                leg_times.push((hold_span, None));
                break;
            }
            let delta = wp[i + 1] - wp[i];
            let d = delta.norm();
            if d == 0.0 {
                leg_times.push((hold_span, None));
                continue;
            }
            let u = delta / d;
            let (t_acc, t_cruise, v_peak) = if d <= v * v / acc {
                let ta = (d / acc).sqrt();
                (ta, 0.0, acc * ta)
            } else {
                (v / acc, (d - v * v / acc) / v, v)
            };
            let leg_start = t;
            phases.push(Phase {
                t0: t,
                p0: wp[i],
                v0: Vec3::zeros(),
                a: u * acc,
            });
            t += t_acc;
            let p1 = wp[i] + u * (0.5 * acc * t_acc * t_acc);
            if t_cruise > 0.0 {
                phases.push(Phase {
                    t0: t,
                    p0: p1,
                    v0: u * v_peak,
                    a: Vec3::zeros(),
                });
            }
            let p2 = p1 + u * (v_peak * t_cruise);
            t += t_cruise;
            phases.push(Phase {
                t0: t,
                p0: p2,
                v0: u * v_peak,
                a: -u * acc,
            });
            t += t_acc;
            let horizontal = u.x.hypot(u.y);
            let heading = (horizontal > 1e-9).then(|| u.y.atan2(u.x));
            headings.push(heading);
            leg_times.push((hold_span, Some((leg_start, t, heading))));
        }
        let path_end = t;
        if path_end > spec.duration {
            return Err(SimError::Unreachable {
                needed: path_end,
                duration: spec.duration,
            });
        }

        // yaw schedule: legs at constant heading, holds slew to the next leg
        let mut yaw_phases = Vec::new();
        let first_heading = headings.iter().flatten().next().copied().unwrap_or(0.0);
        let mut current = fixed_yaw.unwrap_or(first_heading);
        for (i, ((h0, h1), leg)) in leg_times.iter().enumerate() {
            let next = match (fixed_yaw, leg) {
                (Some(y), _) => y,
                (None, Some((_, _, Some(h)))) => *h,
                _ => current,
            };
            let target = current + wrap_angle(next - current);
            if (target - current).abs() > 1e-12 && h1 - h0 <= 0.0 {
                return Err(SimError::YawSlewNeedsHold(i));
            }
            yaw_phases.push(YawPhase {
                t0: *h0,
                t1: *h1,
                y0: current,
                y1: target,
            });
            current = target;
            if let Some((l0, l1, _)) = leg {
                yaw_phases.push(YawPhase {
                    t0: *l0,
                    t1: *l1,
                    y0: current,
                    y1: current,
                });
            }
        }

        let motion_start = spec.waypoints[0].hold;
        Ok(Self {
            spec,
            phases,
            yaw_phases,
            motion_start,
            path_end,
        })
    }

    pub fn spec(&self) -> &TrajectorySpec {
        &self.spec
    }

    pub fn duration(&self) -> f64 {
        self.spec.duration
    }

    /// Time the vehicle reaches its last waypoint.
    pub fn path_end(&self) -> f64 {
        self.path_end
    }

    fn phase_at(&self, t: f64) -> &Phase {
        let idx = self.phases.partition_point(|p| p.t0 <= t);
        &self.phases[idx.saturating_sub(1)]
    }

    fn translation(&self, t: f64) -> (Vec3, Vec3, Vec3) {
        let ph = self.phase_at(t);
        let tau = t - ph.t0;
        (
            ph.p0 + ph.v0 * tau + ph.a * (0.5 * tau * tau),
            ph.v0 + ph.a * tau,
            ph.a,
        )
    }

    fn yaw(&self, t: f64) -> f64 {
        let idx = self.yaw_phases.partition_point(|p| p.t0 <= t);
        let mut yaw = match self.yaw_phases.get(idx.saturating_sub(1)) {
            Some(p) if t < p.t1 => {
                let s = (t - p.t0) / (p.t1 - p.t0);
                p.y0 + (p.y1 - p.y0) * 0.5 * (1.0 - (PI * s).cos())
            }
            Some(p) => p.y1,
            None => 0.0,
        };
        if let Some(r) = &self.spec.rapid_yaw {
            // whole periods only, so the excursion returns to zero
            let end = r.start + ((r.end - r.start) / r.period).floor() * r.period;
            if t >= r.start && t < end {
                yaw += r.amplitude_deg.to_radians() * (TAU * (t - r.start) / r.period).sin();
            }
        }
        yaw
    }

    fn wobble(&self, t: f64) -> (f64, f64) {
        let w = self.spec.wobble_deg.to_radians();
        if w == 0.0 || t <= self.motion_start {
            return (0.0, 0.0);
        }
        let ramp = ((t - self.motion_start) / 2.0).min(1.0);
        let ramp = ramp * ramp * (3.0 - 2.0 * ramp);
        let tau = t - self.motion_start;
        (
            w * ramp * (TAU * tau / 7.3).sin(),
            w * ramp * (TAU * tau / 5.1).sin(),
        )
    }

    pub fn rotation(&self, t: f64) -> Rotation {
        let (roll, pitch) = self.wobble(t);
        Rotation::from_euler(roll, pitch, self.yaw(t))
    }

    pub fn at(&self, t: f64) -> TruthState {
        let (position, velocity, acceleration) = self.translation(t);
        let h = 1e-5;
        let angular_rate = so3_log(&(self.rotation(t - h).transpose() * self.rotation(t + h))) / (2.0 * h);
        TruthState {
            time: t,
            rotation: self.rotation(t),
            position,
            velocity,
            acceleration,
            angular_rate,
        }
    }

    /// Samples every `dt` seconds from 0 through the duration.
    pub fn sample(&self, dt: f64) -> Vec<TruthState> {
        let n = (self.spec.duration / dt + 1e-9).floor() as usize;
        (0..=n).map(|k| self.at(k as f64 * dt)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(waypoints: Vec<Waypoint>, duration: f64) -> TrajectorySpec {
        TrajectorySpec {
            waypoints,
            cruise_speed: 1.0,
            max_accel: 0.5,
            yaw: YawProfile::FollowPath,
            rapid_yaw: None,
            wobble_deg: 0.0,
            duration,
        }
    }

    #[test]
    fn hover_is_static() {
        let t = Trajectory::new(spec(vec![Waypoint::new([1.0, 2.0, -3.0], 0.0)], 10.0)).unwrap();
        for s in t.sample(0.5) {
            assert_eq!(s.velocity, Vec3::zeros());
            assert_eq!(s.acceleration, Vec3::zeros());
            assert_eq!(s.position, Vec3::new(1.0, 2.0, -3.0));
        }
    }

    #[test]
    fn ten_metre_leg_timing() {
        let t = Trajectory::new(spec(
            vec![Waypoint::new([0.0; 3], 1.0), Waypoint::new([10.0, 0.0, 0.0], 0.0)],
            20.0,
        ))
        .unwrap();
        // 2 s accelerating, 8 s cruising, 2 s braking
        assert!((t.path_end() - 13.0).abs() < 1e-12);
        let mut last = -1.0;
        for s in t.sample(0.01) {
            assert!(s.position.x >= last - 1e-12);
            last = s.position.x;
        }
        assert!((t.at(13.0).position.x - 10.0).abs() < 1e-12);
        assert!(t.at(13.0).velocity.norm() < 1e-12);
    }

    #[test]
    fn short_leg_is_triangular() {
        let t = Trajectory::new(spec(
            vec![Waypoint::new([0.0; 3], 0.0), Waypoint::new([0.0, 1.0, 0.0], 0.0)],
            10.0,
        ))
        .unwrap();
        // d = a·t², t = √2
        assert!((t.path_end() - 2.0 * 2f64.sqrt()).abs() < 1e-12);
        let peak = t.at(2f64.sqrt()).velocity.norm();
        assert!((peak - 0.5 * 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn velocity_is_consistent_with_position() {
        let mut s = spec(
            vec![
                Waypoint::new([0.0; 3], 1.0),
                Waypoint::new([5.0, 0.0, -1.0], 2.0),
                Waypoint::new([5.0, 5.0, -1.0], 0.0),
            ],
            30.0,
        );
        s.wobble_deg = 3.0;
        let t = Trajectory::new(s).unwrap();
        let dt = 0.01;
        let samples = t.sample(dt);
        for w in samples.windows(2) {
            let fd = (w[1].position - w[0].position) / dt;
            assert!((fd - w[0].velocity).norm() < 10.0 * dt * 0.5 + 1e-12);
        }
    }

    #[test]
    fn unreachable_timing_is_rejected() {
        let r = Trajectory::new(spec(
            vec![Waypoint::new([0.0; 3], 0.0), Waypoint::new([100.0, 0.0, 0.0], 0.0)],
            10.0,
        ));
        assert!(matches!(r, Err(SimError::Unreachable { .. })));
    }

    #[test]
    fn follow_path_heading_and_slew() {
        let t = Trajectory::new(spec(
            vec![
                Waypoint::new([0.0; 3], 1.0),
                Waypoint::new([0.0, 5.0, 0.0], 4.0),
                Waypoint::new([5.0, 5.0, 0.0], 0.0),
            ],
            40.0,
        ))
        .unwrap();
        let yaw = |time: f64| t.rotation(time).to_euler().2;
        assert!((yaw(0.5) - PI / 2.0).abs() < 1e-12);
        let arrive = 1.0 + 7.0;
        assert!((yaw(arrive + 4.0 + 0.1)).abs() < 1e-12);
        let mid = yaw(arrive + 2.0);
        assert!((mid - PI / 4.0).abs() < 1e-12);
        let no_hold = spec(
            vec![
                Waypoint::new([0.0; 3], 0.0),
                Waypoint::new([0.0, 5.0, 0.0], 0.0),
                Waypoint::new([5.0, 5.0, 0.0], 0.0),
            ],
            40.0,
        );
        assert_eq!(Trajectory::new(no_hold).unwrap_err(), SimError::YawSlewNeedsHold(1));
    }

    #[test]
    fn rapid_yaw_returns_to_base() {
        let mut s = spec(vec![Waypoint::new([0.0; 3], 0.0)], 20.0);
        s.yaw = YawProfile::Fixed { yaw_deg: 10.0 };
        s.rapid_yaw = Some(RapidYaw {
            start: 2.0,
            end: 9.5,
            amplitude_deg: 45.0,
            period: 2.0,
        });
        let t = Trajectory::new(s).unwrap();
        let yaw = |time: f64| t.rotation(time).to_euler().2.to_degrees();
        assert!((yaw(2.5) - 55.0).abs() < 1e-9);
        assert!((yaw(8.0) - 10.0).abs() < 1e-9);
        assert!((yaw(9.0) - 10.0).abs() < 1e-9);
    }
}
