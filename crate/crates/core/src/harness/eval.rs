//! Segment-wise error statistics.

use serde::{Deserialize, Serialize};

use crate::factors::wrap_angle;
use crate::lie::{so3_exp, so3_log};
use crate::sim::run::{attitude_error, EpochRecord, RunLog};
use crate::sim::{HandoverSchedule, TruthState};

/// Errors and 3σ of one epoch: N, E, D in metres, roll, pitch, yaw in
/// degrees.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochError {
    pub time: f64,
    pub segment: Option<usize>,
    pub error: [f64; 6],
    pub sigma3: [f64; 6],
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SubstateRmse {
    pub n: f64,
    pub e: f64,
    pub d: f64,
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl SubstateRmse {
    pub fn as_array(&self) -> [f64; 6] {
        [self.n, self.e, self.d, self.roll, self.pitch, self.yaw]
    }

    pub fn horizontal(&self) -> f64 {
        (self.n * self.n + self.e * self.e).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentReport {
    pub name: String,
    pub start: f64,
    pub end: f64,
    pub epochs: usize,
    /// `None` when the segment holds no epoch.
    pub rmse: Option<SubstateRmse>,
}

/// Wraps degrees to (−180, 180].
pub fn wrap_deg(a: f64) -> f64 {
    wrap_angle(a.to_radians()).to_degrees()
}

pub fn epoch_errors(records: &[EpochRecord], schedule: &HandoverSchedule) -> Vec<EpochError> {
    records
        .iter()
        .map(|r| {
            let dp = r.estimate.position() - r.truth.position;
            let da = attitude_error(r.estimate.rotation(), &r.truth.rotation);
            let s = &r.sigma3;
            EpochError {
                time: r.time,
                segment: schedule.segment_of(r.time),
                error: [
                    dp.x,
                    dp.y,
                    dp.z,
                    da.x.to_degrees(),
                    da.y.to_degrees(),
                    wrap_deg(da.z.to_degrees()),
                ],
                sigma3: [s[0], s[1], s[2], s[3].to_degrees(), s[4].to_degrees(), s[5].to_degrees()],
            }
        })
        .collect()
}

fn rmse_of<'a>(errors: impl Iterator<Item = &'a EpochError>) -> (usize, Option<SubstateRmse>) {
    let mut sum = [0.0; 6];
    let mut n = 0;
    for e in errors {
        for (k, v) in e.error.iter().enumerate() {
            // yaw is wrapped before squaring
            let v = if k == 5 { wrap_deg(*v) } else { *v };
            sum[k] += v * v;
        }
        n += 1;
    }
    if n == 0 {
        return (0, None);
    }
    let r = sum.map(|s| (s / n as f64).sqrt());
    (
        n,
        Some(SubstateRmse {
            n: r[0],
            e: r[1],
            d: r[2],
            roll: r[3],
            pitch: r[4],
            yaw: r[5],
        }),
    )
}

/// RMSE of every schedule segment. Each epoch belongs to exactly one segment.
pub fn segment_rmse(errors: &[EpochError], schedule: &HandoverSchedule) -> Vec<SegmentReport> {
    schedule
        .segments
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let (epochs, rmse) = rmse_of(errors.iter().filter(|e| e.segment == Some(i)));
            SegmentReport {
                name: s.name.clone(),
                start: s.start,
                end: s.end,
                epochs,
                rmse,
            }
        })
        .collect()
}

/// Horizontal position RMSE over epochs at or after the handover.
pub fn post_handover_horizontal_rmse(errors: &[EpochError], schedule: &HandoverSchedule) -> Option<f64> {
    let post: Vec<&EpochError> = errors
        .iter()
        .filter(|e| e.time >= schedule.handover_time)
        .collect();
    if post.is_empty() {
        return None;
    }
    let s: f64 = post.iter().map(|e| e.error[0].powi(2) + e.error[1].powi(2)).sum();
    Some((s / post.len() as f64).sqrt())
}

/// Truth at `t` from a sampled series: linear in position and velocity,
/// geodesic in attitude. The flag is set when the bracketing samples are
/// more than `period` apart (or `t` lies outside the series).
pub fn interpolate_truth(samples: &[TruthState], t: f64, period: f64) -> Option<(TruthState, bool)> {
    let first = samples.first()?;
    let last = samples.last()?;
    if t <= first.time {
        return Some((*first, t < first.time));
    }
    if t >= last.time {
        return Some((*last, t > last.time));
    }
    let i = samples.partition_point(|s| s.time <= t);
    let (a, b) = (&samples[i - 1], &samples[i]);
    let span = b.time - a.time;
    let u = (t - a.time) / span;
    let lerp = |x: &crate::lie::Vec3, y: &crate::lie::Vec3| x + (y - x) * u;
    let rot = a.rotation * so3_exp(&(so3_log(&(a.rotation.transpose() * b.rotation)) * u));
    Some((
        TruthState {
            time: t,
            rotation: rot,
            position: lerp(&a.position, &b.position),
            velocity: lerp(&a.velocity, &b.velocity),
            acceleration: lerp(&a.acceleration, &b.acceleration),
            angular_rate: lerp(&a.angular_rate, &b.angular_rate),
        },
        span > period * (1.0 + 1e-9),
    ))
}

/// Identifies the run behind a report.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    /// configuration label such as `FGO+GM`
    pub label: String,
    pub scenario: String,
    pub seed: u64,
    pub estimator: String,
    pub kernel: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    #[serde(flatten)]
    pub meta: ReportMeta,
    pub handover_time: f64,
    pub segments: Vec<SegmentReport>,
    pub post_handover_horizontal_rmse: Option<f64>,
    pub epochs: usize,
    pub diverged: bool,
    pub divergence_time: Option<f64>,
    /// no divergence and every smoother solve met its tolerance
    pub converged: bool,
    pub skipped_measurements: usize,
    pub rejected_components: usize,
    pub failed_updates: usize,
    pub unconverged_solves: usize,
    /// per-epoch series; written to `epochs.csv` rather than the report file
    #[serde(skip)]
    pub series: Vec<EpochError>,
}

impl EvaluationReport {
    pub fn segment(&self, name: &str) -> Option<&SegmentReport> {
        self.segments.iter().find(|s| s.name == name)
    }
}

/// Segment-wise statistics of a run. An empty log (a run that failed at
/// its first epoch) yields segments without RMSE.
pub fn evaluate(log: &RunLog, schedule: &HandoverSchedule, meta: ReportMeta) -> EvaluationReport {
    let series = epoch_errors(&log.records, schedule);
    EvaluationReport {
        meta,
        handover_time: schedule.handover_time,
        segments: segment_rmse(&series, schedule),
        post_handover_horizontal_rmse: post_handover_horizontal_rmse(&series, schedule),
        epochs: series.len(),
        diverged: log.diverged_at.is_some(),
        divergence_time: log.diverged_at,
        converged: log.diverged_at.is_none() && log.unconverged_solves == 0,
        skipped_measurements: log.skipped,
        rejected_components: log.rejected,
        failed_updates: log.failed_updates,
        unconverged_solves: log.unconverged_solves,
        series,
    }
}
