//! Drives an estimator through a generated scenario.
//!
//! Aiding events closer than [`BATCH_WINDOW`] form one epoch. Between epochs
//! the IMU stream is integrated piecewise, each sample held until the next
//! one; an epoch that falls between two samples splits the interval.

use nalgebra::DMatrix;

use crate::eskf::{Eskf, EskfConfig, EskfError};
use crate::factors::Measurement;
use crate::lie::{so3_log, Mat3, Rotation, Vec3};
use crate::preint::{ImuNoise, ImuSample, PreintegratedImu};
use crate::smoother::{FixedLagSmoother, SmootherConfig, BATCH_WINDOW};
use crate::state::{NavState, POS, ROT};

use super::{GeneratedScenario, TruthState};

/// Position error beyond which a run is declared diverged, metres.
pub const DIVERGENCE_LIMIT: f64 = 1e4;

#[derive(Clone, Debug)]
pub enum EstimatorConfig {
    Fgo(SmootherConfig),
    Eskf(EskfConfig),
}

#[derive(Clone, Debug)]
pub struct Initialization {
    pub state: NavState,
    pub covariance: DMatrix<f64>,
    pub imu_noise: ImuNoise,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub time: f64,
    pub truth: TruthState,
    pub estimate: NavState,
    /// 3σ of N, E, D (m) and roll, pitch, yaw (rad)
    pub sigma3: [f64; 6],
}

#[derive(Clone, Debug, Default)]
pub struct RunLog {
    pub records: Vec<EpochRecord>,
    pub diverged_at: Option<f64>,
    /// aiding measurements unusable at the current estimate
    pub skipped: usize,
    /// measurement components rejected by the natural test
    pub rejected: usize,
    /// ESKF updates skipped for a non-PD innovation covariance
    pub failed_updates: usize,
    /// smoother solves that hit the iteration limit
    pub unconverged_solves: usize,
}

/// Body-rate to Euler-rate map at the given attitude, used to express
/// tangent attitude errors as roll/pitch/yaw.
pub fn euler_rate_matrix(r: &Rotation) -> Mat3 {
    let (roll, pitch, _) = r.to_euler();
    let (sr, cr) = roll.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let tp = sp / cp;
    Mat3::new(1.0, sr * tp, cr * tp, 0.0, cr, -sr, 0.0, sr / cp, cr / cp)
}

/// Roll/pitch/yaw error of `estimate` against `truth`, radians.
pub fn attitude_error(estimate: &Rotation, truth: &Rotation) -> Vec3 {
    euler_rate_matrix(estimate) * so3_log(&(estimate.transpose() * *truth))
}

fn sigma3(state: &NavState, cov: &DMatrix<f64>) -> [f64; 6] {
    let r = *state.rotation().matrix();
    let p: Mat3 = cov.fixed_view::<3, 3>(POS, POS).into_owned();
    let p = r * p * r.transpose();
    let e = euler_rate_matrix(state.rotation());
    let a: Mat3 = cov.fixed_view::<3, 3>(ROT, ROT).into_owned();
    let a = e * a * e.transpose();
    let s = |v: f64| 3.0 * v.max(0.0).sqrt();
    [s(p[(0, 0)]), s(p[(1, 1)]), s(p[(2, 2)]), s(a[(0, 0)]), s(a[(1, 1)]), s(a[(2, 2)])]
}

/// Calls `f(sample, dt)` for every piece of the IMU stream covering
/// `[from, to)`. Before the first sample and after the last, the nearest
/// sample is held.
pub fn for_each_imu_piece(imu: &[ImuSample], from: f64, to: f64, mut f: impl FnMut(&ImuSample, f64)) {
    if imu.is_empty() || to <= from {
        return;
    }
    let eps = 1e-9;
    let mut k = imu.partition_point(|s| s.timestamp <= from + eps).saturating_sub(1);
    let mut t = from;
    while t < to - eps {
        let next = imu.get(k + 1).map_or(f64::INFINITY, |s| s.timestamp);
        if next <= t + eps {
            k += 1;
            continue;
        }
        let end = next.min(to);
        f(&imu[k], end - t);
        t = end;
    }
}

fn batches(aiding: &[Measurement], start: f64) -> Vec<(f64, Vec<Measurement>)> {
    let mut out: Vec<(f64, Vec<Measurement>)> = Vec::new();
    for m in aiding.iter().filter(|m| m.timestamp() > start + 1e-9) {
        match out.last_mut() {
            Some((t, ms)) if m.timestamp() - *t <= BATCH_WINDOW => ms.push(*m),
            _ => out.push((m.timestamp(), vec![*m])),
        }
    }
    out
}

fn diverged(est: &NavState, truth: &TruthState) -> bool {
    let e = (est.position() - truth.position).norm();
    !(e <= DIVERGENCE_LIMIT) || !est.is_finite()
}

/// Runs one estimator from `init` to the end of the scenario, logging at
/// every aiding epoch.
pub fn run_scenario(scenario: &GeneratedScenario, estimator: &EstimatorConfig, init: &Initialization) -> RunLog {
    let feed = scenario.feed();
    let epochs = batches(&feed.aiding, init.state.timestamp);
    let mut log = RunLog::default();
    match estimator {
        EstimatorConfig::Eskf(cfg) => {
            let mut cfg = cfg.clone();
            cfg.noise = init.imu_noise;
            let mut f = match Eskf::new(cfg, init.state, init.covariance.clone()) {
                Ok(f) => f,
                Err(_) => {
                    log.diverged_at = Some(init.state.timestamp);
                    return log;
                }
            };
            let mut t = init.state.timestamp;
            for (te, ms) in epochs {
                let mut bad = false;
                for_each_imu_piece(feed.imu, t, te, |s, dt| bad |= f.propagate(s, dt).is_err());
                t = te;
                for m in &ms {
                    match f.update_measurement(m) {
                        Ok(o) if !o.usable => log.skipped += 1,
                        Ok(o) => log.rejected += o.rejected_count(),
                        Err(EskfError::NotPositiveDefinite) => log.failed_updates += 1,
                        Err(_) => bad = true,
                    }
                }
                let truth = scenario.trajectory.at(te);
                let est = *f.nominal();
                log.records.push(EpochRecord {
                    time: te,
                    truth,
                    estimate: est,
                    sigma3: sigma3(&est, f.covariance()),
                });
                if bad || diverged(&est, &truth) {
                    log.diverged_at = Some(te);
                    break;
                }
            }
        }
        EstimatorConfig::Fgo(cfg) => {
            let mut s = match FixedLagSmoother::new(cfg.clone(), init.state, &init.covariance) {
                Ok(s) => s,
                Err(_) => {
                    log.diverged_at = Some(init.state.timestamp);
                    return log;
                }
            };
            let mut t = init.state.timestamp;
            for (te, ms) in epochs {
                let mut pre = PreintegratedImu::new(s.newest().bias, init.imu_noise);
                let mut bad = false;
                for_each_imu_piece(feed.imu, t, te, |smp, dt| bad |= pre.integrate(smp, dt).is_err());
                let truth = scenario.trajectory.at(te);
                if bad || pre.delta_time <= 0.0 {
                    log.diverged_at = Some(te);
                    break;
                }
                t = te;
                match s.add_keyframe(&pre, &ms) {
                    Ok((_, skipped)) => log.skipped += skipped,
                    Err(_) => {
                        log.diverged_at = Some(te);
                        break;
                    }
                }
                let report = s.optimize();
                if !report.converged {
                    log.unconverged_solves += 1;
                }
                s.marginalize(te);
                let (est, cov) = s.current_estimate().expect("optimized");
                log.records.push(EpochRecord {
                    time: te,
                    truth,
                    estimate: est,
                    sigma3: sigma3(&est, &cov),
                });
                if diverged(&est, &truth) {
                    log.diverged_at = Some(te);
                    break;
                }
            }
        }
    }
    log
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream(n: usize, dt: f64) -> Vec<ImuSample> {
        (0..n)
            .map(|k| ImuSample::new(k as f64 * dt, Vec3::new(k as f64, 0.0, 0.0), Vec3::zeros()))
            .collect()
    }

    #[test]
    fn pieces_cover_interval_exactly() {
        let imu = stream(10, 0.1);
        let mut pieces = Vec::new();
        for_each_imu_piece(&imu, 0.05, 0.37, |s, dt| pieces.push((s.specific_force.x, dt)));
        let total: f64 = pieces.iter().map(|p| p.1).sum();
        assert!((total - 0.32).abs() < 1e-12);
        let ids: Vec<f64> = pieces.iter().map(|p| p.0).collect();
        assert_eq!(ids, vec![0.0, 1.0, 2.0, 3.0]);
        assert!((pieces[0].1 - 0.05).abs() < 1e-12);
        assert!((pieces[3].1 - 0.07).abs() < 1e-12);
    }

    #[test]
    fn pieces_hold_last_sample() {
        let imu = stream(3, 0.1);
        let mut pieces = Vec::new();
        for_each_imu_piece(&imu, 0.15, 0.5, |s, dt| pieces.push((s.specific_force.x, dt)));
        assert_eq!(pieces.len(), 2);
        assert_eq!(pieces[1].0, 2.0);
        assert!((pieces[1].1 - 0.3).abs() < 1e-12);
    }

    #[test]
    fn batching_groups_within_window() {
        use crate::factors::{BaroMeasurement, RangeMeasurement};
        let r = |t: f64| Measurement::Range(RangeMeasurement { timestamp: t, range: 1.0, variance: 1.0 });
        let b = |t: f64| Measurement::Baro(BaroMeasurement { timestamp: t, pressure: 100.0, variance: 1.0 });
        let ms = vec![r(1.0), b(1.0005), r(1.2), b(2.0), r(2.0)];
        let out = batches(&ms, 0.5);
        assert_eq!(out.len(), 3);
        assert_eq!(out[0].1.len(), 2);
        assert_eq!(out[2].1.len(), 2);
        let late = batches(&ms, 1.0);
        assert_eq!(late.len(), 3);
        assert_eq!(late[0].1.len(), 1);
    }

    #[test]
    fn attitude_error_of_pure_yaw() {
        let t = Rotation::from_euler(0.0, 0.0, 0.3);
        let e = Rotation::from_euler(0.0, 0.0, 0.1);
        let err = attitude_error(&e, &t);
        assert!((err - Vec3::new(0.0, 0.0, 0.2)).norm() < 1e-12);
    }
}
