//! Quick invariant checks runnable from the command line.

use nalgebra::{DMatrix, DVector, Matrix2};

use crate::factors::{aoa_factor, pressure_to_altitude, AoaMeasurement, RadioFrameConfig};
use crate::lie::{so3_exp, so3_log, Pose, Vec3};
use crate::preint::{GravityModel, ImuNoise, ImuSample, PreintegratedImu};
use crate::robust::{natural_test, GateConfig, RobustKernel, TUKEY_95};
use crate::sim::ScenarioSpec;
use crate::state::{ImuBias, NavState};

use super::{execute, quest, EstimatorKind, EstimatorSpec, KernelKind, VectorPair};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
}

fn lie_round_trip() -> Check {
    let worst = (1..=20)
        .map(|k| {
            let w = Vec3::new(0.3, -0.7, 0.5) * (k as f64 * 0.15);
            (so3_log(&so3_exp(&w)) - w).norm()
        })
        .fold(0.0, f64::max);
    check("so3 log(exp(w)) = w", worst < 1e-10, format!("max error {worst:.2e}"))
}

fn preintegration_chain() -> Check {
    let noise = ImuNoise::default();
    let samples: Vec<ImuSample> = (0..40)
        .map(|k| {
            let t = k as f64 * 0.005;
            ImuSample::new(t, Vec3::new(0.2 * t, -0.1, -9.7), Vec3::new(0.1, 0.3 * t, -0.2))
        })
        .collect();
    let bias = ImuBias::zero();
    let mut whole = PreintegratedImu::new(bias, noise);
    let mut a = PreintegratedImu::new(bias, noise);
    let mut b = PreintegratedImu::new(bias, noise);
    for (k, s) in samples.iter().enumerate() {
        whole.integrate(s, 0.005).expect("positive dt");
        if k < 20 { &mut a } else { &mut b }.integrate(s, 0.005).expect("positive dt");
    }
    let g = GravityModel::default();
    let x0 = NavState::new(Pose::identity(), Vec3::new(1.0, 0.0, 0.0), bias, 0.0);
    let direct = whole.predict(&x0, &g);
    let chained = b.predict(&a.predict(&x0, &g), &g);
    let err = (direct.position() - chained.position()).norm();
    check("preintegration chaining", err < 1e-9, format!("position gap {err:.2e} m"))
}

fn kernels() -> Check {
    let tk = RobustKernel::Tukey { c: TUKEY_95 }.cost(10.0);
    let gm = RobustKernel::GemanMcClure { c: 1.0 }.cost(1.0);
    let ok = (tk - TUKEY_95 * TUKEY_95 / 6.0).abs() < 1e-12 && (gm - 0.25).abs() < 1e-12;
    check("kernel anchors", ok, format!("tukey saturation {tk:.4}, gm(1) {gm:.4}"))
}

fn gate() -> Check {
    let s = DMatrix::from_element(1, 1, 1.0);
    let cfg = GateConfig::default();
    let reject = natural_test(&DVector::from_element(1, 2.0), &s, &cfg).map(|v| !v[0]);
    let accept = natural_test(&DVector::from_element(1, 1.9), &s, &cfg).map(|v| v[0]);
    let ok = reject == Ok(true) && accept == Ok(true);
    check("natural test at k = 3.841", ok, "NIS 4.0 rejected, 3.61 accepted".into())
}

fn barometer() -> Check {
    let h = pressure_to_altitude(101.29).unwrap_or(f64::NAN);
    let top = pressure_to_altitude(80.0).unwrap_or(f64::NAN);
    let ok = (h - 9.245).abs() < 5e-3 && (top - 1958.0).abs() < 1.0;
    check("barometric altitude", ok, format!("101.29 kPa -> {h:.3} m, 80 kPa -> {top:.2} m"))
}

fn azimuth_wrap() -> Check {
    let cfg = RadioFrameConfig::default();
    let x = NavState::new(Pose::new(so3_exp(&Vec3::zeros()), Vec3::new(-30.0, -0.1, -10.0)), Vec3::zeros(), ImuBias::zero(), 0.0);
    let z = |az: f64| AoaMeasurement {
        timestamp: 0.0,
        azimuth: az,
        elevation: 0.3,
        noise_cov: Matrix2::identity(),
    };
    let r = |az: f64| aoa_factor(&x, &z(az), &cfg, 0.1).map(|i| i.residual[0]).unwrap_or(f64::NAN);
    let base = r(3.1);
    let gap = (r(3.1 + std::f64::consts::TAU) - base).abs().max((r(3.1 - std::f64::consts::TAU) - base).abs());
    check("azimuth residual wraps", gap < 1e-9, format!("residual {base:.4} rad, shift gap {gap:.1e}"))
}

fn quest_identity() -> Check {
    let pairs = [
        VectorPair::new(Vec3::x(), Vec3::x(), 1.0),
        VectorPair::new(Vec3::y(), Vec3::y(), 1.0),
    ];
    match quest(&pairs) {
        Ok(r) => {
            let e = so3_log(&r).norm();
            check("quest identity", e < 1e-12, format!("angle {e:.1e} rad"))
        }
        Err(e) => check("quest identity", false, e.to_string()),
    }
}

fn noiseless_run() -> Check {
    let spec = ScenarioSpec::preset("aoa-range", 30.0)
        .expect("preset exists")
        .noiseless();
    let est = EstimatorSpec::new(EstimatorKind::Eskf, KernelKind::None);
    match execute(&spec, &est, 0) {
        Ok(x) => {
            let worst = x
                .report
                .segments
                .iter()
                .filter_map(|s| s.rmse.map(|r| (r.n * r.n + r.e * r.e + r.d * r.d).sqrt()))
                .fold(0.0, f64::max);
            let ok = !x.report.diverged && worst < 0.05;
            check("noiseless 30 s ESKF run", ok, format!("worst segment position RMSE {worst:.4} m"))
        }
        Err(e) => check("noiseless 30 s ESKF run", false, e.to_string()),
    }
}

/// Runs every check.
pub fn run_all() -> Vec<Check> {
    vec![
        lie_round_trip(),
        preintegration_chain(),
        kernels(),
        gate(),
        barometer(),
        azimuth_wrap(),
        quest_identity(),
        noiseless_run(),
    ]
}
