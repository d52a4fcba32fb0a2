//! Fixtures and oracles shared by the integration tests and the acceptance
//! suite. Each oracle returns its worst-case discrepancy so callers can both
//! assert on it and report it.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Rotation3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use parsnav::eskf::{strapdown, Eskf, EskfConfig};
use parsnav::factors::{
    altitude_to_pressure, aoa_factor, aoa_of, baro_factor, gnss_compass_factor, gnss_position_factor,
    nav_to_radio, range_factor, AoaMeasurement, BaroMeasurement, CompassBaseline, CompassMeasurement,
    GnssPosition, Measurement, RadioFrameConfig, RangeMeasurement,
};
use parsnav::lie::{so3_exp, so3_log, Pose, Rotation, Vec3};
use parsnav::preint::{GravityModel, ImuNoise, ImuSample, PreintegratedImu};
use parsnav::smoother::{
    BiasRandomWalk, BiasWalkFactor, Factor, FixedLagSmoother, ImuFactor, MeasurementFactor, PriorFactor,
    SmootherConfig,
};
use parsnav::state::{ImuBias, NavState, BARO, BIAS_ACC, ROT, VEL};

pub const FD_STEP: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform3(rng: &mut ChaCha8Rng, s: f64) -> Vec3 {
    Vec3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s))
}

pub fn gaussian3(rng: &mut ChaCha8Rng, s: f64) -> Vec3 {
    let n = Normal::new(0.0, s).expect("finite sigma");
    Vec3::new(n.sample(rng), n.sample(rng), n.sample(rng))
}

pub fn gaussian(rng: &mut ChaCha8Rng, s: f64) -> f64 {
    Normal::new(0.0, s).expect("finite sigma").sample(rng)
}

pub fn random_rotation(rng: &mut ChaCha8Rng) -> Rotation {
    let axis = loop {
        let a = uniform3(rng, 1.0);
        if a.norm() > 0.1 {
            break a.normalize();
        }
    };
    so3_exp(&(axis * rng.random_range(0.0..3.0)))
}

pub fn random_radio(rng: &mut ChaCha8Rng) -> RadioFrameConfig {
    RadioFrameConfig {
        rotation: so3_exp(&uniform3(rng, 0.3)),
        lever_arm: uniform3(rng, 5.0),
    }
}

/// A state at a usable distance from the radio, away from the azimuth cut.
pub fn random_state(rng: &mut ChaCha8Rng, radio: &RadioFrameConfig, with_baro: bool) -> NavState {
    let p = loop {
        let p = Vec3::new(
            rng.random_range(-60.0..60.0),
            rng.random_range(-60.0..60.0),
            rng.random_range(-30.0..-2.0),
        );
        let r = nav_to_radio(&p, radio);
        if r.x.hypot(r.y) > 5.0 && r.y.atan2(r.x).abs() < 3.0 {
            break p;
        }
    };
    let s = NavState::new(
        Pose::new(random_rotation(rng), p),
        uniform3(rng, 3.0),
        ImuBias::new(uniform3(rng, 0.2), uniform3(rng, 0.02)),
        0.0,
    );
    if with_baro {
        s.with_baro_bias(rng.random_range(-3.0..3.0))
    } else {
        s
    }
}

/// Central differences of `f` under right perturbations of every tangent
/// coordinate of `x`.
pub fn numeric_jacobian(x: &NavState, dim: usize, f: impl Fn(&NavState) -> DVector<f64>) -> DMatrix<f64> {
    let m = f(x).len();
    let mut j = DMatrix::zeros(m, dim);
    let mut d = vec![0.0; dim];
    for k in 0..dim {
        d[k] = FD_STEP;
        let plus = f(&x.retract(&d));
        d[k] = -FD_STEP;
        let minus = f(&x.retract(&d));
        d[k] = 0.0;
        j.set_column(k, &((plus - minus) / (2.0 * FD_STEP)));
    }
    j
}

pub fn relative_error(analytic: &DMatrix<f64>, numeric: &DMatrix<f64>) -> f64 {
    let scale = analytic.norm().max(numeric.norm()).max(1e-12);
    (analytic - numeric).norm() / scale
}

/// `max |a − b| / √(a_ii a_jj)`: covariance gap in correlation units.
pub fn scaled_gap(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            let s = (a[(i, i)] * a[(j, j)]).sqrt().max(1e-300);
            worst = worst.max((a[(i, j)] - b[(i, j)]).abs() / s);
        }
    }
    worst
}

fn embed_pose(h_pose: &[f64], rows: usize, dim: usize) -> DMatrix<f64> {
    let mut h = DMatrix::zeros(rows, dim);
    for c in 0..6 {
        for r in 0..rows {
            h[(r, ROT + c)] = h_pose[c * rows + r];
        }
    }
    h
}

#[derive(Clone, Debug)]
pub struct JacobianStat {
    pub name: &'static str,
    pub states: usize,
    pub worst: f64,
}

fn stat(name: &'static str, errors: &[f64]) -> JacobianStat {
    JacobianStat {
        name,
        states: errors.len(),
        worst: errors.iter().copied().fold(0.0, f64::max),
    }
}

pub fn random_stream(rng: &mut ChaCha8Rng, n: usize, t0: f64) -> (Vec<ImuSample>, Vec<f64>) {
    let mut t = t0;
    let mut samples = Vec::with_capacity(n);
    let mut dts = Vec::with_capacity(n);
    for _ in 0..n {
        let dt = rng.random_range(0.004..0.006);
        let f = Vec3::new(0.0, 0.0, -9.81) + uniform3(rng, 3.0);
        samples.push(ImuSample::new(t, f, uniform3(rng, 1.5)));
        dts.push(dt);
        t += dt;
    }
    (samples, dts)
}

pub fn integrate(samples: &[ImuSample], dts: &[f64], bias: ImuBias, noise: ImuNoise) -> PreintegratedImu {
    let mut p = PreintegratedImu::new(bias, noise);
    for (s, dt) in samples.iter().zip(dts) {
        p.integrate(s, *dt).expect("positive dt");
    }
    p
}

/// Every analytic Jacobian of the aiding factors and of the IMU factor
/// against central differences, `n` random states each.
pub fn jacobian_suite(n: usize, seed: u64) -> Vec<JacobianStat> {
    let mut rng = rng(seed);
    let mut gnss = Vec::new();
    let mut compass = Vec::new();
    let mut aoa = Vec::new();
    let mut range = Vec::new();
    let mut baro = Vec::new();
    let mut imu_i = Vec::new();
    let mut imu_j = Vec::new();
    let mut bias_jac = Vec::new();
    let gravity = GravityModel::default();

    for _ in 0..n {
        let radio = random_radio(&mut rng);
        let x = random_state(&mut rng, &radio, false);

        let z = x.position() + gaussian3(&mut rng, 0.5);
        let a = -embed_pose(gnss_position_factor(&x, &z).h_pose.as_slice(), 3, 15);
        let num = numeric_jacobian(&x, 15, |s| {
            DVector::from_column_slice(gnss_position_factor(s, &z).residual.as_slice())
        });
        gnss.push(relative_error(&a, &num));

        let baseline = CompassBaseline(uniform3(&mut rng, 1.0) + Vec3::new(1.0, 0.0, 0.0));
        let z = x.rotation().matrix() * baseline.0 + gaussian3(&mut rng, 0.05);
        let a = -embed_pose(gnss_compass_factor(&x, &z, &baseline).h_pose.as_slice(), 3, 15);
        let num = numeric_jacobian(&x, 15, |s| {
            DVector::from_column_slice(gnss_compass_factor(s, &z, &baseline).residual.as_slice())
        });
        compass.push(relative_error(&a, &num));

        let (az, el) = aoa_of(&nav_to_radio(x.position(), &radio));
        let z = AoaMeasurement {
            timestamp: 0.0,
            azimuth: az + gaussian(&mut rng, 0.05),
            elevation: el + gaussian(&mut rng, 0.05),
            noise_cov: Matrix2::identity() * 0.05f64.powi(2),
        };
        let inn = aoa_factor(&x, &z, &radio, 0.5).expect("usable geometry");
        let a = -embed_pose(inn.h_pose.as_slice(), 2, 15);
        let num = numeric_jacobian(&x, 15, |s| {
            let r = aoa_factor(s, &z, &radio, 0.5).expect("usable geometry").residual;
            DVector::from_column_slice(r.as_slice())
        });
        aoa.push(relative_error(&a, &num));

        let z = RangeMeasurement {
            timestamp: 0.0,
            range: nav_to_radio(x.position(), &radio).norm() + gaussian(&mut rng, 0.5),
            variance: 0.25,
        };
        let inn = range_factor(&x, &z, &radio, 0.5).expect("usable geometry");
        let a = -embed_pose(inn.h_pose.as_slice(), 1, 15);
        let num = numeric_jacobian(&x, 15, |s| {
            DVector::from_element(1, range_factor(s, &z, &radio, 0.5).expect("usable geometry").residual[0])
        });
        range.push(relative_error(&a, &num));

        let xb = x.with_baro_bias(rng.random_range(-3.0..3.0));
        let z = BaroMeasurement {
            timestamp: 0.0,
            pressure: altitude_to_pressure(-xb.position().z + xb.baro_bias.unwrap_or(0.0) + gaussian(&mut rng, 0.5)),
            variance: 0.25,
        };
        let inn = baro_factor(&xb, xb.baro_bias.unwrap_or(0.0), &z).expect("positive pressure");
        let mut a = -embed_pose(inn.h_pose.as_slice(), 1, 16);
        a[(0, BARO)] = -inn.h_bias;
        let num = numeric_jacobian(&xb, 16, |s| {
            let r = baro_factor(s, s.baro_bias.unwrap_or(0.0), &z).expect("positive pressure");
            DVector::from_element(1, r.residual)
        });
        baro.push(relative_error(&a, &num));

        // IMU factor between x and a perturbed prediction, with the state
        // bias away from the linearization bias
        let lin_bias = ImuBias::new(uniform3(&mut rng, 0.2), uniform3(&mut rng, 0.02));
        let (samples, dts) = random_stream(&mut rng, 100, 0.0);
        let noise = ImuNoise::default();
        let p = integrate(&samples, &dts, lin_bias, noise);
        let mut xi = x;
        xi.bias = ImuBias::new(
            lin_bias.accel + uniform3(&mut rng, 1e-2),
            lin_bias.gyro + uniform3(&mut rng, 1e-3),
        );
        let jitter: Vec<f64> = (0..15).map(|_| rng.random_range(-0.05..0.05)).collect();
        let xj = p.predict(&xi, &gravity).retract(&jitter);
        let r = p.residual_and_jacobians(&xi, &xj, &gravity);
        let mut ai = DMatrix::zeros(9, 15);
        ai.view_mut((0, ROT), (9, 6)).copy_from(&r.d_pose_i);
        ai.view_mut((0, VEL), (9, 3)).copy_from(&r.d_vel_i);
        ai.view_mut((0, BIAS_ACC), (9, 6)).copy_from(&r.d_bias_i);
        let num = numeric_jacobian(&xi, 15, |s| {
            DVector::from_column_slice(p.residual_and_jacobians(s, &xj, &gravity).residual.as_slice())
        });
        imu_i.push(relative_error(&ai, &num));
        let mut aj = DMatrix::zeros(9, 15);
        aj.view_mut((0, ROT), (9, 6)).copy_from(&r.d_pose_j);
        aj.view_mut((0, VEL), (9, 3)).copy_from(&r.d_vel_j);
        let num = numeric_jacobian(&xj, 15, |s| {
            DVector::from_column_slice(p.residual_and_jacobians(&xi, s, &gravity).residual.as_slice())
        });
        imu_j.push(relative_error(&aj, &num));

        // bias Jacobian of the deltas against re-integration
        let deltas = |b: &ImuBias| {
            let q = integrate(&samples, &dts, *b, noise);
            (q.delta_rotation, q.delta_velocity, q.delta_position)
        };
        let (r0, _, _) = deltas(&lin_bias);
        let mut num = DMatrix::zeros(9, 6);
        for k in 0..6 {
            let shift = |h: f64| {
                let mut b = lin_bias;
                if k < 3 {
                    b.accel[k] += h;
                } else {
                    b.gyro[k - 3] += h;
                }
                b
            };
            let (rp, vp, pp) = deltas(&shift(FD_STEP));
            let (rm, vm, pm) = deltas(&shift(-FD_STEP));
            let rot = (so3_log(&(r0.transpose() * rp)) - so3_log(&(r0.transpose() * rm))) / (2.0 * FD_STEP);
            let vel = (vp - vm) / (2.0 * FD_STEP);
            let pos = (pp - pm) / (2.0 * FD_STEP);
            for i in 0..3 {
                num[(i, k)] = rot[i];
                num[(i + 3, k)] = vel[i];
                num[(i + 6, k)] = pos[i];
            }
        }
        let a = DMatrix::from_column_slice(9, 6, p.bias_jacobian.as_slice());
        bias_jac.push(relative_error(&a, &num));
    }

    vec![
        stat("gnss position", &gnss),
        stat("gnss compass", &compass),
        stat("aoa", &aoa),
        stat("range", &range),
        stat("barometer", &baro),
        stat("imu residual, state i", &imu_i),
        stat("imu residual, state j", &imu_j),
        stat("preintegration bias jacobian", &bias_jac),
    ]
}

/// Direct strapdown with nalgebra rotations: rotation by the full-step
/// increment, velocity with the mid-step attitude, trapezoidal position.
pub fn reference_strapdown(x0: &NavState, samples: &[ImuSample], dts: &[f64], g: &Vec3) -> (Matrix3<f64>, Vec3, Vec3) {
    let mut r = Rotation3::from_matrix_unchecked(*x0.rotation().matrix());
    let mut v = x0.velocity;
    let mut p = *x0.position();
    for (s, dt) in samples.iter().zip(dts) {
        let w = s.angular_rate - x0.bias.gyro;
        let f = s.specific_force - x0.bias.accel;
        let half = Rotation3::from_scaled_axis(w * (0.5 * dt));
        let v_next = v + ((r * half) * f + g) * *dt;
        p += (v + v_next) * (0.5 * dt);
        v = v_next;
        r *= Rotation3::from_scaled_axis(w * *dt);
    }
    (*r.matrix(), v, p)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct PreintOracle {
    pub position: f64,
    pub rotation: f64,
    pub velocity: f64,
    pub chaining: f64,
}

/// `predict` against [`reference_strapdown`] and split-and-append against
/// one pass, on a 500-sample random stream.
pub fn preintegration_oracle(seed: u64) -> PreintOracle {
    let mut rng = rng(seed);
    let radio = RadioFrameConfig::default();
    let x0 = random_state(&mut rng, &radio, false);
    let (samples, dts) = random_stream(&mut rng, 500, 0.0);
    let gravity = GravityModel::default();
    let whole = integrate(&samples, &dts, x0.bias, ImuNoise::default());
    let pred = whole.predict(&x0, &gravity);
    let (r, v, p) = reference_strapdown(&x0, &samples, &dts, &gravity.vector);

    let rot = so3_log(&Rotation::from_matrix_unchecked(pred.rotation().matrix().transpose() * r)).norm();

    let k = rng.random_range(50..450);
    let a = integrate(&samples[..k], &dts[..k], x0.bias, ImuNoise::default());
    let b = integrate(&samples[k..], &dts[k..], x0.bias, ImuNoise::default());
    let joined = a.append(&b);
    let rel = |x: f64, scale: f64| x / scale.max(1.0);
    let chained = b.predict(&a.predict(&x0, &gravity), &gravity);
    let gaps = [
        so3_log(&(whole.delta_rotation.transpose() * joined.delta_rotation)).norm(),
        rel((whole.delta_velocity - joined.delta_velocity).norm(), whole.delta_velocity.norm()),
        rel((whole.delta_position - joined.delta_position).norm(), whole.delta_position.norm()),
        rel((whole.covariance - joined.covariance).norm(), whole.covariance.norm()),
        rel((whole.bias_jacobian - joined.bias_jacobian).norm(), whole.bias_jacobian.norm()),
        (whole.delta_time - joined.delta_time).abs(),
        rel((chained.position() - pred.position()).norm(), pred.position().norm()),
        rel((chained.velocity - pred.velocity).norm(), pred.velocity.norm()),
        so3_log(&(pred.rotation().transpose() * *chained.rotation())).norm(),
    ];

    PreintOracle {
        position: (pred.position() - p).norm(),
        rotation: rot,
        velocity: (pred.velocity - v).norm(),
        chaining: gaps.iter().copied().fold(0.0, f64::max),
    }
}

/// Keyframe interval of a shared estimation problem.
#[derive(Clone, Debug)]
pub struct Interval {
    pub samples: Vec<ImuSample>,
    pub measurements: Vec<Measurement>,
    pub truth: NavState,
}

/// A short trajectory with every aiding type at each keyframe, shared by the
/// smoother, the ESKF and a dense batch solver.
#[derive(Clone, Debug)]
pub struct Problem {
    pub noise: ImuNoise,
    pub walk: BiasRandomWalk,
    pub radio: RadioFrameConfig,
    pub baseline: CompassBaseline,
    pub gravity: GravityModel,
    pub dt: f64,
    pub truth0: NavState,
    pub prior_mean: NavState,
    pub prior_cov: DMatrix<f64>,
    pub intervals: Vec<Interval>,
}

pub struct ProblemShape {
    pub keyframes: usize,
    pub samples_per_keyframe: usize,
    /// measurement noise is added when true; zero residuals otherwise
    pub noisy: bool,
    pub walk: BiasRandomWalk,
}

/// Tight enough that holding the bias over a keyframe matches walking it
/// per sample; used where the ESKF is compared.
pub const TIGHT_WALK: BiasRandomWalk = BiasRandomWalk {
    accel: 1e-4,
    gyro: 1e-5,
    baro: 1e-4,
};

/// Keeps the window Hessian well conditioned for the oracles that invert it.
pub const LOOSE_WALK: BiasRandomWalk = BiasRandomWalk {
    accel: 0.05,
    gyro: 5e-3,
    baro: 0.05,
};

impl Problem {
    pub fn new(seed: u64, shape: ProblemShape) -> Self {
        let mut rng = rng(seed);
        let dt = 0.005;
        let noise = ImuNoise {
            accel_density: 0.2,
            gyro_density: 0.01,
        };
        let walk = shape.walk;
        let radio = random_radio(&mut rng);
        let baseline = CompassBaseline(Vec3::new(1.0, 0.2, 0.0));
        let gravity = GravityModel::default();
        let truth0 = NavState::new(
            Pose::new(so3_exp(&uniform3(&mut rng, 0.5)), Vec3::new(30.0, 20.0, -10.0) + uniform3(&mut rng, 5.0)),
            Vec3::new(1.0, 0.5, 0.0) + uniform3(&mut rng, 0.5),
            ImuBias::new(uniform3(&mut rng, 0.05), uniform3(&mut rng, 0.005)),
            0.0,
        )
        .with_baro_bias(1.5);

        let sig = [0.01, 0.01, 0.01, 0.5, 0.5, 0.5, 0.2, 0.2, 0.2, 0.05, 0.05, 0.05, 5e-3, 5e-3, 5e-3, 2.0];
        let prior_cov = DMatrix::from_diagonal(&DVector::from_iterator(16, sig.iter().map(|s| s * s)));
        let prior_mean = if shape.noisy {
            let d: Vec<f64> = sig.iter().map(|s| gaussian(&mut rng, *s)).collect();
            truth0.retract(&d)
        } else {
            truth0
        };

        let sd = |noisy: bool, s: f64, rng: &mut ChaCha8Rng| if noisy { gaussian(rng, s) } else { 0.0 };
        let mut x = truth0;
        let mut t = 0.0;
        let mut intervals = Vec::new();
        for _ in 0..shape.keyframes {
            let mut samples = Vec::new();
            for _ in 0..shape.samples_per_keyframe {
                let f = -x.rotation().transpose().matrix() * gravity.vector + uniform3(&mut rng, 1.0) + x.bias.accel;
                let w = uniform3(&mut rng, 0.3) + x.bias.gyro;
                let s = ImuSample::new(t, f, w);
                x = strapdown(&x, &s, dt, &gravity);
                samples.push(s);
                t += dt;
            }
            let ts = x.timestamp;
            let n = shape.noisy;
            let p = *x.position();
            let (az, el) = aoa_of(&nav_to_radio(&p, &radio));
            let measurements = vec![
                Measurement::Gnss(GnssPosition {
                    timestamp: ts,
                    position: p + Vec3::new(sd(n, 0.3, &mut rng), sd(n, 0.3, &mut rng), sd(n, 0.3, &mut rng)),
                    covariance: Matrix3::identity() * 0.09,
                }),
                Measurement::Compass(CompassMeasurement {
                    timestamp: ts,
                    vector: x.rotation().matrix() * baseline.0
                        + Vec3::new(sd(n, 0.02, &mut rng), sd(n, 0.02, &mut rng), sd(n, 0.02, &mut rng)),
                    covariance: Matrix3::identity() * 4e-4,
                }),
                Measurement::Aoa(AoaMeasurement {
                    timestamp: ts,
                    azimuth: az + sd(n, 0.05, &mut rng),
                    elevation: el + sd(n, 0.05, &mut rng),
                    noise_cov: Matrix2::identity() * 2.5e-3,
                }),
                Measurement::Range(RangeMeasurement {
                    timestamp: ts,
                    range: nav_to_radio(&p, &radio).norm() + sd(n, 0.5, &mut rng),
                    variance: 0.25,
                }),
                Measurement::Baro(BaroMeasurement {
                    timestamp: ts,
                    pressure: altitude_to_pressure(-p.z + 1.5 + sd(n, 0.3, &mut rng)),
                    variance: 0.09,
                }),
            ];
            intervals.push(Interval {
                samples,
                measurements,
                truth: x,
            });
        }
        Self {
            noise,
            walk,
            radio,
            baseline,
            gravity,
            dt,
            truth0,
            prior_mean,
            prior_cov,
            intervals,
        }
    }

    pub fn smoother_config(&self, lag: f64) -> SmootherConfig {
        SmootherConfig {
            lag,
            gravity: self.gravity,
            bias_walk: self.walk,
            radio: self.radio,
            compass_baseline: self.baseline,
            ..SmootherConfig::default()
        }
    }

    /// Iterates to the optimum rather than to the default cost tolerance.
    pub fn converged_config(&self, lag: f64) -> SmootherConfig {
        SmootherConfig {
            relative_cost_tol: 1e-15,
            step_tol: 1e-13,
            ..self.smoother_config(lag)
        }
    }

    pub fn eskf_config(&self) -> EskfConfig {
        EskfConfig {
            gravity: self.gravity,
            noise: self.noise,
            bias_walk: self.walk,
            gate: None,
            radio: self.radio,
            compass_baseline: self.baseline,
            ..EskfConfig::default()
        }
    }

    /// Preintegrations of every interval, all about the prior-mean bias.
    pub fn preintegrations(&self) -> Vec<PreintegratedImu> {
        self.intervals
            .iter()
            .map(|iv| {
                let dts = vec![self.dt; iv.samples.len()];
                integrate(&iv.samples, &dts, self.prior_mean.bias, self.noise)
            })
            .collect()
    }

    /// Feeds every interval to a smoother, optimizing after each keyframe.
    pub fn run_smoother(&self, lag: f64) -> FixedLagSmoother {
        self.run_smoother_with(self.smoother_config(lag))
    }

    pub fn run_smoother_with(&self, config: SmootherConfig) -> FixedLagSmoother {
        let mut s = FixedLagSmoother::new(config, self.prior_mean, &self.prior_cov)
            .expect("valid prior");
        for (p, iv) in self.preintegrations().iter().zip(&self.intervals) {
            s.add_keyframe(p, &iv.measurements).expect("ordered keyframe");
            s.optimize();
        }
        s
    }
}

/// Same factors as the smoother builds, solved by dense Gauss-Newton.
pub struct DenseBatch {
    pub states: Vec<NavState>,
    pub covariance: DMatrix<f64>,
    pub dim: usize,
}

pub fn dense_batch(problem: &Problem) -> DenseBatch {
    let cfg = problem.smoother_config(1e9);
    let dim = problem.prior_mean.tangent_dim();
    let mut factors: Vec<Box<dyn Factor>> = vec![Box::new(
        PriorFactor::new(0, problem.prior_mean, &problem.prior_cov).expect("valid prior"),
    )];
    let mut states = vec![problem.prior_mean];
    for (k, (p, iv)) in problem.preintegrations().into_iter().zip(&problem.intervals).enumerate() {
        let (i, j) = (k as u64, k as u64 + 1);
        let mut next = p.predict(states.last().expect("non-empty"), &problem.gravity);
        next.timestamp = iv.truth.timestamp;
        states.push(next);
        factors.push(Box::new(BiasWalkFactor::new(i, j, &problem.walk, p.delta_time)));
        factors.push(Box::new(ImuFactor::new(i, j, p, problem.gravity)));
        for m in &iv.measurements {
            factors.push(Box::new(MeasurementFactor::new(j, *m, &cfg)));
        }
    }

    let n = states.len() * dim;
    let system = |states: &[NavState]| {
        let mut h = DMatrix::<f64>::zeros(n, n);
        let mut g = DVector::<f64>::zeros(n);
        for f in &factors {
            let keys: Vec<usize> = f.keys().iter().map(|k| *k as usize).collect();
            let refs: Vec<&NavState> = keys.iter().map(|&k| &states[k]).collect();
            let w = f.linearize(&refs, dim).expect("usable factor");
            let mut jac = DMatrix::zeros(w.error.len(), n);
            for (k, jk) in keys.iter().zip(&w.jacobians) {
                jac.view_mut((0, k * dim), (w.error.len(), dim)).copy_from(jk);
            }
            h += jac.transpose() * &jac;
            g += jac.transpose() * &w.error;
        }
        (h, g)
    };

    for _ in 0..30 {
        let (h, g) = system(&states);
        let step = -h.cholesky().expect("positive definite").solve(&g);
        for (k, s) in states.iter_mut().enumerate() {
            *s = s.retract(step.rows(k * dim, dim).as_slice());
        }
        if step.amax() < 1e-13 {
            break;
        }
    }
    let (h, _) = system(&states);
    DenseBatch {
        covariance: h.cholesky().expect("positive definite").inverse(),
        states,
        dim,
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Gap {
    /// estimate difference in units of the reference standard deviation
    pub state: f64,
    /// covariance difference in correlation units
    pub covariance: f64,
}

fn state_gap(reference: &NavState, other: &NavState, cov: &DMatrix<f64>) -> f64 {
    let dim = cov.nrows();
    let (d, _) = reference.local(other, dim);
    (0..dim).map(|i| d[i].abs() / cov[(i, i)].sqrt()).fold(0.0, f64::max)
}

/// Smoother (no marginalization) against the dense batch solve.
pub fn smoother_vs_dense(seed: u64) -> Gap {
    let problem = Problem::new(
        seed,
        ProblemShape {
            keyframes: 10,
            samples_per_keyframe: 20,
            noisy: true,
            walk: LOOSE_WALK,
        },
    );
    let smoother = problem.run_smoother_with(problem.converged_config(1e9));
    let dense = dense_batch(&problem);
    let report = smoother.last_report().expect("optimized");
    let d = dense.dim;
    let mut gap = Gap::default();
    for (k, (id, cov)) in report.node_covariances.iter().enumerate() {
        let reference = dense.covariance.view((k * d, k * d), (d, d)).into_owned();
        let s = smoother.state(*id).expect("node in window");
        gap.state = gap.state.max(state_gap(&dense.states[k], s, &reference));
        gap.covariance = gap.covariance.max(scaled_gap(&reference, cov));
    }
    gap
}

/// ESKF posterior against the smoother's newest-node marginal on a problem
/// with exact measurements, where both linearize at the truth.
pub fn eskf_vs_smoother(seed: u64) -> Gap {
    let problem = Problem::new(
        seed,
        ProblemShape {
            keyframes: 10,
            samples_per_keyframe: 40,
            noisy: false,
            walk: TIGHT_WALK,
        },
    );
    let smoother = problem.run_smoother(1e9);
    let (s_state, s_cov) = smoother.current_estimate().expect("optimized");

    let mut eskf = Eskf::new(problem.eskf_config(), problem.prior_mean, problem.prior_cov.clone()).expect("valid prior");
    for iv in &problem.intervals {
        for s in &iv.samples {
            eskf.propagate(s, problem.dt).expect("positive dt");
        }
        for m in &iv.measurements {
            eskf.update_measurement(m).expect("well-posed update");
        }
    }
    Gap {
        state: state_gap(eskf.nominal(), &s_state, eskf.covariance()),
        covariance: scaled_gap(eskf.covariance(), &s_cov),
    }
}

/// Joint covariance of the kept nodes before marginalization against the
/// window covariance after it, plus how far a re-solve moves them.
pub fn schur_vs_marginalization(seed: u64) -> Gap {
    let problem = Problem::new(
        seed,
        ProblemShape {
            keyframes: 12,
            samples_per_keyframe: 20,
            noisy: true,
            walk: LOOSE_WALK,
        },
    );
    // run_smoother_with never marginalizes, so the lag only matters below
    let mut smoother = problem.run_smoother_with(problem.converged_config(0.5));
    let before = smoother.joint_covariance().expect("invertible");
    let ids_before = smoother.node_ids();
    let states_before: Vec<NavState> = ids_before.iter().map(|id| *smoother.state(*id).expect("node")).collect();
    let now = smoother.newest().timestamp;
    smoother.marginalize(now);
    let after = smoother.joint_covariance().expect("invertible");
    let kept = smoother.node_ids();
    assert!(kept.len() < ids_before.len(), "nothing was marginalized");
    let offset = ids_before.len() - kept.len();
    let d = smoother.tangent_dim();
    let reference = before.view((offset * d, offset * d), (kept.len() * d, kept.len() * d)).into_owned();
    let mut gap = Gap {
        state: 0.0,
        covariance: scaled_gap(&reference, &after),
    };
    smoother.optimize();
    for (k, id) in kept.iter().enumerate() {
        let block = reference.view((k * d, k * d), (d, d)).into_owned();
        let s = smoother.state(*id).expect("kept node");
        gap.state = gap.state.max(state_gap(&states_before[offset + k], s, &block));
    }
    gap
}
