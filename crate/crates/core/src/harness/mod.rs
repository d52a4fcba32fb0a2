//! Run configuration, initialization, execution and result export.
//!
//! A run is a pure function of its [`RunConfig`] and seed: the scenario is
//! generated, the estimator is initialized from the stationary lead-in,
//! driven through the sensor feed and evaluated segment by segment.

pub mod eval;
pub mod quest;
pub mod selftest;

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eskf::EskfConfig;
use crate::factors::Measurement;
use crate::lie::{Pose, Vec3};
use crate::robust::{GateConfig, RobustKernel, CHI2_1DOF_95, TUKEY_95};
use crate::sim::run::{run_scenario, EstimatorConfig, Initialization, RunLog};
use crate::sim::{GeneratedScenario, PostAiding, ScenarioSpec, SimError, PRESETS};
use crate::smoother::{tangent_dim, SmootherConfig};
use crate::state::{ImuBias, NavState, BARO, BIAS_ACC, BIAS_GYR, POS, ROT, VEL};

pub use eval::{evaluate, EpochError, EvaluationReport, ReportMeta, SegmentReport, SubstateRmse};
pub use quest::{quest, QuestError, VectorPair};

/// Seconds of stationary data used for the initial attitude, gyro bias and
/// position; inside the scenarios' stationary lead-in.
pub const INIT_WINDOW: f64 = 4.0;

/// Default length of a preset run, seconds.
pub const DEFAULT_DURATION: f64 = 300.0;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {field}: {message}")]
    Config { field: String, message: String },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("scenario: {0}")]
    Scenario(#[from] SimError),
    #[error("initialization: {0}")]
    Init(String),
    #[error("reports do not share a schedule: {0}")]
    ScheduleMismatch(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn config_error(field: &str, message: impl Into<String>) -> HarnessError {
    HarnessError::Config {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Fgo,
    Eskf,
}

/// Outlier handling: M-estimators belong to the smoother, the natural test
/// to the filter, `none` to either.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    None,
    Tukey,
    Gm,
    Nt,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioRef {
    /// built-in scenario name
    pub preset: Option<String>,
    /// scenario file, relative to the config file
    pub file: Option<PathBuf>,
    /// preset length in seconds
    pub duration: Option<f64>,
    pub imu_rate: Option<f64>,
    /// AoA outlier probability
    pub outlier_probability: Option<f64>,
    /// disables noise, biases and outliers
    pub noiseless: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSpec {
    pub kind: EstimatorKind,
    /// defaults to `none` for the smoother and `nt` for the filter
    #[serde(default)]
    pub kernel: Option<KernelKind>,
    #[serde(default)]
    pub kernel_bound: Option<f64>,
    #[serde(default)]
    pub gate_k: Option<f64>,
    #[serde(default)]
    pub lag: Option<f64>,
}

impl EstimatorSpec {
    pub fn new(kind: EstimatorKind, kernel: KernelKind) -> Self {
        Self {
            kind,
            kernel: Some(kernel),
            kernel_bound: None,
            gate_k: None,
            lag: None,
        }
    }

    pub fn kernel(&self) -> KernelKind {
        self.kernel.unwrap_or(match self.kind {
            EstimatorKind::Fgo => KernelKind::None,
            EstimatorKind::Eskf => KernelKind::Nt,
        })
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let kernel = self.kernel();
        match (self.kind, kernel) {
            (EstimatorKind::Fgo, KernelKind::Nt) => {
                return Err(config_error("estimator.kernel", "nt is a filter gate; use it with kind = \"eskf\""))
            }
            (EstimatorKind::Eskf, KernelKind::Tukey | KernelKind::Gm) => {
                return Err(config_error(
                    "estimator.kernel",
                    "M-estimators need the smoother; use kind = \"fgo\"",
                ))
            }
            _ => {}
        }
        if let Some(c) = self.kernel_bound {
            if !matches!(kernel, KernelKind::Tukey | KernelKind::Gm) {
                return Err(config_error("estimator.kernel_bound", "only valid with kernel tukey or gm"));
            }
            if !(c > 0.0 && c.is_finite()) {
                return Err(config_error("estimator.kernel_bound", "must be positive"));
            }
        }
        if let Some(k) = self.gate_k {
            if kernel != KernelKind::Nt {
                return Err(config_error("estimator.gate_k", "only valid with kernel nt"));
            }
            if !(k > 0.0 && k.is_finite()) {
                return Err(config_error("estimator.gate_k", "must be positive"));
            }
        }
        if let Some(l) = self.lag {
            if self.kind != EstimatorKind::Fgo {
                return Err(config_error("estimator.lag", "only valid with kind = \"fgo\""));
            }
            if !(l > 0.0 && l.is_finite()) {
                return Err(config_error("estimator.lag", "must be positive"));
            }
        }
        Ok(())
    }

    /// `FGO+None`, `FGO+TK`, `FGO+GM`, `ESKF+NT` or `ESKF+None`.
    pub fn label(&self) -> String {
        let k = match self.kernel() {
            KernelKind::None => "None",
            KernelKind::Tukey => "TK",
            KernelKind::Gm => "GM",
            KernelKind::Nt => "NT",
        };
        let e = match self.kind {
            EstimatorKind::Fgo => "FGO",
            EstimatorKind::Eskf => "ESKF",
        };
        format!("{e}+{k}")
    }

    fn robust_kernel(&self) -> RobustKernel {
        match self.kernel() {
            KernelKind::Tukey => RobustKernel::Tukey {
                c: self.kernel_bound.unwrap_or(TUKEY_95),
            },
            KernelKind::Gm => RobustKernel::GemanMcClure {
                c: self.kernel_bound.unwrap_or(1.0),
            },
            KernelKind::None | KernelKind::Nt => RobustKernel::None,
        }
    }

    /// Estimator configuration matched to the scenario's sensor geometry.
    pub fn estimator_config(&self, scenario: &ScenarioSpec) -> Result<EstimatorConfig, HarnessError> {
        self.validate()?;
        let baseline = scenario
            .sensors
            .baseline()
            .ok_or_else(|| config_error("sensors.compass_baseline", "must be non-zero"))?;
        let radio = scenario.sensors.radio.frame();
        Ok(match self.kind {
            EstimatorKind::Fgo => EstimatorConfig::Fgo(SmootherConfig {
                lag: self.lag.unwrap_or(2.0),
                kernel: self.robust_kernel(),
                radio,
                compass_baseline: baseline,
                ..SmootherConfig::default()
            }),
            EstimatorKind::Eskf => EstimatorConfig::Eskf(EskfConfig {
                noise: scenario.sensors.imu.noise(),
                gate: (self.kernel() == KernelKind::Nt).then(|| GateConfig {
                    k: self.gate_k.unwrap_or(CHI2_1DOF_95),
                }),
                radio,
                compass_baseline: baseline,
                ..EskfConfig::default()
            }),
        })
    }
}

/// One run: scenario, estimator, seed and output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub scenario: ScenarioRef,
    pub estimator: EstimatorSpec,
    /// directory the scenario file is resolved against
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn new(preset: &str, estimator: EstimatorSpec, seed: u64) -> Self {
        Self {
            seed,
            output: None,
            scenario: ScenarioRef {
                preset: Some(preset.into()),
                ..ScenarioRef::default()
            },
            estimator,
            base_dir: PathBuf::new(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let mut cfg = Self::from_toml(&fs::read_to_string(path)?)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let s = &self.scenario;
        match (&s.preset, &s.file) {
            (Some(_), Some(_)) => return Err(config_error("scenario", "give either preset or file, not both")),
            (None, None) => return Err(config_error("scenario", "needs a preset or a file")),
            (Some(p), None) if !PRESETS.contains(&p.as_str()) => {
                return Err(config_error("scenario.preset", format!("unknown preset {p:?}; expected one of {PRESETS:?}")))
            }
            (None, Some(_)) if s.duration.is_some() => {
                return Err(config_error("scenario.duration", "only valid with a preset"))
            }
            _ => {}
        }
        if let Some(d) = s.duration {
            if !(d > 0.0 && d.is_finite()) {
                return Err(config_error("scenario.duration", "must be positive"));
            }
        }
        if let Some(r) = s.imu_rate {
            if !(r > 0.0 && r.is_finite()) {
                return Err(config_error("scenario.imu_rate", "must be positive"));
            }
        }
        if let Some(p) = s.outlier_probability {
            if !(0.0..=1.0).contains(&p) {
                return Err(config_error("scenario.outlier_probability", "must lie in [0, 1]"));
            }
        }
        self.estimator.validate()
    }

    /// The scenario with every override applied.
    pub fn scenario(&self) -> Result<ScenarioSpec, HarnessError> {
        self.validate()?;
        let s = &self.scenario;
        let mut spec = match (&s.preset, &s.file) {
            (Some(p), _) => ScenarioSpec::preset(p, s.duration.unwrap_or(DEFAULT_DURATION))
                .ok_or_else(|| config_error("scenario.preset", "unknown preset"))?,
            (None, Some(f)) => ScenarioSpec::from_toml(&fs::read_to_string(self.base_dir.join(f))?)?,
            (None, None) => unreachable!("validated"),
        };
        if let Some(r) = s.imu_rate {
            spec = spec.with_imu_rate(r);
        }
        if let Some(p) = s.outlier_probability {
            spec = spec.with_outlier_probability(p);
        }
        if s.noiseless {
            spec = spec.noiseless();
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output.clone().unwrap_or_else(|| PathBuf::from("out"))
    }
}

/// Whether the estimator should carry a barometer bias.
pub fn uses_baro(spec: &ScenarioSpec) -> bool {
    spec.handover.pre.baro || spec.handover.post == PostAiding::AoaBaro
}

/// Initial state from the stationary lead-in: attitude by QUEST from the
/// mean specific force (gravity) and the compass baseline, gyro bias from
/// the mean angular rate, position from RTK. The accelerometer bias is not
/// separable from tilt here and starts at zero.
pub fn initialize(scenario: &GeneratedScenario) -> Result<Initialization, HarnessError> {
    let feed = scenario.feed();
    let window: Vec<_> = feed.imu.iter().filter(|s| s.timestamp < INIT_WINDOW).collect();
    if window.is_empty() {
        return Err(HarnessError::Init("no IMU samples in the stationary window".into()));
    }
    let n = window.len() as f64;
    let f = window.iter().map(|s| s.specific_force).sum::<Vec3>() / n;
    let w = window.iter().map(|s| s.angular_rate).sum::<Vec3>() / n;

    let early = feed.aiding.iter().filter(|m| m.timestamp() <= INIT_WINDOW + 1e-9);
    let mut compass = Vec3::zeros();
    let mut position = Vec3::zeros();
    let mut fixes = 0usize;
    for m in early {
        match m {
            Measurement::Compass(c) => compass += c.vector,
            Measurement::Gnss(g) => {
                position += g.position;
                fixes += 1;
            }
            _ => {}
        }
    }
    if fixes == 0 {
        return Err(HarnessError::Init("no RTK fix in the stationary window".into()));
    }
    if compass.norm() == 0.0 {
        return Err(HarnessError::Init("no compass measurement in the stationary window".into()));
    }
    let baseline = Vec3::from(scenario.spec.sensors.compass_baseline);
    // the averaged gravity direction is far more precise than one compass
    // fix, so it dominates the tilt and the compass mostly sets heading
    let rotation = quest(&[
        VectorPair::new(-Vec3::z(), f, 1.0),
        VectorPair::new(compass, baseline, 0.05),
    ])
    .map_err(|e| HarnessError::Init(e.to_string()))?;

    let mut state = NavState::new(
        Pose::new(rotation, position / fixes as f64),
        Vec3::zeros(),
        ImuBias::new(Vec3::zeros(), w),
        INIT_WINDOW,
    );
    let baro = uses_baro(&scenario.spec);
    if baro {
        state = state.with_baro_bias(0.0);
    }
    let dim = tangent_dim(baro);
    let mut cov = DMatrix::zeros(dim, dim);
    let mut set = |at: usize, sigma: f64, len: usize| {
        for i in at..at + len {
            cov[(i, i)] = sigma * sigma;
        }
    };
    set(ROT, 1.5f64.to_radians(), 3);
    set(POS, 0.05, 3);
    set(VEL, 0.05, 3);
    set(BIAS_ACC, 0.1, 3);
    set(BIAS_GYR, 2e-3, 3);
    if baro {
        set(BARO, 5.0, 1);
    }
    Ok(Initialization {
        state,
        covariance: cov,
        imu_noise: scenario.spec.sensors.imu.noise(),
    })
}

/// Everything a run produces, before anything is written.
#[derive(Clone, Debug)]
pub struct Execution {
    pub scenario: GeneratedScenario,
    pub log: RunLog,
    pub report: EvaluationReport,
}

/// Generates, initializes, runs and evaluates without touching the disk.
pub fn execute(spec: &ScenarioSpec, estimator: &EstimatorSpec, seed: u64) -> Result<Execution, HarnessError> {
    let config = estimator.estimator_config(spec)?;
    let scenario = spec.generate(seed)?;
    let init = initialize(&scenario)?;
    let log = run_scenario(&scenario, &config, &init);
    let meta = ReportMeta {
        label: estimator.label(),
        scenario: spec.name.clone(),
        seed,
        estimator: format!("{:?}", estimator.kind).to_lowercase(),
        kernel: format!("{:?}", estimator.kernel()).to_lowercase(),
    };
    let report = evaluate(&log, &spec.handover, meta);
    Ok(Execution { scenario, log, report })
}

/// Runs `config` and writes `epochs.csv`, `report.json`, `rmse_table.csv`
/// and the resolved `scenario.toml` into its output directory. A diverged
/// run still writes its partial artifacts; check [`EvaluationReport::diverged`].
pub fn run(config: &RunConfig) -> Result<EvaluationReport, HarnessError> {
    let spec = config.scenario()?;
    let exec = execute(&spec, &config.estimator, config.seed)?;
    let dir = config.output_dir();
    write_artifacts(&dir, &exec)?;
    Ok(exec.report)
}

pub fn write_artifacts(dir: &Path, exec: &Execution) -> Result<(), HarnessError> {
    fs::create_dir_all(dir)?;
    write_epochs_csv(io::BufWriter::new(fs::File::create(dir.join("epochs.csv"))?), exec)?;
    let json = serde_json::to_string_pretty(&exec.report).expect("report is always serializable");
    fs::write(dir.join("report.json"), json + "\n")?;
    let table = compare(std::slice::from_ref(&exec.report))?;
    fs::write(dir.join("rmse_table.csv"), table.to_csv())?;
    fs::write(dir.join("scenario.toml"), exec.scenario.spec.to_toml())?;
    Ok(())
}

const SUBSTATES: [&str; 6] = ["n", "e", "d", "roll", "pitch", "yaw"];

/// Per-epoch truth, estimate, error and 3σ. Positions and velocities in
/// metres (per second), angles in degrees.
pub fn write_epochs_csv<W: Write>(mut w: W, exec: &Execution) -> io::Result<()> {
    let mut header = String::from("time,segment");
    for group in ["true", "est"] {
        for c in ["n", "e", "d", "vn", "ve", "vd", "roll", "pitch", "yaw"] {
            let _ = write!(header, ",{group}_{c}");
        }
    }
    for group in ["err", "sigma3"] {
        for c in SUBSTATES {
            let _ = write!(header, ",{group}_{c}");
        }
    }
    writeln!(w, "{header}")?;
    let segments = &exec.scenario.spec.handover.segments;
    for (rec, err) in exec.log.records.iter().zip(&exec.report.series) {
        let mut line = format!("{:.8e},{}", rec.time, err.segment.map_or("", |i| segments[i].name.as_str()));
        let (tr, tp, ty) = rec.truth.rotation.to_euler();
        let (er, ep, ey) = rec.estimate.rotation().to_euler();
        let rows = [
            [rec.truth.position, rec.truth.velocity, Vec3::new(tr, tp, ty).map(f64::to_degrees)],
            [*rec.estimate.position(), rec.estimate.velocity, Vec3::new(er, ep, ey).map(f64::to_degrees)],
        ];
        for v in rows.iter().flatten().flat_map(|v| v.iter()) {
            let _ = write!(line, ",{v:.8e}");
        }
        for v in err.error.iter().chain(&err.sigma3) {
            let _ = write!(line, ",{v:.8e}");
        }
        writeln!(w, "{line}")?;
    }
    w.flush()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub segment: String,
    pub config: String,
    pub rmse: Option<SubstateRmse>,
}

/// RMSE table in blocks of configurations per segment.
#[derive(Clone, Debug, PartialEq)]
pub struct RmseTable {
    pub rows: Vec<TableRow>,
}

impl RmseTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("segment,config,n_m,e_m,d_m,roll_deg,pitch_deg,yaw_deg\n");
        for r in &self.rows {
            let _ = write!(out, "{},{}", r.segment, r.config);
            for k in 0..6 {
                match &r.rmse {
                    Some(v) => {
                        let _ = write!(out, ",{:.8e}", v.as_array()[k]);
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<8} {:<10} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}\n",
            "segment", "config", "N [m]", "E [m]", "D [m]", "roll [°]", "pitch [°]", "yaw [°]"
        );
        let mut last = "";
        for r in &self.rows {
            let seg = if r.segment == last { "" } else { r.segment.as_str() };
            last = &r.segment;
            let _ = write!(out, "{seg:<8} {:<10}", r.config);
            for k in 0..6 {
                match &r.rmse {
                    Some(v) => {
                        let _ = write!(out, " {:>9.3}", v.as_array()[k]);
                    }
                    None => {
                        let _ = write!(out, " {:>9}", "-");
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Side-by-side table of reports that share a schedule: for each segment,
/// one row per report in the given order.
pub fn compare(reports: &[EvaluationReport]) -> Result<RmseTable, HarnessError> {
    let Some(first) = reports.first() else {
        return Ok(RmseTable { rows: Vec::new() });
    };
    let key = |r: &EvaluationReport| -> Vec<(String, u64, u64)> {
        r.segments
            .iter()
            .map(|s| (s.name.clone(), s.start.to_bits(), s.end.to_bits()))
            .collect()
    };
    for r in &reports[1..] {
        if key(r) != key(first) || r.handover_time != first.handover_time {
            return Err(HarnessError::ScheduleMismatch(format!(
                "{} ({}) vs {} ({})",
                first.meta.label, first.meta.scenario, r.meta.label, r.meta.scenario
            )));
        }
    }
    let mut rows = Vec::new();
    for (i, seg) in first.segments.iter().enumerate() {
        for r in reports {
            rows.push(TableRow {
                segment: seg.name.clone(),
                config: r.meta.label.clone(),
                rmse: r.segments[i].rmse,
            });
        }
    }
    Ok(RmseTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::so3_log;

    #[test]
    fn kernel_legality() {
        let ok = [
            (EstimatorKind::Fgo, KernelKind::None),
            (EstimatorKind::Fgo, KernelKind::Tukey),
            (EstimatorKind::Fgo, KernelKind::Gm),
            (EstimatorKind::Eskf, KernelKind::Nt),
            (EstimatorKind::Eskf, KernelKind::None),
        ];
        for (e, k) in ok {
            assert!(EstimatorSpec::new(e, k).validate().is_ok());
        }
        for (e, k) in [
            (EstimatorKind::Fgo, KernelKind::Nt),
            (EstimatorKind::Eskf, KernelKind::Tukey),
            (EstimatorKind::Eskf, KernelKind::Gm),
        ] {
            let err = EstimatorSpec::new(e, k).validate().unwrap_err().to_string();
            assert!(err.contains("estimator.kernel"), "{err}");
        }
        let mut s = EstimatorSpec::new(EstimatorKind::Eskf, KernelKind::Nt);
        s.lag = Some(2.0);
        assert!(s.validate().unwrap_err().to_string().contains("estimator.lag"));
        let mut s = EstimatorSpec::new(EstimatorKind::Fgo, KernelKind::None);
        s.kernel_bound = Some(1.0);
        assert!(s.validate().unwrap_err().to_string().contains("estimator.kernel_bound"));
        let mut s = EstimatorSpec::new(EstimatorKind::Fgo, KernelKind::Gm);
        s.lag = Some(-1.0);
        assert!(s.validate().is_err());
    }

    #[test]
    fn labels() {
        let l = |e, k| EstimatorSpec::new(e, k).label();
        assert_eq!(l(EstimatorKind::Fgo, KernelKind::None), "FGO+None");
        assert_eq!(l(EstimatorKind::Fgo, KernelKind::Tukey), "FGO+TK");
        assert_eq!(l(EstimatorKind::Fgo, KernelKind::Gm), "FGO+GM");
        assert_eq!(l(EstimatorKind::Eskf, KernelKind::Nt), "ESKF+NT");
        let default_eskf = EstimatorSpec {
            kernel: None,
            ..EstimatorSpec::new(EstimatorKind::Eskf, KernelKind::None)
        };
        assert_eq!(default_eskf.label(), "ESKF+NT");
    }

    #[test]
    fn config_round_trip_and_errors() {
        let text = r#"
seed = 7
output = "out/gm"

[scenario]
preset = "aoa-range"
duration = 60.0
outlier_probability = 0.1

[estimator]
kind = "fgo"
kernel = "gm"
kernel_bound = 1.0
"#;
        let cfg = RunConfig::from_toml(text).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.estimator.label(), "FGO+GM");
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        let spec = cfg.scenario().unwrap();
        assert_eq!(spec.sensors.aoa.outliers.probability, 0.1);

        let bad = text.replace("aoa-range", "nope");
        let err = RunConfig::from_toml(&bad).unwrap().validate().unwrap_err().to_string();
        assert!(err.contains("scenario.preset"), "{err}");
        let bad = text.replace("0.1", "1.5");
        let err = RunConfig::from_toml(&bad).unwrap().validate().unwrap_err().to_string();
        assert!(err.contains("scenario.outlier_probability"), "{err}");
        assert!(RunConfig::from_toml(&text.replace("seed", "sed")).is_err());
    }

    #[test]
    fn initialization_recovers_attitude() {
        let spec = ScenarioSpec::preset("aoa-baro", 30.0).unwrap();
        let gen = spec.generate(3).unwrap();
        let init = initialize(&gen).unwrap();
        let truth = gen.trajectory.at(INIT_WINDOW);
        let err = so3_log(&(init.state.rotation().transpose() * truth.rotation)).norm();
        // accelerometer bias tilts the gravity vector by about |b_a|/g and
        // the compass sets heading to about a degree
        assert!(err.to_degrees() < 1.5, "{}", err.to_degrees());
        let e = crate::sim::run::attitude_error(init.state.rotation(), &truth.rotation);
        assert!(e.x.hypot(e.y).to_degrees() < 0.5);
        assert!((init.state.position() - truth.position).norm() < 0.1);
        assert_eq!(init.covariance.nrows(), 16);
        assert_eq!(init.state.baro_bias, Some(0.0));
        let gyro = Vec3::from(spec.sensors.imu.gyro_bias);
        assert!((init.state.bias.gyro - gyro).norm() < 2e-3);
    }

    #[test]
    fn compare_blocks_and_mismatch() {
        let spec = ScenarioSpec::preset("aoa-range", 30.0).unwrap().noiseless();
        let a = execute(&spec, &EstimatorSpec::new(EstimatorKind::Eskf, KernelKind::Nt), 1).unwrap();
        let b = execute(&spec, &EstimatorSpec::new(EstimatorKind::Eskf, KernelKind::None), 1).unwrap();
        let single = compare(std::slice::from_ref(&a.report)).unwrap();
        assert_eq!(single.rows.len(), a.report.segments.len());
        for (row, seg) in single.rows.iter().zip(&a.report.segments) {
            assert_eq!(row.rmse, seg.rmse);
        }
        let both = compare(&[a.report.clone(), b.report.clone()]).unwrap();
        let order: Vec<_> = both.rows.iter().map(|r| (r.segment.as_str(), r.config.as_str())).collect();
        assert_eq!(&order[..4], &[("RTK", "ESKF+NT"), ("RTK", "ESKF+None"), ("1", "ESKF+NT"), ("1", "ESKF+None")]);
        assert_eq!(both.to_csv(), compare(&[a.report.clone(), b.report.clone()]).unwrap().to_csv());

        let other = ScenarioSpec::preset("aoa-range", 45.0).unwrap().noiseless();
        let c = execute(&other, &EstimatorSpec::new(EstimatorKind::Eskf, KernelKind::Nt), 1).unwrap();
        assert!(matches!(compare(&[a.report, c.report]), Err(HarnessError::ScheduleMismatch(_))));
    }
}
