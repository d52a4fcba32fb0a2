use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use parsnav::harness::{self, selftest, EstimatorKind, EstimatorSpec, EvaluationReport, KernelKind, RunConfig};

#[derive(Parser)]
#[command(name = "parsnav", version, about = "Phased-array radio aided inertial navigation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a scenario file plus truth and event CSVs
    Generate(RunArgs),
    /// Execute one configuration and write epochs.csv, report.json and rmse_table.csv
    Run(RunArgs),
    /// Merge report.json files into one RMSE table
    Compare {
        /// report.json files, in row order
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// also write the table as CSV
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in invariant checks
    Selftest,
}

#[derive(Clone, Copy, ValueEnum)]
enum Estimator {
    Fgo,
    Eskf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kernel {
    None,
    Tukey,
    Gm,
    Nt,
}

#[derive(Args)]
struct RunArgs {
    /// run configuration (TOML)
    #[arg(long)]
    config: Option<PathBuf>,
    /// built-in scenario when no config is given
    #[arg(long, default_value = "aoa-range")]
    preset: String,
    /// preset length in seconds
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// output directory
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    estimator: Option<Estimator>,
    #[arg(long, value_enum)]
    kernel: Option<Kernel>,
    #[arg(long)]
    kernel_bound: Option<f64>,
    #[arg(long)]
    gate_k: Option<f64>,
    /// smoother lag in seconds
    #[arg(long)]
    lag: Option<f64>,
    #[arg(long)]
    imu_rate: Option<f64>,
    /// AoA outlier probability
    #[arg(long)]
    outlier_probability: Option<f64>,
    /// disable noise, biases and outliers
    #[arg(long)]
    noiseless: bool,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
            None => RunConfig::new(&self.preset, EstimatorSpec::new(EstimatorKind::Fgo, KernelKind::None), 0),
        };
        if self.config.is_none() {
            cfg.estimator.kernel = None;
        }
        if let Some(d) = self.duration {
            cfg.scenario.duration = Some(d);
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output = Some(o.clone());
        }
        if let Some(e) = self.estimator {
            cfg.estimator.kind = match e {
                Estimator::Fgo => EstimatorKind::Fgo,
                Estimator::Eskf => EstimatorKind::Eskf,
            };
        }
        if let Some(k) = self.kernel {
            cfg.estimator.kernel = Some(match k {
                Kernel::None => KernelKind::None,
                Kernel::Tukey => KernelKind::Tukey,
                Kernel::Gm => KernelKind::Gm,
                Kernel::Nt => KernelKind::Nt,
            });
        }
        if self.kernel_bound.is_some() {
            cfg.estimator.kernel_bound = self.kernel_bound;
        }
        if self.gate_k.is_some() {
            cfg.estimator.gate_k = self.gate_k;
        }
        if self.lag.is_some() {
            cfg.estimator.lag = self.lag;
        }
        if self.imu_rate.is_some() {
            cfg.scenario.imu_rate = self.imu_rate;
        }
        if self.outlier_probability.is_some() {
            cfg.scenario.outlier_probability = self.outlier_probability;
        }
        cfg.scenario.noiseless |= self.noiseless;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn generate(args: &RunArgs) -> Result<()> {
    let cfg = args.config()?;
    let spec = cfg.scenario()?;
    let scenario = spec.generate(cfg.seed)?;
    let dir = cfg.output_dir();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("scenario.toml"), spec.to_toml())?;
    let truth = fs::File::create(dir.join("truth.csv"))?;
    scenario.write_truth_csv(std::io::BufWriter::new(truth), 0.1)?;
    let events = fs::File::create(dir.join("events.csv"))?;
    scenario.write_events_csv(std::io::BufWriter::new(events))?;
    println!(
        "{}: {} IMU samples, {} aiding events -> {}",
        spec.name,
        scenario.imu.len(),
        scenario.aiding.len(),
        dir.display()
    );
    Ok(())
}

fn run(args: &RunArgs) -> Result<ExitCode> {
    let cfg = args.config()?;
    let report = harness::run(&cfg)?;
    let table = harness::compare(std::slice::from_ref(&report))?;
    print!("{}", table.to_text());
    if let Some(h) = report.post_handover_horizontal_rmse {
        println!("post-handover horizontal RMSE: {h:.3} m");
    }
    println!("artifacts: {}", cfg.output_dir().display());
    if report.diverged {
        eprintln!(
            "error: {} diverged at t = {:.2} s; partial artifacts written",
            report.meta.label,
            report.divergence_time.unwrap_or(f64::NAN)
        );
        return Ok(ExitCode::from(3));
    }
    Ok(ExitCode::SUCCESS)
}

fn compare(reports: &[PathBuf], out: Option<&PathBuf>) -> Result<()> {
    let parsed = reports
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<EvaluationReport>(&text).with_context(|| format!("parsing {}", p.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    let table = harness::compare(&parsed)?;
    print!("{}", table.to_text());
    if let Some(path) = out {
        fs::write(path, table.to_csv())?;
    }
    Ok(())
}

fn selftest() -> Result<ExitCode> {
    let checks = selftest::run_all();
    for c in &checks {
        println!("[{}] {}: {}", if c.passed { "pass" } else { "FAIL" }, c.name, c.detail);
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        bail!("{failed} check(s) failed");
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(a) => generate(a).map(|_| ExitCode::SUCCESS),
        Command::Run(a) => run(a),
        Command::Compare { reports, out } => compare(reports, out.as_ref()).map(|_| ExitCode::SUCCESS),
        Command::Selftest => selftest(),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
