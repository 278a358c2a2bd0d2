//! `popgrad <experiment> [flags]`: run one configured experiment, write
//! `<experiment>.csv` and `<experiment>.json`, and exit with 0 when every
//! declared check passed, 2 when some failed and 1 on errors.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use popgrad_core::experiments::{self, parse_override, ExperimentConfig, ExperimentKind};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(
    name = "popgrad",
    version,
    about = "Teacher-student ReLU gradient experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[command(rename_all = "snake_case")]
enum Command {
    /// Closed-form gradient against sampled estimates (Gaussian inputs).
    VerifyFormula(RunArgs),
    /// Sampled-estimate error binned by the angle between e and w.
    ErrorVsAngle(RunArgs),
    /// Closed form against centered uniform inputs.
    UniformCheck(RunArgs),
    /// Sign scan of L12/L21 against cone membership in the plane.
    ScanL12(RunArgs),
    /// Single-node flows started inside the Lyapunov region.
    FlowSingle(RunArgs),
    /// Random initialization in a small ball around the origin.
    Basin(RunArgs),
    /// Vector field of the 2D symmetric dynamics.
    SymmetricField(RunArgs),
    /// 2D symmetric flows for several K.
    SymmetricTrajectories(RunArgs),
    /// K-node flows from a small noisy multiple of the teacher.
    NoisyInit(RunArgs),
    /// Flows with the top-layer weights fixed.
    FixedTopWeights(RunArgs),
    /// Multilayer gradient recursion against finite differences.
    MultilayerCheck(RunArgs),
}

impl Command {
    fn split(self) -> (ExperimentKind, RunArgs) {
        match self {
            Command::VerifyFormula(a) => (ExperimentKind::VerifyFormula, a),
            Command::ErrorVsAngle(a) => (ExperimentKind::ErrorVsAngle, a),
            Command::UniformCheck(a) => (ExperimentKind::UniformCheck, a),
            Command::ScanL12(a) => (ExperimentKind::ScanL12, a),
            Command::FlowSingle(a) => (ExperimentKind::FlowSingle, a),
            Command::Basin(a) => (ExperimentKind::Basin, a),
            Command::SymmetricField(a) => (ExperimentKind::SymmetricField, a),
            Command::SymmetricTrajectories(a) => (ExperimentKind::SymmetricTrajectories, a),
            Command::NoisyInit(a) => (ExperimentKind::NoisyInit, a),
            Command::FixedTopWeights(a) => (ExperimentKind::FixedTopWeights, a),
            Command::MultilayerCheck(a) => (ExperimentKind::MultilayerCheck, a),
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// JSON config file; its keys override the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    stream_id: Option<u64>,
    /// Output directory.
    #[arg(long, env = "POPGRAD_OUT_DIR")]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Any config key, e.g. `--set noise_levels=[0,0.5]`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Print the resolved config and exit without running.
    #[arg(long)]
    print_config: bool,
    #[command(flatten)]
    numeric: NumericFlags,
}

/// Shorthands for common numeric keys. A flag the experiment does not use
/// is rejected like an unknown config key.
#[derive(Args)]
struct NumericFlags {
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
}

impl NumericFlags {
    fn overrides(&self) -> Vec<(String, Value)> {
        let mut out = Vec::new();
        let mut push = |key: &str, v: Option<Value>| {
            if let Some(v) = v {
                out.push((key.to_string(), v));
            }
        };
        push("n", self.n.map(|v| json!(v)));
        push("d", self.d.map(|v| json!(v)));
        push("k", self.k.map(|v| json!(v)));
        push("epsilon", self.epsilon.map(|v| json!(v)));
        push("trials", self.trials.map(|v| json!(v)));
        push("runs", self.runs.map(|v| json!(v)));
        push("pairs", self.pairs.map(|v| json!(v)));
        push("grid", self.grid.map(|v| json!(v)));
        push("step", self.step.map(|v| json!(v)));
        push("max_steps", self.max_steps.map(|v| json!(v)));
        push("tol", self.tol.map(|v| json!(v)));
        out
    }
}

fn resolve(kind: ExperimentKind, args: &RunArgs) -> Result<ExperimentConfig> {
    let file = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            Some(
                serde_json::from_str::<Value>(&text)
                    .with_context(|| format!("parsing config {}", path.display()))?,
            )
        }
        None => None,
    };
    let mut overrides = Vec::new();
    if let Some(seed) = args.seed {
        overrides.push(("seed".to_string(), json!(seed)));
    }
    if let Some(id) = args.stream_id {
        overrides.push(("stream_id".to_string(), json!(id)));
    }
    if let Some(out) = &args.out {
        overrides.push(("output_dir".to_string(), json!(out)));
    }
    overrides.extend(args.numeric.overrides());
    for item in &args.set {
        let (key, value) = item
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got `{item}`"))?;
        overrides.push((key.trim().to_string(), parse_override(value.trim())));
    }
    Ok(ExperimentConfig::build(kind, file.as_ref(), &overrides)?)
}

fn execute(kind: ExperimentKind, args: RunArgs) -> Result<bool> {
    if let Some(threads) = args.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let config = resolve(kind, &args)?;
    if args.print_config {
        println!("{}", config.to_json_string());
        return Ok(true);
    }
    let report = experiments::run(&config)?;
    for c in &report.checks {
        let status = if c.passed { "PASS" } else { "FAIL" };
        let cmp = serde_json::to_value(c.comparison)?;
        println!(
            "{status} {}: {} {} {}",
            c.name,
            c.value,
            cmp.as_str().unwrap_or("?"),
            c.threshold
        );
    }
    if let Some(path) = &report.csv_path {
        println!("csv: {}", path.display());
    }
    println!(
        "report: {}",
        config.output_dir.join(format!("{kind}.json")).display()
    );
    println!("wall clock: {:.3} s", report.wall_clock_seconds);
    Ok(report.passed)
}

fn main() -> ExitCode {
    let (kind, args) = Cli::parse().command.split();
    match execute(kind, args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
