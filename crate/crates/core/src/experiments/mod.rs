//! Configured, deterministic experiment runs that write a CSV of raw data
//! and a JSON report with declared pass/fail checks.

mod config;
mod runners;

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::sampling::RngSeed;

pub use config::{
    parse_override, BasinParams, ErrorVsAngleParams, ExperimentConfig, ExperimentKind,
    ExperimentParams, FieldBounds, FixedTopWeightsParams, FlowSingleParams, FormulaParams,
    MultilayerParams, NoisyInitParams, ScanParams, SymmetricFieldParams,
    SymmetricTrajectoriesParams, UniformParams, DEFAULT_SEED,
};
pub use runners::{emit_vector_field, fixed_top_weights_experiment, FixedTopRun, PatternResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Comparison {
    #[serde(rename = "<")]
    Less,
    #[serde(rename = "<=")]
    AtMost,
    #[serde(rename = ">")]
    Greater,
    #[serde(rename = ">=")]
    AtLeast,
}

/// One declared acceptance threshold and how the run measured against it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub comparison: Comparison,
    pub threshold: f64,
    pub passed: bool,
}

impl Check {
    pub fn new(
        name: impl Into<String>,
        value: f64,
        comparison: Comparison,
        threshold: f64,
    ) -> Self {
        let passed = match comparison {
            Comparison::Less => value < threshold,
            Comparison::AtMost => value <= threshold,
            Comparison::Greater => value > threshold,
            Comparison::AtLeast => value >= threshold,
        };
        Check {
            name: name.into(),
            value,
            comparison,
            threshold,
            passed,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub experiment: ExperimentKind,
    pub config: ExperimentConfig,
    pub summary: Value,
    pub checks: Vec<Check>,
    pub passed: bool,
    pub wall_clock_seconds: f64,
    /// Set once the CSV is on disk.
    pub csv_path: Option<PathBuf>,
    #[serde(skip)]
    pub csv: String,
}

impl ExperimentReport {
    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports always serialize")
    }
}

pub(crate) struct Outcome {
    pub summary: Value,
    pub checks: Vec<Check>,
    pub csv: String,
}

/// Run the experiment in memory; nothing is written.
pub fn execute(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let start = Instant::now();
    let seed = RngSeed::with_stream(config.seed, config.stream_id);
    let out = runners::dispatch(&config.params, seed)?;
    Ok(ExperimentReport {
        experiment: config.kind(),
        config: config.clone(),
        summary: out.summary,
        passed: out.checks.iter().all(|c| c.passed),
        checks: out.checks,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        csv_path: None,
        csv: out.csv,
    })
}

/// Run the experiment and write `<experiment>.csv` and `<experiment>.json`
/// into `config.output_dir`.
pub fn run(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let mut report = execute(config)?;
    let dir = &config.output_dir;
    std::fs::create_dir_all(dir).map_err(|source| io_error(dir, source))?;
    let csv_path = dir.join(format!("{}.csv", config.kind()));
    std::fs::write(&csv_path, &report.csv).map_err(|source| io_error(&csv_path, source))?;
    report.csv_path = Some(csv_path);
    let json_path = dir.join(format!("{}.json", config.kind()));
    std::fs::write(&json_path, report.to_json_string())
        .map_err(|source| io_error(&json_path, source))?;
    Ok(report)
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}
