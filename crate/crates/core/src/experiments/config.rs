//! Experiment configurations: per-experiment defaults, merging of file
//! values and overrides, and validation.

use std::f64::consts::PI;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, FieldError, Result};
use crate::flow::FlowParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    VerifyFormula,
    ErrorVsAngle,
    UniformCheck,
    ScanL12,
    FlowSingle,
    Basin,
    SymmetricField,
    SymmetricTrajectories,
    NoisyInit,
    FixedTopWeights,
    MultilayerCheck,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 11] = [
        ExperimentKind::VerifyFormula,
        ExperimentKind::ErrorVsAngle,
        ExperimentKind::UniformCheck,
        ExperimentKind::ScanL12,
        ExperimentKind::FlowSingle,
        ExperimentKind::Basin,
        ExperimentKind::SymmetricField,
        ExperimentKind::SymmetricTrajectories,
        ExperimentKind::NoisyInit,
        ExperimentKind::FixedTopWeights,
        ExperimentKind::MultilayerCheck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::VerifyFormula => "verify_formula",
            ExperimentKind::ErrorVsAngle => "error_vs_angle",
            ExperimentKind::UniformCheck => "uniform_check",
            ExperimentKind::ScanL12 => "scan_l12",
            ExperimentKind::FlowSingle => "flow_single",
            ExperimentKind::Basin => "basin",
            ExperimentKind::SymmetricField => "symmetric_field",
            ExperimentKind::SymmetricTrajectories => "symmetric_trajectories",
            ExperimentKind::NoisyInit => "noisy_init",
            ExperimentKind::FixedTopWeights => "fixed_top_weights",
            ExperimentKind::MultilayerCheck => "multilayer_check",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ExperimentKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| field_error("experiment", format!("unknown experiment `{s}`")))
    }
}

fn field_error(field: &str, message: impl Into<String>) -> Error {
    Error::Config(vec![FieldError {
        field: field.into(),
        message: message.into(),
    }])
}

/// Closed form against sampled estimates, Gaussian inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FormulaParams {
    pub d: usize,
    /// Strictly increasing.
    pub sample_sizes: Vec<usize>,
    pub pairs: usize,
    /// Angles are drawn uniformly from `[0, theta_max]`.
    pub theta_max: f64,
    /// Every pair must be below this at the largest sample size.
    pub max_error: f64,
}

impl Default for FormulaParams {
    fn default() -> Self {
        FormulaParams {
            d: 100,
            sample_sizes: vec![1_000, 10_000, 100_000],
            pairs: 20,
            theta_max: PI / 2.0,
            max_error: 0.05,
        }
    }
}

/// Same comparison under centered uniform inputs, where the closed form
/// holds up to the input variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UniformParams {
    pub d: usize,
    pub sample_sizes: Vec<usize>,
    pub pairs: usize,
    pub theta_max: f64,
    /// Allowed `|mean fitted scale - 1|` at the largest sample size.
    pub scale_tol: f64,
}

impl Default for UniformParams {
    fn default() -> Self {
        UniformParams {
            d: 100,
            sample_sizes: vec![1_000, 10_000, 100_000],
            pairs: 20,
            theta_max: PI / 2.0,
            scale_tol: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ErrorVsAngleParams {
    pub d: usize,
    pub n: usize,
    pub bins: usize,
    pub pairs_per_bin: usize,
}

impl Default for ErrorVsAngleParams {
    fn default() -> Self {
        ErrorVsAngleParams {
            d: 100,
            n: 10_000,
            bins: 20,
            pairs_per_bin: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScanParams {
    pub grid_theta12: usize,
    pub grid_phi: usize,
    /// Only every `csv_stride`-th row and column goes to the CSV; the
    /// counts cover the full grid.
    pub csv_stride: usize,
}

impl Default for ScanParams {
    fn default() -> Self {
        ScanParams {
            grid_theta12: 1000,
            grid_phi: 1000,
            csv_stride: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowSingleParams {
    pub d: usize,
    pub runs: usize,
    #[serde(flatten)]
    pub flow: FlowParams,
}

impl Default for FlowSingleParams {
    fn default() -> Self {
        FlowSingleParams {
            d: 3,
            runs: 100,
            flow: FlowParams {
                record_every: 10,
                ..FlowParams::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BasinParams {
    pub d: usize,
    pub epsilon: f64,
    pub trials: usize,
    #[serde(flatten)]
    pub flow: FlowParams,
}

impl Default for BasinParams {
    fn default() -> Self {
        BasinParams {
            d: 10,
            epsilon: 0.2,
            trials: 2000,
            flow: FlowParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldBounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SymmetricFieldParams {
    pub k: usize,
    /// Points per axis.
    pub grid: usize,
    #[serde(flatten)]
    pub bounds: FieldBounds,
}

impl Default for SymmetricFieldParams {
    fn default() -> Self {
        SymmetricFieldParams {
            k: 2,
            grid: 25,
            bounds: FieldBounds {
                x_min: 0.0,
                x_max: 1.2,
                y_min: 0.0,
                y_max: 1.2,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SymmetricTrajectoriesParams {
    pub ks: Vec<usize>,
    pub x0: f64,
    pub y0: f64,
    pub step: f64,
    pub max_steps: usize,
    pub tol: f64,
    pub record_every: usize,
}

impl Default for SymmetricTrajectoriesParams {
    fn default() -> Self {
        SymmetricTrajectoriesParams {
            ks: vec![2, 5, 10],
            x0: 1e-3,
            y0: 0.0,
            step: 0.1,
            max_steps: 200_000,
            tol: 1e-10,
            record_every: 10,
        }
    }
}

/// `W0 = init_scale * W* + xi`, `xi ~ N(0, (init_scale * noise)^2)`, with an
/// orthonormal teacher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoisyInitParams {
    pub k: usize,
    pub d: usize,
    pub noise_levels: Vec<f64>,
    pub runs: usize,
    pub init_scale: f64,
    /// Every noise level must reach at least this converged fraction.
    pub min_converged_fraction: f64,
    #[serde(flatten)]
    pub flow: FlowParams,
}

impl Default for NoisyInitParams {
    fn default() -> Self {
        NoisyInitParams {
            k: 5,
            d: 5,
            noise_levels: vec![0.0, 0.1, 0.5, 1.0],
            runs: 8,
            init_scale: 1e-3,
            min_converged_fraction: 1.0,
            flow: FlowParams::default(),
        }
    }
}

/// Flows with the top weights fixed at `a = a*`, one pattern per entry of
/// `a_values`; initialization as in [`NoisyInitParams`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixedTopWeightsParams {
    pub k: usize,
    pub d: usize,
    pub a_values: Vec<Vec<f64>>,
    pub runs: usize,
    pub noise: f64,
    pub init_scale: f64,
    #[serde(flatten)]
    pub flow: FlowParams,
}

impl Default for FixedTopWeightsParams {
    fn default() -> Self {
        FixedTopWeightsParams {
            k: 5,
            d: 5,
            a_values: vec![
                vec![0.5; 5],
                vec![1.0; 5],
                vec![2.0; 5],
                vec![1.0, 1.0, 1.0, 1.0, -1.0],
            ],
            runs: 8,
            noise: 1.0,
            init_scale: 1e-3,
            flow: FlowParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MultilayerParams {
    pub nets: usize,
    pub d: usize,
    pub depth: usize,
    pub max_width: usize,
    pub n: usize,
    /// Central-difference step.
    pub h: f64,
    pub max_rel_error: f64,
    /// Single-layer nets compared bit for bit with the two-layer gradient.
    pub depth1_nets: usize,
}

impl Default for MultilayerParams {
    fn default() -> Self {
        MultilayerParams {
            nets: 20,
            d: 5,
            depth: 3,
            max_width: 6,
            n: 256,
            h: 1e-5,
            max_rel_error: 1e-4,
            depth1_nets: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "snake_case")]
pub enum ExperimentParams {
    VerifyFormula(FormulaParams),
    ErrorVsAngle(ErrorVsAngleParams),
    UniformCheck(UniformParams),
    ScanL12(ScanParams),
    FlowSingle(FlowSingleParams),
    Basin(BasinParams),
    SymmetricField(SymmetricFieldParams),
    SymmetricTrajectories(SymmetricTrajectoriesParams),
    NoisyInit(NoisyInitParams),
    FixedTopWeights(FixedTopWeightsParams),
    MultilayerCheck(MultilayerParams),
}

impl ExperimentParams {
    pub fn defaults(kind: ExperimentKind) -> Self {
        match kind {
            ExperimentKind::VerifyFormula => ExperimentParams::VerifyFormula(Default::default()),
            ExperimentKind::ErrorVsAngle => ExperimentParams::ErrorVsAngle(Default::default()),
            ExperimentKind::UniformCheck => ExperimentParams::UniformCheck(Default::default()),
            ExperimentKind::ScanL12 => ExperimentParams::ScanL12(Default::default()),
            ExperimentKind::FlowSingle => ExperimentParams::FlowSingle(Default::default()),
            ExperimentKind::Basin => ExperimentParams::Basin(Default::default()),
            ExperimentKind::SymmetricField => ExperimentParams::SymmetricField(Default::default()),
            ExperimentKind::SymmetricTrajectories => {
                ExperimentParams::SymmetricTrajectories(Default::default())
            }
            ExperimentKind::NoisyInit => ExperimentParams::NoisyInit(Default::default()),
            ExperimentKind::FixedTopWeights => {
                ExperimentParams::FixedTopWeights(Default::default())
            }
            ExperimentKind::MultilayerCheck => {
                ExperimentParams::MultilayerCheck(Default::default())
            }
        }
    }

    pub fn kind(&self) -> ExperimentKind {
        match self {
            ExperimentParams::VerifyFormula(_) => ExperimentKind::VerifyFormula,
            ExperimentParams::ErrorVsAngle(_) => ExperimentKind::ErrorVsAngle,
            ExperimentParams::UniformCheck(_) => ExperimentKind::UniformCheck,
            ExperimentParams::ScanL12(_) => ExperimentKind::ScanL12,
            ExperimentParams::FlowSingle(_) => ExperimentKind::FlowSingle,
            ExperimentParams::Basin(_) => ExperimentKind::Basin,
            ExperimentParams::SymmetricField(_) => ExperimentKind::SymmetricField,
            ExperimentParams::SymmetricTrajectories(_) => ExperimentKind::SymmetricTrajectories,
            ExperimentParams::NoisyInit(_) => ExperimentKind::NoisyInit,
            ExperimentParams::FixedTopWeights(_) => ExperimentKind::FixedTopWeights,
            ExperimentParams::MultilayerCheck(_) => ExperimentKind::MultilayerCheck,
        }
    }
}

/// One fully resolved experiment. Serializes to a flat JSON object, which
/// is also the config file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub stream_id: u64,
    pub output_dir: PathBuf,
    #[serde(flatten)]
    pub params: ExperimentParams,
}

pub const DEFAULT_SEED: u64 = 1;

impl ExperimentConfig {
    pub fn defaults(kind: ExperimentKind) -> Self {
        ExperimentConfig {
            seed: DEFAULT_SEED,
            stream_id: 0,
            output_dir: PathBuf::from("out"),
            params: ExperimentParams::defaults(kind),
        }
    }

    pub fn kind(&self) -> ExperimentKind {
        self.params.kind()
    }

    /// Start from the defaults of `kind`, then apply the keys of `file`
    /// (a JSON object) and then `overrides` in order. Unknown keys, values
    /// of the wrong type and failed range checks are all collected into one
    /// [`Error::Config`].
    pub fn build(
        kind: ExperimentKind,
        file: Option<&Value>,
        overrides: &[(String, Value)],
    ) -> Result<Self> {
        let mut current = match serde_json::to_value(Self::defaults(kind)) {
            Ok(Value::Object(m)) => m,
            _ => unreachable!("configs serialize to objects"),
        };
        let mut errors = Vec::new();
        let mut entries: Vec<(String, Value)> = Vec::new();
        match file {
            None => {}
            Some(Value::Object(m)) => entries.extend(m.iter().map(|(k, v)| (k.clone(), v.clone()))),
            Some(_) => errors.push(FieldError {
                field: "<config>".into(),
                message: "config file must hold a JSON object".into(),
            }),
        }
        entries.extend(overrides.iter().cloned());
        for (key, value) in entries {
            if let Err(e) = apply(&mut current, kind, &key, value) {
                errors.push(e);
            }
        }
        let config: ExperimentConfig = serde_json::from_value(Value::Object(current))
            .expect("every applied key deserialized on its own");
        errors.extend(config.field_errors());
        if errors.is_empty() {
            Ok(config)
        } else {
            Err(Error::Config(errors))
        }
    }

    /// Parse a config file whose `experiment` key names the experiment.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)
            .map_err(|e| field_error("<config>", format!("not valid JSON: {e}")))?;
        let kind = match value.get("experiment") {
            Some(Value::String(s)) => s.parse()?,
            _ => return Err(field_error("experiment", "missing or not a string")),
        };
        Self::build(kind, Some(&value), &[])
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("configs always serialize")
    }

    pub fn validate(&self) -> Result<()> {
        let errors = self.field_errors();
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }

    fn field_errors(&self) -> Vec<FieldError> {
        let mut c = Checker::default();
        match &self.params {
            ExperimentParams::VerifyFormula(p) => {
                c.at_least("d", p.d, 2);
                c.sample_sizes(&p.sample_sizes);
                c.at_least("pairs", p.pairs, 1);
                c.angle_max("theta_max", p.theta_max);
                c.positive("max_error", p.max_error);
            }
            ExperimentParams::UniformCheck(p) => {
                c.at_least("d", p.d, 2);
                c.sample_sizes(&p.sample_sizes);
                c.at_least("pairs", p.pairs, 1);
                c.angle_max("theta_max", p.theta_max);
                c.positive("scale_tol", p.scale_tol);
            }
            ExperimentParams::ErrorVsAngle(p) => {
                c.at_least("d", p.d, 2);
                c.at_least("n", p.n, 1);
                c.at_least("bins", p.bins, 2);
                c.at_least("pairs_per_bin", p.pairs_per_bin, 1);
            }
            ExperimentParams::ScanL12(p) => {
                c.at_least("grid_theta12", p.grid_theta12, 10);
                c.at_least("grid_phi", p.grid_phi, 10);
                c.at_least("csv_stride", p.csv_stride, 1);
            }
            ExperimentParams::FlowSingle(p) => {
                c.at_least("d", p.d, 1);
                c.at_least("runs", p.runs, 1);
                c.flow(&p.flow);
            }
            ExperimentParams::Basin(p) => {
                c.at_least("d", p.d, 1);
                c.at_least("trials", p.trials, 100);
                c.check(
                    "epsilon",
                    p.epsilon > 0.0 && p.epsilon <= 1.0,
                    "must lie in (0, 1]",
                );
                c.flow(&p.flow);
            }
            ExperimentParams::SymmetricField(p) => {
                c.at_least("k", p.k, 2);
                c.at_least("grid", p.grid, 8);
                let b = p.bounds;
                c.check(
                    "x_max",
                    b.x_min.is_finite() && b.x_max.is_finite() && b.x_max > b.x_min,
                    "must exceed x_min",
                );
                c.check(
                    "y_max",
                    b.y_min.is_finite() && b.y_max.is_finite() && b.y_max > b.y_min,
                    "must exceed y_min",
                );
            }
            ExperimentParams::SymmetricTrajectories(p) => {
                c.check("ks", !p.ks.is_empty(), "must not be empty");
                c.check(
                    "ks",
                    p.ks.iter().all(|&k| k >= 2),
                    "every K must be at least 2",
                );
                c.check(
                    "x0",
                    p.x0.is_finite() && p.y0.is_finite() && (p.x0, p.y0) != (0.0, 0.0),
                    "start must be finite and not the origin",
                );
                c.positive("step", p.step);
                c.at_least("max_steps", p.max_steps, 1);
                c.positive("tol", p.tol);
                c.at_least("record_every", p.record_every, 1);
            }
            ExperimentParams::NoisyInit(p) => {
                c.at_least("k", p.k, 1);
                c.at_least("d", p.d, p.k.max(1));
                c.check(
                    "noise_levels",
                    !p.noise_levels.is_empty(),
                    "must not be empty",
                );
                c.check(
                    "noise_levels",
                    p.noise_levels.iter().all(|&v| v >= 0.0 && v.is_finite()),
                    "levels must be finite and non-negative",
                );
                c.at_least("runs", p.runs, 1);
                c.positive("init_scale", p.init_scale);
                c.check(
                    "min_converged_fraction",
                    (0.0..=1.0).contains(&p.min_converged_fraction),
                    "must lie in [0, 1]",
                );
                c.flow(&p.flow);
            }
            ExperimentParams::FixedTopWeights(p) => {
                c.at_least("k", p.k, 1);
                c.at_least("d", p.d, p.k.max(1));
                c.check("a_values", !p.a_values.is_empty(), "must not be empty");
                c.check(
                    "a_values",
                    p.a_values.iter().all(|a| a.len() == p.k),
                    "every pattern needs k entries",
                );
                c.check(
                    "a_values",
                    p.a_values
                        .iter()
                        .flatten()
                        .all(|&v| v != 0.0 && v.is_finite()),
                    "entries must be finite and nonzero",
                );
                c.at_least("runs", p.runs, 1);
                c.check(
                    "noise",
                    p.noise >= 0.0 && p.noise.is_finite(),
                    "must be finite and non-negative",
                );
                c.positive("init_scale", p.init_scale);
                c.flow(&p.flow);
            }
            ExperimentParams::MultilayerCheck(p) => {
                c.at_least("nets", p.nets, 1);
                c.at_least("d", p.d, 1);
                c.at_least("depth", p.depth, 1);
                c.at_least("max_width", p.max_width, 1);
                c.at_least("n", p.n, 1);
                c.positive("h", p.h);
                c.positive("max_rel_error", p.max_rel_error);
            }
        }
        c.errors
    }
}

fn apply(
    current: &mut Map<String, Value>,
    kind: ExperimentKind,
    key: &str,
    value: Value,
) -> std::result::Result<(), FieldError> {
    let err = |message: String| FieldError {
        field: key.into(),
        message,
    };
    if key == "experiment" {
        return match value.as_str() {
            Some(s) if s == kind.name() => Ok(()),
            _ => Err(err(format!("expected `{kind}`, got {value}"))),
        };
    }
    if !current.contains_key(key) {
        return Err(err(format!("unknown field for `{kind}`")));
    }
    let mut trial = current.clone();
    trial.insert(key.into(), value);
    match serde_json::from_value::<ExperimentConfig>(Value::Object(trial.clone())) {
        Ok(_) => {
            *current = trial;
            Ok(())
        }
        Err(e) => Err(err(e.to_string())),
    }
}

/// Interpret a command-line value: JSON when it parses, a bare string
/// otherwise (so `--set method=euler` works unquoted).
pub fn parse_override(text: &str) -> Value {
    serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.into()))
}

#[derive(Default)]
struct Checker {
    errors: Vec<FieldError>,
}

impl Checker {
    fn check(&mut self, field: &str, ok: bool, message: &str) {
        if !ok {
            self.errors.push(FieldError {
                field: field.into(),
                message: message.into(),
            });
        }
    }

    fn at_least(&mut self, field: &str, v: usize, min: usize) {
        self.check(field, v >= min, &format!("must be at least {min}, got {v}"));
    }

    fn positive(&mut self, field: &str, v: f64) {
        self.check(
            field,
            v > 0.0 && v.is_finite(),
            &format!("must be positive and finite, got {v}"),
        );
    }

    fn angle_max(&mut self, field: &str, v: f64) {
        self.check(field, v > 0.0 && v <= PI, "must lie in (0, pi]");
    }

    fn sample_sizes(&mut self, ns: &[usize]) {
        self.check("sample_sizes", !ns.is_empty(), "must not be empty");
        self.check(
            "sample_sizes",
            ns.iter().all(|&n| n > 0),
            "sizes must be positive",
        );
        self.check(
            "sample_sizes",
            ns.windows(2).all(|w| w[0] < w[1]),
            "must be strictly increasing",
        );
    }

    fn flow(&mut self, p: &FlowParams) {
        self.positive("step", p.step);
        self.at_least("max_steps", p.max_steps, 1);
        self.positive("tol", p.tol);
        self.positive("target_tol", p.target_tol);
        self.at_least("record_every", p.record_every, 1);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn names_round_trip() {
        for k in ExperimentKind::ALL {
            assert_eq!(k.name().parse::<ExperimentKind>().unwrap(), k);
            assert_eq!(serde_json::to_value(k).unwrap(), json!(k.name()));
            let c = ExperimentConfig::defaults(k);
            let back = ExperimentConfig::from_json_str(&c.to_json_string()).unwrap();
            assert_eq!(back, c);
        }
        assert!("nope".parse::<ExperimentKind>().is_err());
    }

    #[test]
    fn config_is_flat() {
        let v = serde_json::to_value(ExperimentConfig::defaults(ExperimentKind::Basin)).unwrap();
        let m = v.as_object().unwrap();
        for key in [
            "experiment",
            "seed",
            "d",
            "epsilon",
            "trials",
            "step",
            "method",
            "tol",
        ] {
            assert!(m.contains_key(key), "{key}");
        }
        assert!(m.values().all(|v| !v.is_object()));
    }

    #[test]
    fn file_then_overrides() {
        let file = json!({"seed": 5, "trials": 300, "method": "euler"});
        let c = ExperimentConfig::build(
            ExperimentKind::Basin,
            Some(&file),
            &[
                ("trials".into(), json!(400)),
                ("epsilon".into(), parse_override("0.5")),
            ],
        )
        .unwrap();
        assert_eq!(c.seed, 5);
        let ExperimentParams::Basin(p) = &c.params else {
            panic!()
        };
        assert_eq!((p.trials, p.epsilon), (400, 0.5));
        assert_eq!(p.flow.method, crate::flow::Integrator::Euler);
        assert_eq!(p.d, 10);
    }

    #[test]
    fn every_bad_field_is_listed() {
        let file = json!({"trials": 5, "epsilon": "big", "colour": 1, "d": 0});
        let err = ExperimentConfig::build(ExperimentKind::Basin, Some(&file), &[]).unwrap_err();
        let Error::Config(fields) = err else { panic!() };
        let mut names: Vec<&str> = fields.iter().map(|f| f.field.as_str()).collect();
        names.sort();
        assert_eq!(names, ["colour", "d", "epsilon", "trials"]);
    }

    #[test]
    fn experiment_key_must_agree() {
        let file = json!({"experiment": "basin"});
        assert!(ExperimentConfig::build(ExperimentKind::ScanL12, Some(&file), &[]).is_err());
        assert!(ExperimentConfig::build(ExperimentKind::ScanL12, Some(&json!([1])), &[]).is_err());
        assert!(ExperimentConfig::from_json_str("{\"seed\": 1}").is_err());
        assert!(ExperimentConfig::from_json_str("{").is_err());
    }

    #[test]
    fn override_values() {
        assert_eq!(parse_override("1e-3"), json!(1e-3));
        assert_eq!(parse_override("[2,5]"), json!([2, 5]));
        assert_eq!(parse_override("rk4"), json!("rk4"));
    }

    #[test]
    fn pattern_shape_validated() {
        let o = [("a_values".to_string(), json!([[1.0, 1.0]]))];
        assert!(ExperimentConfig::build(ExperimentKind::FixedTopWeights, None, &o).is_err());
        let o = [("grid".to_string(), json!(7))];
        assert!(ExperimentConfig::build(ExperimentKind::SymmetricField, None, &o).is_err());
    }
}
