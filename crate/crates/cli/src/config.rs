//! Experiment configuration.
//!
//! The on-disk format is flat `section.key = value` lines (TOML values).
//! Every key has a default; unknown keys are rejected.

use std::path::Path;

use ladelab::label_space::{LabelDistribution, ShiftDirection};
use ladelab::losses::{LossKind, DEFAULT_ALPHA, DEFAULT_LAMBDA};
use ladelab::metrics::DEFAULT_BINS;
use ladelab::rng::sub_seed;
use ladelab::trainer::{Schedule, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::error::{CliError, CliResult};

pub const ARTIFACT_VERSION: &str = concat!("ladelab-", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSection {
    #[serde(alias = "C")]
    pub classes: usize,
    pub dim: usize,
    pub spread: f64,
    pub stddev: f64,
    /// Derived from `run.seed` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for WorldSection {
    fn default() -> Self {
        Self {
            classes: 10,
            dim: 3,
            spread: 3.0,
            stddev: 1.0,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub n_max: usize,
    pub mu: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            n_max: 2000,
            mu: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftSection {
    pub directions: Vec<String>,
    pub mus: Vec<f64>,
    pub n_per_class: usize,
}

impl Default for ShiftSection {
    fn default() -> Self {
        Self {
            directions: vec!["forward".into(), "backward".into()],
            mus: vec![2.0, 10.0, 50.0],
            n_per_class: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { hidden: vec![64] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// `constant`, `cosine` or `step`.
    pub schedule: String,
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            schedule: "cosine".into(),
            milestones: Vec::new(),
            factor: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    /// `ce`, `lade-ce` or `lade`.
    pub kind: String,
    pub lambda: f64,
    pub alpha: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        Self {
            kind: "lade".into(),
            lambda: DEFAULT_LAMBDA,
            alpha: DEFAULT_ALPHA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// `true-shift`, `uniform` or `custom`.
    pub prior: String,
    pub custom: Vec<f64>,
    pub bins: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            prior: "true-shift".into(),
            custom: Vec::new(),
            bins: DEFAULT_BINS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub lambdas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub mus: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            lambdas: vec![0.0, DEFAULT_LAMBDA],
            alphas: vec![0.0, DEFAULT_ALPHA],
            mus: vec![10.0, 100.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: "out".into() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub world: WorldSection,
    pub data: DataSection,
    pub shift: ShiftSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub loss: LossSection,
    pub eval: EvalSection,
    pub sweep: SweepSection,
    pub output: OutputSection,
    pub run: RunSection,
}

/// How the target prior is chosen at evaluation time.
#[derive(Debug, Clone, PartialEq)]
pub enum PriorMode {
    TrueShift,
    Uniform,
    Custom(LabelDistribution),
}

/// Named seeds, all derived from `run.seed`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub world: u64,
    pub train_data: u64,
    pub test_data: u64,
    pub init: u64,
    pub shuffle: u64,
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Parses a `--set` value: anything TOML accepts, otherwise a bare string.
fn parse_value(raw: &str) -> Value {
    match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

fn set_path(table: &mut Table, key: &str, value: Value) -> CliResult<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty());
    let Some(last) = last else {
        return Err(config_err(format!("bad key `{key}`")));
    };
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(config_err(format!("`{p}` in `{key}` is not a section"))),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn flatten(prefix: &str, table: &Table, out: &mut Vec<String>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => out.push(format!("{key} = {other}")),
        }
    }
}

impl ExperimentConfig {
    /// Parses config text and applies `key=value` overrides on top.
    pub fn parse(text: &str, overrides: &[String]) -> CliResult<Self> {
        let mut table: Table =
            toml::from_str(text).map_err(|e| config_err(format!("parse: {e}")))?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| config_err(format!("override `{item}` is not key=value")))?;
            set_path(&mut table, key.trim(), parse_value(raw.trim()))?;
        }
        let cfg: Self = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| config_err(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?,
            None => String::new(),
        };
        Self::parse(&text, overrides)
    }

    /// Canonical flat form, one sorted `key = value` line per field.
    pub fn to_text(&self) -> String {
        let table = match Value::try_from(self) {
            Ok(Value::Table(t)) => t,
            _ => unreachable!("config always serializes to a table"),
        };
        let mut lines = Vec::new();
        flatten("", &table, &mut lines);
        lines.join("\n") + "\n"
    }

    /// SHA-256 of the canonical text with the output directory blanked, as
    /// 16 hex digits.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output.dir.clear();
        let digest = Sha256::digest(c.to_text().as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn validate(&self) -> CliResult<()> {
        let w = &self.world;
        if w.classes < 2 || w.dim == 0 {
            return Err(config_err("world.classes must be >= 2 and world.dim >= 1"));
        }
        if !(w.spread > 0.0) || !(w.stddev > 0.0) {
            return Err(config_err("world.spread and world.stddev must be positive"));
        }
        if !(self.data.mu >= 1.0) || self.data.n_max == 0 {
            return Err(config_err("data.mu must be >= 1 and data.n_max positive"));
        }
        if self.shift.n_per_class == 0 {
            return Err(config_err("shift.n_per_class must be positive"));
        }
        self.shift_directions()?;
        if let Some(m) = self.shift.mus.iter().find(|m| !(**m >= 1.0)) {
            return Err(config_err(format!("shift mu {m} is below 1")));
        }
        if self.model.hidden.contains(&0) {
            return Err(config_err("model.hidden sizes must be positive"));
        }
        self.loss_kind()?;
        self.train_config()?;
        self.prior_mode()?;
        if self.eval.bins == 0 {
            return Err(config_err("eval.bins must be positive"));
        }
        Ok(())
    }

    pub fn loss_kind(&self) -> CliResult<LossKind> {
        let l = &self.loss;
        if !(l.lambda >= 0.0) || !(l.alpha >= 0.0) {
            return Err(config_err("loss.lambda and loss.alpha must be nonnegative"));
        }
        match l.kind.as_str() {
            "ce" => Ok(LossKind::Ce),
            "lade-ce" => Ok(LossKind::LadeCe),
            "lade" => Ok(LossKind::Lade {
                lambda: l.lambda,
                alpha: l.alpha,
            }),
            other => Err(config_err(format!(
                "loss.kind `{other}` is not one of ce, lade-ce, lade"
            ))),
        }
    }

    pub fn shift_directions(&self) -> CliResult<Vec<ShiftDirection>> {
        self.shift
            .directions
            .iter()
            .map(|d| {
                d.parse::<ShiftDirection>()
                    .map_err(|e| config_err(e.to_string()))
            })
            .collect()
    }

    pub fn prior_mode(&self) -> CliResult<PriorMode> {
        match self.eval.prior.as_str() {
            "true-shift" => Ok(PriorMode::TrueShift),
            "uniform" => Ok(PriorMode::Uniform),
            "custom" => {
                if self.eval.custom.len() != self.world.classes {
                    return Err(config_err(format!(
                        "eval.prior = custom needs eval.custom with {} entries, got {}",
                        self.world.classes,
                        self.eval.custom.len()
                    )));
                }
                LabelDistribution::new(self.eval.custom.clone())
                    .map(PriorMode::Custom)
                    .map_err(|e| config_err(format!("eval.custom: {e}")))
            }
            other => Err(config_err(format!(
                "eval.prior `{other}` is not one of true-shift, uniform, custom"
            ))),
        }
    }

    pub fn seeds(&self) -> Seeds {
        let s = self.run.seed;
        Seeds {
            world: self.world.seed.unwrap_or_else(|| sub_seed(s, "world")),
            train_data: sub_seed(s, "train-data"),
            test_data: sub_seed(s, "test-data"),
            init: sub_seed(s, "init"),
            shuffle: sub_seed(s, "shuffle"),
        }
    }

    pub fn model_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.world.dim];
        dims.extend(&self.model.hidden);
        dims.push(self.world.classes);
        dims
    }

    pub fn train_config(&self) -> CliResult<TrainConfig> {
        let t = &self.train;
        let schedule = match t.schedule.as_str() {
            "constant" => Schedule::Constant,
            "cosine" => Schedule::Cosine,
            "step" => Schedule::Step {
                milestones: t.milestones.clone(),
                factor: t.factor,
            },
            other => {
                return Err(config_err(format!(
                    "train.schedule `{other}` is not one of constant, cosine, step"
                )))
            }
        };
        let cfg = TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            schedule,
            seed: self.seeds().shuffle,
            loss: self.loss_kind()?,
        };
        cfg.validate().map_err(|e| config_err(e.to_string()))?;
        Ok(cfg)
    }
}
