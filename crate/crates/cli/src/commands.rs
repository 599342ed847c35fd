//! The five subcommands. Each reads and writes under `output.dir`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ladelab::label_space::{ProfileKind, ShiftDirection};
use ladelab::losses::LossKind;
use ladelab::metrics::{avg_prob_per_class, logit_stats_per_class, BinStat};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ARTIFACT_VERSION};
use crate::error::{CliError, CliResult};
use crate::experiment::{
    self, calibrate as calibrate_models, method_name, shift_points, EvalRow, Method, ShiftPoint,
    TestSet, TrainedModel,
};
use crate::io::{
    dataset_table, fmt_f64, fmt_opt, header_line, profile_table, read_checkpoint, read_dataset,
    read_profile, write_atomic, write_checkpoint, Table,
};

pub const EVAL_HEADERS: [&str; 7] = [
    "method",
    "shift_direction",
    "shift_mu",
    "top1",
    "many",
    "medium",
    "few",
];
pub const SCALAR_HEADERS: [&str; 5] = ["method", "ece", "classwise_ece", "brier", "nll"];
pub const BIN_HEADERS: [&str; 4] = ["bin", "count", "acc", "conf"];
pub const LOGIT_HEADERS: [&str; 5] = ["class", "pos_mean", "pos_var", "neg_mean", "neg_var"];
pub const SWEEP_HEADERS: [&str; 11] = [
    "point_hash",
    "lambda",
    "alpha",
    "mu",
    "final_loss",
    "top1",
    "many",
    "medium",
    "few",
    "mean_shift_top1",
    "ece",
];

pub fn out_dir(cfg: &ExperimentConfig) -> PathBuf {
    PathBuf::from(&cfg.output.dir)
}

fn test_paths(cfg: &ExperimentConfig, point: ShiftPoint) -> (PathBuf, PathBuf) {
    let dir = out_dir(cfg);
    let stem = point.stem();
    (
        dir.join(format!("test_{stem}.csv")),
        dir.join(format!("profile_{stem}.csv")),
    )
}

pub fn train_data_path(cfg: &ExperimentConfig) -> PathBuf {
    out_dir(cfg).join("train.csv")
}

pub fn train_profile_path(cfg: &ExperimentConfig) -> PathBuf {
    out_dir(cfg).join("profile_train.csv")
}

pub fn checkpoint_path(cfg: &ExperimentConfig, loss: LossKind) -> PathBuf {
    out_dir(cfg).join(format!("model_{}.ckpt", loss.tag()))
}

pub fn history_path(cfg: &ExperimentConfig, loss: LossKind) -> PathBuf {
    out_dir(cfg).join(format!("history_{}.csv", loss.tag()))
}

/// Writes the training set, one test set per shift point (plus the balanced
/// pool) and a count profile for each.
pub fn gen_data(cfg: &ExperimentConfig) -> CliResult<Vec<PathBuf>> {
    let data = experiment::generate(cfg)?;
    let mut written = Vec::new();
    let mut put = |path: PathBuf, table: Table| -> CliResult<()> {
        table.write(&path, cfg)?;
        written.push(path);
        Ok(())
    };
    put(train_data_path(cfg), dataset_table(&data.train))?;
    put(train_profile_path(cfg), profile_table(&data.train_profile))?;
    for t in &data.tests {
        let (dpath, ppath) = test_paths(cfg, t.point);
        put(dpath, dataset_table(&t.data))?;
        put(ppath, profile_table(&t.profile))?;
    }
    Ok(written)
}

fn load_train(cfg: &ExperimentConfig) -> CliResult<ladelab::synthetic::Dataset> {
    let data = read_dataset(&train_data_path(cfg), cfg.world.classes)?;
    if data.dim() != cfg.world.dim {
        return Err(CliError::Config(format!(
            "train.csv has {} features but world.dim = {}",
            data.dim(),
            cfg.world.dim
        )));
    }
    Ok(data)
}

fn load_tests(cfg: &ExperimentConfig) -> CliResult<Vec<TestSet>> {
    let mut out = Vec::new();
    for point in shift_points(cfg)? {
        let (dpath, ppath) = test_paths(cfg, point);
        let kind = match point.direction {
            None => ProfileKind::Uniform,
            Some(ShiftDirection::Forward) => ProfileKind::Forward,
            Some(ShiftDirection::Backward) => ProfileKind::Backward,
        };
        out.push(TestSet {
            point,
            profile: read_profile(&ppath, point.mu, kind)?,
            data: read_dataset(&dpath, cfg.world.classes)?,
        });
    }
    Ok(out)
}

pub fn history_table(model: &TrainedModel) -> Table {
    let mut t = Table::new(&["epoch", "lr", "mean_loss", "train_acc"]);
    for r in &model.history {
        t.push(vec![
            r.epoch.to_string(),
            fmt_f64(r.lr),
            fmt_f64(r.mean_loss),
            fmt_f64(r.train_accuracy),
        ]);
    }
    t
}

/// Trains the configured loss on `train.csv`; returns the checkpoint and
/// history paths.
pub fn train(cfg: &ExperimentConfig) -> CliResult<(PathBuf, PathBuf)> {
    let data = load_train(cfg)?;
    let model = experiment::train_model(cfg, &data)?;
    let ckpt = checkpoint_path(cfg, model.loss);
    let hist = history_path(cfg, model.loss);
    write_checkpoint(&ckpt, cfg, &model)?;
    history_table(&model).write(&hist, cfg)?;
    Ok((ckpt, hist))
}

fn resolve_checkpoints(cfg: &ExperimentConfig, given: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    if !given.is_empty() {
        return Ok(given.to_vec());
    }
    let dir = out_dir(cfg);
    let mut found: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| CliError::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.starts_with("model_") && name.ends_with(".ckpt")
        })
        .collect();
    found.sort();
    if found.is_empty() {
        return Err(CliError::Config(format!(
            "no checkpoints given and none found in {}",
            dir.display()
        )));
    }
    Ok(found)
}

fn load_models(cfg: &ExperimentConfig, paths: &[PathBuf]) -> CliResult<Vec<TrainedModel>> {
    let mut models = Vec::new();
    for p in resolve_checkpoints(cfg, paths)? {
        let m = read_checkpoint(&p)?;
        if m.model.dims().first() != Some(&cfg.world.dim) || m.model.classes() != cfg.world.classes
        {
            return Err(CliError::Config(format!(
                "{} does not match world.dim / world.classes",
                p.display()
            )));
        }
        models.push(m);
    }
    Ok(models)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationScalars {
    pub method: String,
    pub ece: f64,
    pub classwise_ece: f64,
    pub brier: f64,
    pub nll: f64,
}

/// Everything `evaluate` reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub config_hash: String,
    pub version: String,
    pub seed: u64,
    pub rows: Vec<EvalRow>,
    pub calibration: Vec<CalibrationScalars>,
    /// Kept out of `result.json` so the record stays byte-reproducible;
    /// written to `timing.json` instead.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

pub fn eval_table(rows: &[EvalRow]) -> Table {
    let mut t = Table::new(&EVAL_HEADERS);
    for r in rows {
        t.push(vec![
            r.method.clone(),
            r.shift_direction.clone(),
            fmt_f64(r.shift_mu),
            fmt_f64(r.top1),
            fmt_opt(r.many),
            fmt_opt(r.medium),
            fmt_opt(r.few),
        ]);
    }
    t
}

fn write_json<T: Serialize>(path: &Path, cfg: &ExperimentConfig, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("record serializes");
    write_atomic(path, format!("{}{text}\n", header_line(cfg)).as_bytes())
}

/// Reads a JSON artifact, skipping its header comment.
pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let body: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    serde_json::from_str(&body.join("\n")).map_err(|e| CliError::format(path, e))
}

fn write_timing(cfg: &ExperimentConfig, command: &str, seconds: f64) -> CliResult<()> {
    let value = serde_json::json!({ "command": command, "wall_clock_seconds": seconds });
    write_json(&out_dir(cfg).join("timing.json"), cfg, &value)
}

/// Scores every checkpoint on every shift point; writes `evaluation.csv` and
/// `result.json`.
pub fn evaluate(cfg: &ExperimentConfig, checkpoints: &[PathBuf]) -> CliResult<ResultRecord> {
    let start = Instant::now();
    let models = load_models(cfg, checkpoints)?;
    let train_profile = read_profile(&train_profile_path(cfg), cfg.data.mu, ProfileKind::Longtail)?;
    let tests = load_tests(cfg)?;
    let rows = experiment::evaluate(cfg, &models, &train_profile, &tests)?;
    let calibration = calibrate_models(cfg, &models, &tests[0].data)?
        .into_iter()
        .map(|c| CalibrationScalars {
            method: c.method,
            ece: c.report.ece,
            classwise_ece: c.report.classwise_ece,
            brier: c.report.brier,
            nll: c.report.nll,
        })
        .collect();
    let dir = out_dir(cfg);
    eval_table(&rows).write(&dir.join("evaluation.csv"), cfg)?;
    let record = ResultRecord {
        config_hash: cfg.hash(),
        version: ARTIFACT_VERSION.into(),
        seed: cfg.run.seed,
        rows,
        calibration,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    write_json(&dir.join("result.json"), cfg, &record)?;
    write_timing(cfg, "evaluate", record.wall_clock_seconds)?;
    Ok(record)
}

pub fn bins_table(bins: &[BinStat]) -> Table {
    let mut t = Table::new(&BIN_HEADERS);
    for (m, b) in bins.iter().enumerate() {
        t.push(vec![
            (m + 1).to_string(),
            b.count.to_string(),
            fmt_f64(b.acc),
            fmt_f64(b.conf),
        ]);
    }
    t
}

pub fn read_bins(path: &Path) -> CliResult<Vec<BinStat>> {
    let t = Table::read(path)?;
    if t.headers != BIN_HEADERS {
        return Err(CliError::format(path, "expected header bin,count,acc,conf"));
    }
    t.rows
        .iter()
        .map(|r| {
            let bad = |what: &str| CliError::format(path, format!("bad {what}"));
            Ok(BinStat {
                count: r[1].parse().map_err(|_| bad("count"))?,
                acc: r[2].parse().map_err(|_| bad("acc"))?,
                conf: r[3].parse().map_err(|_| bad("conf"))?,
            })
        })
        .collect()
}

/// Calibration tables on the balanced test set for every inference method.
pub fn calibrate(cfg: &ExperimentConfig, checkpoints: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let models = load_models(cfg, checkpoints)?;
    let (dpath, _) = test_paths(cfg, ShiftPoint::UNIFORM);
    let balanced = read_dataset(&dpath, cfg.world.classes)?;
    let dir = out_dir(cfg);
    let mut written = Vec::new();

    let mut scalars = Table::new(&SCALAR_HEADERS);
    for c in calibrate_models(cfg, &models, &balanced)? {
        let r = &c.report;
        scalars.push(vec![
            c.method.clone(),
            fmt_f64(r.ece),
            fmt_f64(r.classwise_ece),
            fmt_f64(r.brier),
            fmt_f64(r.nll),
        ]);
        let path = dir.join(format!("reliability_{}.csv", c.method));
        bins_table(&r.bins).write(&path, cfg)?;
        written.push(path);

        let mut avg = Table::new(&["class", "avg_prob"]);
        for (j, p) in avg_prob_per_class(&c.probs)?.into_iter().enumerate() {
            avg.push(vec![j.to_string(), fmt_f64(p)]);
        }
        let path = dir.join(format!("avg_prob_{}.csv", c.method));
        avg.write(&path, cfg)?;
        written.push(path);
    }
    let path = dir.join("calibration_scalars.csv");
    scalars.write(&path, cfg)?;
    written.push(path);

    for m in &models {
        let logits = m.logits(&balanced)?;
        let mut t = Table::new(&LOGIT_HEADERS);
        for (j, s) in logit_stats_per_class(&logits, balanced.labels())?
            .into_iter()
            .enumerate()
        {
            t.push(vec![
                j.to_string(),
                fmt_opt(s.pos_mean),
                fmt_opt(s.pos_var),
                fmt_opt(s.neg_mean),
                fmt_opt(s.neg_var),
            ]);
        }
        let path = dir.join(format!("logit_stats_{}.csv", m.loss.tag()));
        t.write(&path, cfg)?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    Lambda,
    Alpha,
    Mu,
}

impl std::str::FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "lambda" => Ok(Axis::Lambda),
            "alpha" => Ok(Axis::Alpha),
            "mu" => Ok(Axis::Mu),
            other => Err(format!("unknown sweep axis `{other}` (lambda, alpha, mu)")),
        }
    }
}

/// The method whose accuracy a sweep row reports.
pub fn primary_method(loss: LossKind) -> Method {
    if loss.is_prior_free() {
        Method::Infer
    } else {
        Method::PcSoftmax
    }
}

/// One configuration per point of the cartesian product of `axes`.
pub fn sweep_points(cfg: &ExperimentConfig, axes: &[Axis]) -> CliResult<Vec<ExperimentConfig>> {
    if axes.is_empty() {
        return Err(CliError::Config("sweep needs at least one --axis".into()));
    }
    let mut points = vec![cfg.clone()];
    for (k, &axis) in axes.iter().enumerate() {
        if axes[..k].contains(&axis) {
            return Err(CliError::Config(format!("axis {axis:?} given twice")));
        }
        let values = match axis {
            Axis::Lambda => &cfg.sweep.lambdas,
            Axis::Alpha => &cfg.sweep.alphas,
            Axis::Mu => &cfg.sweep.mus,
        };
        if values.is_empty() {
            return Err(CliError::Config(format!(
                "sweep values for {axis:?} are empty"
            )));
        }
        let mut next = Vec::with_capacity(points.len() * values.len());
        for p in &points {
            for &v in values {
                let mut q = p.clone();
                match axis {
                    Axis::Lambda => {
                        q.loss.kind = "lade".into();
                        q.loss.lambda = v;
                    }
                    Axis::Alpha => {
                        q.loss.kind = "lade".into();
                        q.loss.alpha = v;
                    }
                    Axis::Mu => q.data.mu = v,
                }
                q.validate()?;
                next.push(q);
            }
        }
        points = next;
    }
    Ok(points)
}

/// Trains and scores one sweep point entirely in memory.
pub fn sweep_row(point: &ExperimentConfig) -> CliResult<Vec<String>> {
    let data = experiment::generate(point)?;
    let model = experiment::train_model(point, &data.train)?;
    let models = [model];
    let rows = experiment::evaluate(point, &models, &data.train_profile, &data.tests)?;
    let name = method_name(primary_method(models[0].loss), models[0].loss);
    let mine: Vec<&EvalRow> = rows.iter().filter(|r| r.method == name).collect();
    let uniform = mine[0];
    let shifted: Vec<f64> = mine[1..].iter().map(|r| r.top1).collect();
    let mean_shift = if shifted.is_empty() {
        None
    } else {
        Some(shifted.iter().sum::<f64>() / shifted.len() as f64)
    };
    let cal = calibrate_models(point, &models, &data.tests[0].data)?;
    let ece = cal
        .iter()
        .find(|c| c.method == name)
        .map(|c| c.report.ece)
        .expect("primary method is calibrated");
    let final_loss = models[0]
        .history
        .last()
        .map(|r| r.mean_loss)
        .unwrap_or(f64::NAN);
    Ok(vec![
        point.hash(),
        fmt_f64(point.loss.lambda),
        fmt_f64(point.loss.alpha),
        fmt_f64(point.data.mu),
        fmt_f64(final_loss),
        fmt_f64(uniform.top1),
        fmt_opt(uniform.many),
        fmt_opt(uniform.medium),
        fmt_opt(uniform.few),
        fmt_opt(mean_shift),
        fmt_f64(ece),
    ])
}

pub fn sweep_path(cfg: &ExperimentConfig) -> PathBuf {
    out_dir(cfg).join("sweep.csv")
}

/// Runs every grid point not already present in `sweep.csv` (matched by
/// point hash), rewriting the file after each point.
pub fn sweep(cfg: &ExperimentConfig, axes: &[Axis]) -> CliResult<(PathBuf, usize)> {
    let points = sweep_points(cfg, axes)?;
    let path = sweep_path(cfg);
    let mut table = if path.exists() {
        let t = Table::read(&path)?;
        if t.headers != SWEEP_HEADERS {
            return Err(CliError::format(&path, "unexpected sweep header"));
        }
        t
    } else {
        Table::new(&SWEEP_HEADERS)
    };
    let mut ran = 0;
    for point in &points {
        let hash = point.hash();
        if table.rows.iter().any(|r| r[0] == hash) {
            continue;
        }
        table.push(sweep_row(point)?);
        table.write(&path, cfg)?;
        ran += 1;
    }
    Ok((path, ran))
}
