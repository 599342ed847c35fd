//! File formats. Every artifact starts with a `# config_hash=… version=…`
//! line and is written atomically.

use std::fs;
use std::path::{Path, PathBuf};

use ladelab::autodiff::Tensor;
use ladelab::label_space::{CountProfile, LabelDistribution, ProfileKind};
use ladelab::losses::LossKind;
use ladelab::synthetic::Dataset;
use ladelab::trainer::ModelParams;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ARTIFACT_VERSION};
use crate::error::{CliError, CliResult};
use crate::experiment::TrainedModel;

pub fn header_line(cfg: &ExperimentConfig) -> String {
    format!("# config_hash={} version={ARTIFACT_VERSION}\n", cfg.hash())
}

/// Writes to a sibling temp file, then renames over `path`.
pub fn write_atomic(path: &Path, contents: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn fmt_f64(v: f64) -> String {
    v.to_string()
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// A CSV table held as strings.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(headers: &[&str]) -> Self {
        Self {
            headers: headers.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.headers.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }

    pub fn render(&self, header: &str) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.headers).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        let body = String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8");
        format!("{header}{body}")
    }

    pub fn write(&self, path: &Path, cfg: &ExperimentConfig) -> CliResult<()> {
        write_atomic(path, self.render(&header_line(cfg)).as_bytes())
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let mut r = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_path(path)
            .map_err(|e| csv_error(path, e))?;
        let headers = r
            .headers()
            .map_err(|e| csv_error(path, e))?
            .iter()
            .map(String::from)
            .collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| csv_error(path, e))?;
            rows.push(rec.iter().map(String::from).collect());
        }
        Ok(Self { headers, rows })
    }
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        other => CliError::format(path, format!("{other:?}")),
    }
}

fn parse<T: std::str::FromStr>(path: &Path, what: &str, s: &str) -> CliResult<T> {
    s.parse()
        .map_err(|_| CliError::format(path, format!("bad {what} `{s}`")))
}

/// First line of a file, if it is a header comment.
pub fn read_header(path: &Path) -> CliResult<Option<String>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(text
        .lines()
        .next()
        .filter(|l| l.starts_with('#'))
        .map(String::from))
}

/// `label,x0,x1,…`
pub fn dataset_table(data: &Dataset) -> Table {
    let mut headers = vec!["label".to_string()];
    headers.extend((0..data.dim()).map(|j| format!("x{j}")));
    let mut t = Table {
        headers,
        rows: Vec::with_capacity(data.len()),
    };
    for i in 0..data.len() {
        let mut row = vec![data.labels()[i].to_string()];
        row.extend(data.features().row(i).iter().map(|&v| fmt_f64(v)));
        t.rows.push(row);
    }
    t
}

pub fn read_dataset(path: &Path, classes: usize) -> CliResult<Dataset> {
    let t = Table::read(path)?;
    if t.headers.first().map(String::as_str) != Some("label") || t.headers.len() < 2 {
        return Err(CliError::format(path, "expected header label,x0,…"));
    }
    let dim = t.headers.len() - 1;
    let mut labels = Vec::with_capacity(t.rows.len());
    let mut data = Vec::with_capacity(t.rows.len() * dim);
    for row in &t.rows {
        labels.push(parse::<usize>(path, "label", &row[0])?);
        for v in &row[1..] {
            data.push(parse::<f64>(path, "feature", v)?);
        }
    }
    let features = Tensor::matrix(labels.len(), dim, data)?;
    Dataset::new(features, labels, classes).map_err(|e| CliError::format(path, e))
}

/// `class_index,count`
pub fn profile_table(profile: &CountProfile) -> Table {
    let mut t = Table::new(&["class_index", "count"]);
    for (c, n) in profile.counts.iter().enumerate() {
        t.push(vec![c.to_string(), n.to_string()]);
    }
    t
}

pub fn read_profile(path: &Path, mu: f64, kind: ProfileKind) -> CliResult<CountProfile> {
    let t = Table::read(path)?;
    if t.headers != ["class_index", "count"] {
        return Err(CliError::format(path, "expected header class_index,count"));
    }
    let mut counts = Vec::with_capacity(t.rows.len());
    for (i, row) in t.rows.iter().enumerate() {
        if parse::<usize>(path, "class index", &row[0])? != i {
            return Err(CliError::format(path, "class indices must be 0, 1, …"));
        }
        counts.push(parse::<usize>(path, "count", &row[1])?);
    }
    Ok(CountProfile { counts, mu, kind })
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    loss: LossKind,
    source: LabelDistribution,
    model: serde_json::Value,
}

pub fn write_checkpoint(path: &Path, cfg: &ExperimentConfig, m: &TrainedModel) -> CliResult<()> {
    let body = CheckpointFile {
        loss: m.loss,
        source: m.source.clone(),
        model: serde_json::from_str(&m.model.to_json()).expect("model json parses"),
    };
    let text = serde_json::to_string_pretty(&body).expect("checkpoint serializes");
    write_atomic(path, format!("{}{text}\n", header_line(cfg)).as_bytes())
}

pub fn read_checkpoint(path: &Path) -> CliResult<TrainedModel> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let json: String = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .collect::<Vec<_>>()
        .join("\n");
    let body: CheckpointFile =
        serde_json::from_str(&json).map_err(|e| CliError::format(path, e))?;
    let model =
        ModelParams::from_json(&body.model.to_string()).map_err(|e| CliError::format(path, e))?;
    Ok(TrainedModel {
        loss: body.loss,
        source: body.source,
        model,
        history: Vec::new(),
    })
}
