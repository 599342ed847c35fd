//! Accuracy, head/medium/tail group accuracy, calibration metrics and the
//! logit diagnostics.
//!
//! Every reduction runs in ascending sample order so results are
//! bit-reproducible.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::label_space::CountProfile;

pub const DEFAULT_BINS: usize = 20;

/// Classes with more training samples than this are "many-shot".
pub const MANY_SHOT_ABOVE: usize = 100;
/// Classes with fewer training samples than this are "few-shot".
pub const FEW_SHOT_BELOW: usize = 20;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

fn check_inputs(probs: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    if probs.rank() != 2 || probs.rows() != labels.len() {
        return Err(Error::Dimension {
            op: "metric",
            lhs: probs.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let (n, c) = (probs.rows(), probs.cols());
    if n == 0 {
        return Err(Error::param("metrics need at least one sample"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Index {
            index: bad,
            bound: c,
        });
    }
    Ok((n, c))
}

fn check_bins(bins: usize) -> Result<()> {
    if bins == 0 {
        return Err(Error::param("need at least one bin"));
    }
    Ok(())
}

pub fn top1_accuracy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, _) = check_inputs(probs, labels)?;
    let hits = (0..n)
        .filter(|&i| argmax(probs.row(i)) == labels[i])
        .count();
    Ok(hits as f64 / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ShotGroup {
    Many,
    Medium,
    Few,
}

impl ShotGroup {
    pub fn of(train_count: usize) -> Self {
        if train_count > MANY_SHOT_ABOVE {
            ShotGroup::Many
        } else if train_count >= FEW_SHOT_BELOW {
            ShotGroup::Medium
        } else {
            ShotGroup::Few
        }
    }
}

/// Top-1 accuracy per shot group; a group with no test samples is `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
    pub all: f64,
}

pub fn group_accuracy(
    probs: &Tensor,
    labels: &[usize],
    train_counts: &CountProfile,
) -> Result<GroupAccuracy> {
    let (n, c) = check_inputs(probs, labels)?;
    if train_counts.classes() != c {
        return Err(Error::param(format!(
            "training profile has {} classes, predictions have {c}",
            train_counts.classes()
        )));
    }
    let mut hits = [0usize; 3];
    let mut totals = [0usize; 3];
    let slot = |g: ShotGroup| match g {
        ShotGroup::Many => 0,
        ShotGroup::Medium => 1,
        ShotGroup::Few => 2,
    };
    let mut all_hits = 0;
    for i in 0..n {
        let s = slot(ShotGroup::of(train_counts.counts[labels[i]]));
        totals[s] += 1;
        if argmax(probs.row(i)) == labels[i] {
            hits[s] += 1;
            all_hits += 1;
        }
    }
    let frac = |s: usize| (totals[s] > 0).then(|| hits[s] as f64 / totals[s] as f64);
    Ok(GroupAccuracy {
        many: frac(0),
        medium: frac(1),
        few: frac(2),
        all: all_hits as f64 / n as f64,
    })
}

/// Bin `m` (0-based) holds probabilities in `(m/M, (m+1)/M]`; zero falls in
/// the first bin.
pub fn bin_index(p: f64, bins: usize) -> usize {
    let m = bins as f64;
    let mut b = ((p * m).ceil() as usize).clamp(1, bins);
    while b > 1 && p <= (b - 1) as f64 / m {
        b -= 1;
    }
    while b < bins && p > b as f64 / m {
        b += 1;
    }
    b - 1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub count: usize,
    /// Zero for empty bins.
    pub acc: f64,
    /// Zero for empty bins.
    pub conf: f64,
}

fn finish_bins(count: Vec<usize>, hit: Vec<f64>, conf: Vec<f64>) -> Vec<BinStat> {
    count
        .into_iter()
        .zip(hit)
        .zip(conf)
        .map(|((n, h), c)| {
            if n == 0 {
                BinStat {
                    count: 0,
                    acc: 0.0,
                    conf: 0.0,
                }
            } else {
                BinStat {
                    count: n,
                    acc: h / n as f64,
                    conf: c / n as f64,
                }
            }
        })
        .collect()
}

/// Reliability-diagram table on top-1 confidence.
pub fn reliability_bins(probs: &Tensor, labels: &[usize], bins: usize) -> Result<Vec<BinStat>> {
    let (n, _) = check_inputs(probs, labels)?;
    check_bins(bins)?;
    let mut count = vec![0usize; bins];
    let mut hit = vec![0.0; bins];
    let mut conf = vec![0.0; bins];
    for i in 0..n {
        let row = probs.row(i);
        let pred = argmax(row);
        let b = bin_index(row[pred], bins);
        count[b] += 1;
        conf[b] += row[pred];
        if pred == labels[i] {
            hit[b] += 1.0;
        }
    }
    Ok(finish_bins(count, hit, conf))
}

/// `(1/N) Σ_m |B_m| · |acc(B_m) − conf(B_m)|` from a bin table.
pub fn ece_from_bins(table: &[BinStat]) -> f64 {
    let n: usize = table.iter().map(|b| b.count).sum();
    if n == 0 {
        return 0.0;
    }
    let gap: f64 = table
        .iter()
        .map(|b| b.count as f64 * (b.acc - b.conf).abs())
        .sum();
    gap / n as f64
}

pub fn ece(probs: &Tensor, labels: &[usize], bins: usize) -> Result<f64> {
    Ok(ece_from_bins(&reliability_bins(probs, labels, bins)?))
}

/// Classwise ECE. For each class `j`, every sample is binned on its
/// class-`j` probability, accuracy is the rate of `label == j`, and the
/// weighted gap sum is divided by the total sample count `N`; the per-class
/// values are then averaged over classes.
pub fn classwise_ece(probs: &Tensor, labels: &[usize], bins: usize) -> Result<f64> {
    let (n, c) = check_inputs(probs, labels)?;
    check_bins(bins)?;
    if c < 2 {
        return Err(Error::param("classwise ECE needs at least 2 classes"));
    }
    let mut total = 0.0;
    for j in 0..c {
        let mut count = vec![0usize; bins];
        let mut hit = vec![0.0; bins];
        let mut conf = vec![0.0; bins];
        for i in 0..n {
            let p = probs.at(i, j);
            let b = bin_index(p, bins);
            count[b] += 1;
            conf[b] += p;
            if labels[i] == j {
                hit[b] += 1.0;
            }
        }
        total += ece_from_bins(&finish_bins(count, hit, conf));
    }
    Ok(total / c as f64)
}

/// Per-sample mean of `Σ_c (p(c|x) − 1[y = c])²`.
pub fn brier(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, c) = check_inputs(probs, labels)?;
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..c {
            let target = if labels[i] == j { 1.0 } else { 0.0 };
            total += (probs.at(i, j) - target).powi(2);
        }
    }
    Ok(total / n as f64)
}

/// Per-sample mean negative log-likelihood of the true class.
pub fn nll(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, _) = check_inputs(probs, labels)?;
    let mut total = 0.0;
    for i in 0..n {
        let p = probs.at(i, labels[i]);
        if !(p > 0.0) {
            return Err(Error::domain(
                "nll",
                format!("sample {i} gives its true class probability {p}"),
            ));
        }
        total -= p.ln();
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub bins: Vec<BinStat>,
    pub ece: f64,
    pub classwise_ece: f64,
    pub brier: f64,
    pub nll: f64,
}

pub fn calibration_report(
    probs: &Tensor,
    labels: &[usize],
    bins: usize,
) -> Result<CalibrationReport> {
    let table = reliability_bins(probs, labels, bins)?;
    Ok(CalibrationReport {
        ece: ece_from_bins(&table),
        bins: table,
        classwise_ece: classwise_ece(probs, labels, bins)?,
        brier: brier(probs, labels)?,
        nll: nll(probs, labels)?,
    })
}

/// Column means of a probability matrix.
pub fn avg_prob_per_class(probs: &Tensor) -> Result<Vec<f64>> {
    if probs.rank() != 2 || probs.rows() == 0 {
        return Err(Error::param("need a non-empty probability matrix"));
    }
    let (n, c) = (probs.rows(), probs.cols());
    let mut out = vec![0.0; c];
    for i in 0..n {
        for (o, v) in out.iter_mut().zip(probs.row(i)) {
            *o += v;
        }
    }
    Ok(out.into_iter().map(|s| s / n as f64).collect())
}

/// Mean and population variance of one class's logit, split by whether the
/// sample belongs to that class. Absent when a side has no samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogitStats {
    pub pos_mean: Option<f64>,
    pub pos_var: Option<f64>,
    pub neg_mean: Option<f64>,
    pub neg_var: Option<f64>,
}

fn mean_var(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (Some(mean), Some(var))
}

pub fn logit_stats_per_class(logits: &Tensor, labels: &[usize]) -> Result<Vec<LogitStats>> {
    let (n, c) = check_inputs(logits, labels)?;
    let mut out = Vec::with_capacity(c);
    for j in 0..c {
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for i in 0..n {
            if labels[i] == j {
                pos.push(logits.at(i, j));
            } else {
                neg.push(logits.at(i, j));
            }
        }
        let (pos_mean, pos_var) = mean_var(&pos);
        let (neg_mean, neg_var) = mean_var(&neg);
        out.push(LogitStats {
            pos_mean,
            pos_var,
            neg_mean,
            neg_var,
        });
    }
    Ok(out)
}
