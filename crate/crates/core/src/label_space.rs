//! Label distributions, class-count profiles and prior compensation.
//!
//! Class indices are 0-based throughout. Long-tailed and shifted profiles
//! assume classes are sorted by descending training frequency, so class 0 is
//! the head.

use serde::{Deserialize, Serialize};

use crate::autodiff::{log_sum_exp, Tensor};
use crate::error::{Error, Result};

const SUM_TOLERANCE: f64 = 1e-12;

/// Strictly positive probability vector over `C >= 2` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LabelDistribution {
    probs: Vec<f64>,
}

impl LabelDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::param(format!(
                "a label distribution needs at least 2 classes, got {}",
                probs.len()
            )));
        }
        if let Some((c, p)) = probs.iter().enumerate().find(|(_, p)| !(**p > 0.0)) {
            return Err(Error::domain(
                "label distribution",
                format!("class {c} has non-positive probability {p}"),
            ));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::param(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self { probs })
    }

    /// Normalizes nonnegative weights into a distribution.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::param(format!(
                "weights must have a positive finite total, got {total}"
            )));
        }
        Self::new(weights.iter().map(|w| w / total).collect())
    }

    pub fn uniform(classes: usize) -> Result<Self> {
        Self::new(vec![1.0 / classes as f64; classes])
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn classes(&self) -> usize {
        self.probs.len()
    }

    pub fn log_probs(&self) -> Vec<f64> {
        self.probs.iter().map(|p| p.ln()).collect()
    }

    pub fn is_uniform(&self) -> bool {
        let u = 1.0 / self.classes() as f64;
        self.probs.iter().all(|&p| p == u)
    }
}

impl TryFrom<Vec<f64>> for LabelDistribution {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<LabelDistribution> for Vec<f64> {
    fn from(d: LabelDistribution) -> Self {
        d.probs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileKind {
    Longtail,
    Forward,
    Backward,
    Uniform,
}

impl ProfileKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProfileKind::Longtail => "longtail",
            ProfileKind::Forward => "forward",
            ProfileKind::Backward => "backward",
            ProfileKind::Uniform => "uniform",
        }
    }
}

impl std::fmt::Display for ProfileKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Direction of a shifted test profile relative to the training long tail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftDirection {
    /// Head-aligned with the source: large counts on low class indices.
    Forward,
    /// Flipped: large counts on the tail classes.
    Backward,
}

impl ShiftDirection {
    pub fn as_str(&self) -> &'static str {
        match self {
            ShiftDirection::Forward => "forward",
            ShiftDirection::Backward => "backward",
        }
    }
}

impl std::str::FromStr for ShiftDirection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(ShiftDirection::Forward),
            "backward" => Ok(ShiftDirection::Backward),
            other => Err(Error::param(format!("unknown shift direction `{other}`"))),
        }
    }
}

/// Per-class sample counts together with the imbalance ratio that produced
/// them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountProfile {
    pub counts: Vec<usize>,
    pub mu: f64,
    pub kind: ProfileKind,
}

impl CountProfile {
    pub fn uniform(classes: usize, per_class: usize) -> Result<Self> {
        if classes < 2 || per_class == 0 {
            return Err(Error::param(format!(
                "uniform profile needs >= 2 classes and >= 1 sample per class, got {classes} x {per_class}"
            )));
        }
        Ok(Self {
            counts: vec![per_class; classes],
            mu: 1.0,
            kind: ProfileKind::Uniform,
        })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// `max(counts) / min(nonzero counts)` after rounding.
    pub fn realized_ratio(&self) -> f64 {
        let max = self.counts.iter().copied().max().unwrap_or(0);
        let min = self.counts.iter().copied().filter(|&c| c > 0).min();
        match min {
            Some(min) => max as f64 / min as f64,
            None => f64::NAN,
        }
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

fn check_profile_params(classes: usize, top: usize, mu: f64) -> Result<()> {
    if classes < 2 {
        return Err(Error::param(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    if !(mu >= 1.0) || !mu.is_finite() {
        return Err(Error::param(format!(
            "imbalance ratio must be >= 1, got {mu}"
        )));
    }
    if (top as f64) < mu {
        return Err(Error::param(format!(
            "largest class count {top} is below the imbalance ratio {mu}"
        )));
    }
    Ok(())
}

/// Exponentially decaying training profile: `n_max * mu^(-j/(C-1))`, so the
/// endpoint ratio is exactly `mu` before rounding.
pub fn make_longtail(classes: usize, n_max: usize, mu: f64) -> Result<CountProfile> {
    check_profile_params(classes, n_max, mu)?;
    let span = (classes - 1) as f64;
    let counts = (0..classes)
        .map(|j| round_half_up(n_max as f64 * mu.powf(-(j as f64) / span)).max(1))
        .collect();
    Ok(CountProfile {
        counts,
        mu,
        kind: ProfileKind::Longtail,
    })
}

/// Shifted test profile over a pool of `n_per_class` samples per class.
///
/// Forward: `n * mu^(-j/C)`; backward is the same vector reversed.
pub fn make_shifted_test(
    classes: usize,
    n_per_class: usize,
    mu: f64,
    direction: ShiftDirection,
) -> Result<CountProfile> {
    check_profile_params(classes, n_per_class, mu)?;
    let c = classes as f64;
    let count =
        |steps: usize| round_half_up(n_per_class as f64 * mu.powf(-(steps as f64) / c)).max(1);
    let counts = (0..classes)
        .map(|j| match direction {
            ShiftDirection::Forward => count(j),
            ShiftDirection::Backward => count(classes - 1 - j),
        })
        .collect();
    Ok(CountProfile {
        counts,
        mu,
        kind: match direction {
            ShiftDirection::Forward => ProfileKind::Forward,
            ShiftDirection::Backward => ProfileKind::Backward,
        },
    })
}

/// Empirical label distribution `counts / total`.
pub fn counts_to_distribution(profile: &CountProfile) -> Result<LabelDistribution> {
    counts_slice_to_distribution(&profile.counts)
}

pub fn counts_slice_to_distribution(counts: &[usize]) -> Result<LabelDistribution> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::param("cannot normalize all-zero counts"));
    }
    let total = total as f64;
    LabelDistribution::new(counts.iter().map(|&n| n as f64 / total).collect())
}

fn check_same_classes(a: &LabelDistribution, b: &LabelDistribution) -> Result<()> {
    if a.classes() != b.classes() {
        return Err(Error::param(format!(
            "label distributions disagree on class count: {} vs {}",
            a.classes(),
            b.classes()
        )));
    }
    Ok(())
}

/// `w[c] = target(c) / source(c)`.
pub fn importance_weights(
    target: &LabelDistribution,
    source: &LabelDistribution,
) -> Result<Vec<f64>> {
    check_same_classes(target, source)?;
    Ok(target
        .probs()
        .iter()
        .zip(source.probs())
        .map(|(t, s)| t / s)
        .collect())
}

fn check_logit_width(logits: &Tensor, classes: usize) -> Result<()> {
    if logits.rank() != 2 || logits.cols() != classes {
        return Err(Error::Dimension {
            op: "logits",
            lhs: logits.shape().to_vec(),
            rhs: vec![classes],
        });
    }
    Ok(())
}

/// Post-compensation: `f[i][c] - log from(c) + log to(c)`.
pub fn pc_adjust_logits(
    logits: &Tensor,
    from: &LabelDistribution,
    to: &LabelDistribution,
) -> Result<Tensor> {
    check_same_classes(from, to)?;
    check_logit_width(logits, from.classes())?;
    let shift: Vec<f64> = from
        .probs()
        .iter()
        .zip(to.probs())
        .map(|(p, q)| q.ln() - p.ln())
        .collect();
    let c = shift.len();
    let data = logits
        .data()
        .iter()
        .enumerate()
        .map(|(k, v)| v + shift[k % c])
        .collect();
    Tensor::new(logits.shape().to_vec(), data)
}

/// Row-wise max-shifted softmax.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    if logits.rank() != 2 {
        return Err(Error::Dimension {
            op: "softmax",
            lhs: logits.shape().to_vec(),
            rhs: vec![],
        });
    }
    let mut out = Vec::with_capacity(logits.len());
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let lse = log_sum_exp(row);
        out.extend(row.iter().map(|v| (v - lse).exp()));
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Target-domain posterior from a model whose logits are entangled with the
/// source prior: softmax of the post-compensated logits.
pub fn pc_softmax_probs(
    logits: &Tensor,
    source: &LabelDistribution,
    target: &LabelDistribution,
) -> Result<Tensor> {
    softmax_rows(&pc_adjust_logits(logits, source, target)?)
}
