//! Training objectives and the prior-injecting inference rule.
//!
//! All losses take a batch of logits `f` of shape `[N, C]` and return a
//! scalar [`DiffTensor`] on the same graph.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{DiffTensor, Tensor};
use crate::error::{Error, Result};
use crate::label_space::{softmax_rows, LabelDistribution};

pub const DEFAULT_LAMBDA: f64 = 0.1;
pub const DEFAULT_ALPHA: f64 = 0.1;

/// Hyperparameters of the combined loss: DV regularization strength
/// `lambda`, regularizer weight `alpha` and per-class weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LadeConfig {
    pub lambda: f64,
    pub alpha: f64,
    pub class_weights: Vec<f64>,
}

impl LadeConfig {
    /// Per-class weights default to the source prior, so head classes are
    /// regularized more strongly.
    pub fn new(lambda: f64, alpha: f64, source: &LabelDistribution) -> Result<Self> {
        Self::with_weights(lambda, alpha, source.probs().to_vec())
    }

    pub fn with_weights(lambda: f64, alpha: f64, class_weights: Vec<f64>) -> Result<Self> {
        if !(lambda >= 0.0) || !(alpha >= 0.0) {
            return Err(Error::param(format!(
                "lambda and alpha must be nonnegative, got {lambda} and {alpha}"
            )));
        }
        if class_weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::param("class weights must be nonnegative"));
        }
        Ok(Self {
            lambda,
            alpha,
            class_weights,
        })
    }
}

fn check_batch(
    f: &DiffTensor<'_>,
    labels: &[usize],
    classes: Option<usize>,
) -> Result<(usize, usize)> {
    let shape = f.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Dimension {
            op: "loss",
            lhs: shape,
            rhs: vec![labels.len()],
        });
    }
    let (n, c) = (shape[0], shape[1]);
    if n == 0 {
        return Err(Error::param("empty batch"));
    }
    if let Some(expected) = classes {
        if expected != c {
            return Err(Error::Dimension {
                op: "loss",
                lhs: shape,
                rhs: vec![expected],
            });
        }
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Index {
            index: bad,
            bound: c,
        });
    }
    Ok((n, c))
}

/// Mean softmax cross-entropy.
pub fn softmax_ce<'g>(f: DiffTensor<'g>, labels: &[usize]) -> Result<DiffTensor<'g>> {
    let (n, _) = check_batch(&f, labels, None)?;
    let rows: Vec<usize> = (0..n).collect();
    f.log_sum_exp()?.sub(f.gather(&rows, labels)?)?.mean()
}

/// Cross-entropy of the source-prior-weighted softmax, i.e. softmax CE on
/// `f + log p_s`.
pub fn lade_ce<'g>(
    f: DiffTensor<'g>,
    labels: &[usize],
    source: &LabelDistribution,
) -> Result<DiffTensor<'g>> {
    check_batch(&f, labels, Some(source.classes()))?;
    let log_prior = f.graph().constant(Tensor::vector(source.log_probs()));
    softmax_ce(f.add(log_prior)?, labels)
}

/// Per-class regularizer terms for the classes present in the batch:
///
/// `-(1/N_c) Σ_{y_i=c} f[i][c] + Z_c + λ Z_c²`, with
/// `Z_c = log((1/N) Σ_i (p_u(y_i)/p_s(y_i)) e^{f[i][c]})` and `N_c` counted
/// inside the batch.
pub fn lader_per_class<'g>(
    f: DiffTensor<'g>,
    labels: &[usize],
    source: &LabelDistribution,
    lambda: f64,
) -> Result<BTreeMap<usize, DiffTensor<'g>>> {
    let (n, c) = check_batch(&f, labels, Some(source.classes()))?;
    if !(lambda >= 0.0) {
        return Err(Error::param(format!(
            "lambda must be nonnegative, got {lambda}"
        )));
    }
    let g = f.graph();
    let log_uniform = -(c as f64).ln();
    let log_w: Vec<f64> = labels
        .iter()
        .map(|&y| log_uniform - source.probs()[y].ln())
        .collect();
    let log_w = g.constant(Tensor::vector(log_w));
    let log_n = (n as f64).ln();

    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        members.entry(y).or_default().push(i);
    }

    let mut out = BTreeMap::new();
    for (class, rows) in members {
        let positive = f.gather(&rows, &vec![class; rows.len()])?.mean()?.neg()?;
        let log_partition = f
            .column(class)?
            .add(log_w)?
            .log_sum_exp()?
            .add_scalar(-log_n)?;
        let mut term = positive.add(log_partition)?;
        if lambda > 0.0 {
            term = term.add(log_partition.square()?.mul_scalar(lambda)?)?;
        }
        out.insert(class, term);
    }
    Ok(out)
}

/// `Σ_{c in batch} class_weights[c] · lader_c`; weights are not
/// renormalized over the classes present.
pub fn lader<'g>(
    f: DiffTensor<'g>,
    labels: &[usize],
    source: &LabelDistribution,
    config: &LadeConfig,
) -> Result<DiffTensor<'g>> {
    if config.class_weights.len() != source.classes() {
        return Err(Error::param(format!(
            "{} class weights for {} classes",
            config.class_weights.len(),
            source.classes()
        )));
    }
    let terms = lader_per_class(f, labels, source, config.lambda)?;
    let mut total = f.graph().scalar(0.0);
    for (class, term) in terms {
        let w = config.class_weights[class];
        if w != 0.0 {
            total = total.add(term.mul_scalar(w)?)?;
        }
    }
    Ok(total)
}

/// `lade_ce + alpha · lader`. With `alpha == 0` this is exactly
/// [`lade_ce`] (the balanced-softmax objective).
pub fn lade_loss<'g>(
    f: DiffTensor<'g>,
    labels: &[usize],
    source: &LabelDistribution,
    config: &LadeConfig,
) -> Result<DiffTensor<'g>> {
    let ce = lade_ce(f, labels, source)?;
    if config.alpha == 0.0 {
        return Ok(ce);
    }
    ce.add(lader(f, labels, source, config)?.mul_scalar(config.alpha)?)
}

/// `p_t(y) e^{f[y]} / Σ_c p_t(c) e^{f[c]}` row-wise.
pub fn infer_probs(logits: &Tensor, prior: &LabelDistribution) -> Result<Tensor> {
    if logits.rank() != 2 || logits.cols() != prior.classes() {
        return Err(Error::Dimension {
            op: "infer_probs",
            lhs: logits.shape().to_vec(),
            rhs: vec![prior.classes()],
        });
    }
    let lp = prior.log_probs();
    let c = lp.len();
    let shifted = Tensor::new(
        logits.shape().to_vec(),
        logits
            .data()
            .iter()
            .enumerate()
            .map(|(k, v)| v + lp[k % c])
            .collect(),
    )?;
    softmax_rows(&shifted)
}

/// Importance-weighted batch estimate of `E_{x~p_u(x)}[e^{f(x)[c]}]`:
/// `(1/N) Σ_i (p_u(y_i)/p_s(y_i)) e^{f_col[i]}`.
pub fn mc_weighted_expectation(
    logit_column: &[f64],
    labels: &[usize],
    source: &LabelDistribution,
) -> Result<f64> {
    if logit_column.len() != labels.len() || labels.is_empty() {
        return Err(Error::Dimension {
            op: "mc_weighted_expectation",
            lhs: vec![logit_column.len()],
            rhs: vec![labels.len()],
        });
    }
    let c = source.classes();
    let uniform = 1.0 / c as f64;
    let mut acc = 0.0;
    for (&f, &y) in logit_column.iter().zip(labels) {
        if y >= c {
            return Err(Error::Index { index: y, bound: c });
        }
        acc += uniform / source.probs()[y] * f.exp();
    }
    Ok(acc / labels.len() as f64)
}

/// Training objective selector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LossKind {
    Ce,
    LadeCe,
    Lade { lambda: f64, alpha: f64 },
}

impl LossKind {
    pub fn tag(&self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::LadeCe => "lade-ce",
            LossKind::Lade { .. } => "lade",
        }
    }

    /// Whether the trained logits carry the source prior (plain CE) or are
    /// meant to be combined with a prior at inference.
    pub fn is_prior_free(&self) -> bool {
        !matches!(self, LossKind::Ce)
    }

    pub fn evaluate<'g>(
        &self,
        f: DiffTensor<'g>,
        labels: &[usize],
        source: &LabelDistribution,
    ) -> Result<DiffTensor<'g>> {
        match *self {
            LossKind::Ce => softmax_ce(f, labels),
            LossKind::LadeCe => lade_ce(f, labels, source),
            LossKind::Lade { lambda, alpha } => {
                lade_loss(f, labels, source, &LadeConfig::new(lambda, alpha, source)?)
            }
        }
    }
}
