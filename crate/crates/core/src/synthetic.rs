//! Isotropic Gaussian-mixture worlds with exact Bayes posteriors.
//!
//! The class-conditional `p(x|y)` is shared by every label distribution, so
//! a world can be sampled under any prior and queried for the exact
//! posterior under any other.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_sum_exp, Tensor};
use crate::error::{Error, Result};
use crate::label_space::{CountProfile, LabelDistribution};
use crate::rng::{self, DOMAIN_SAMPLE, DOMAIN_WORLD};

const PLACEMENT_TRIES: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureWorld {
    means: Vec<Vec<f64>>,
    stddev: f64,
}

impl MixtureWorld {
    pub fn new(means: Vec<Vec<f64>>, stddev: f64) -> Result<Self> {
        if means.len() < 2 {
            return Err(Error::param(format!(
                "a world needs at least 2 classes, got {}",
                means.len()
            )));
        }
        let dim = means[0].len();
        if dim == 0 || means.iter().any(|m| m.len() != dim) {
            return Err(Error::param("class means must share a nonzero dimension"));
        }
        if means.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::param("class means must be finite"));
        }
        if !(stddev > 0.0) || !stddev.is_finite() {
            return Err(Error::param(format!(
                "stddev must be positive, got {stddev}"
            )));
        }
        Ok(Self { means, stddev })
    }

    pub fn classes(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn stddev(&self) -> f64 {
        self.stddev
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Dimension {
                op: "world point",
                lhs: vec![x.len()],
                rhs: vec![self.dim()],
            });
        }
        Ok(())
    }

    fn check_prior(&self, prior: &LabelDistribution) -> Result<()> {
        if prior.classes() != self.classes() {
            return Err(Error::param(format!(
                "prior has {} classes, world has {}",
                prior.classes(),
                self.classes()
            )));
        }
        Ok(())
    }

    /// Normalized log density `log p(x | y)`.
    pub fn log_likelihood(&self, x: &[f64], y: usize) -> Result<f64> {
        self.check_point(x)?;
        let mean = self.means.get(y).ok_or(Error::Index {
            index: y,
            bound: self.classes(),
        })?;
        let var = self.stddev * self.stddev;
        let sq: f64 = x.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
        let d = self.dim() as f64;
        Ok(-0.5 * d * (2.0 * std::f64::consts::PI * var).ln() - sq / (2.0 * var))
    }

    pub fn log_likelihoods(&self, x: &[f64]) -> Result<Vec<f64>> {
        (0..self.classes())
            .map(|y| self.log_likelihood(x, y))
            .collect()
    }
}

/// Places class means on a sphere of radius `spread`, rejecting candidates
/// closer than `spread / 2` to an earlier mean.
pub fn make_world(
    classes: usize,
    dim: usize,
    spread: f64,
    stddev: f64,
    seed: u64,
) -> Result<MixtureWorld> {
    if classes < 2 || dim == 0 {
        return Err(Error::param(format!(
            "need >= 2 classes and dim >= 1, got {classes} classes in dim {dim}"
        )));
    }
    if !(spread > 0.0) || !spread.is_finite() {
        return Err(Error::param(format!(
            "spread must be positive, got {spread}"
        )));
    }
    if dim == 1 {
        if classes > 2 {
            return Err(Error::Construction(format!(
                "cannot place {classes} separated means on a 1-D sphere"
            )));
        }
        return MixtureWorld::new(vec![vec![spread], vec![-spread]], stddev);
    }
    let min_dist = spread / 2.0;
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(classes);
    for c in 0..classes {
        let mut placed = false;
        for attempt in 0..PLACEMENT_TRIES {
            let mut r = rng::stream(seed, DOMAIN_WORLD, c as u64, attempt as u64);
            let v: Vec<f64> = (0..dim).map(|_| r.sample(StandardNormal)).collect();
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if !(norm > 0.0) {
                continue;
            }
            let cand: Vec<f64> = v.iter().map(|a| a / norm * spread).collect();
            let far = means.iter().all(|m| {
                m.iter()
                    .zip(&cand)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
                    >= min_dist
            });
            if far {
                means.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Construction(format!(
                "could not place mean {c} of {classes} in dim {dim} after {PLACEMENT_TRIES} tries"
            )));
        }
    }
    MixtureWorld::new(means, stddev)
}

/// Labelled samples. Rows are grouped by class in ascending class order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    class_counts: Vec<usize>,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.rank() != 2 || features.rows() != labels.len() {
            return Err(Error::Dimension {
                op: "dataset",
                lhs: features.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let mut class_counts = vec![0; classes];
        for &y in &labels {
            *class_counts.get_mut(y).ok_or(Error::Index {
                index: y,
                bound: classes,
            })? += 1;
        }
        Ok(Self {
            features,
            labels,
            class_counts,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    pub fn classes(&self) -> usize {
        self.class_counts.len()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let dim = self.dim();
        let mut data = Vec::with_capacity(indices.len() * dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Index {
                    index: i,
                    bound: self.len(),
                });
            }
            data.extend_from_slice(self.features.row(i));
            labels.push(self.labels[i]);
        }
        Self::new(
            Tensor::matrix(indices.len(), dim, data)?,
            labels,
            self.classes(),
        )
    }
}

/// Draws exactly `profile.counts[c]` points from each class-conditional.
///
/// Sample `k` of class `c` comes from its own stream keyed by
/// `(seed, c, k)`, so a profile with smaller counts yields a prefix of each
/// class block of a larger one.
pub fn sample(world: &MixtureWorld, profile: &CountProfile, seed: u64) -> Result<Dataset> {
    if profile.classes() != world.classes() {
        return Err(Error::param(format!(
            "profile has {} classes, world has {}",
            profile.classes(),
            world.classes()
        )));
    }
    if let Some(c) = profile.counts.iter().position(|&n| n == 0) {
        return Err(Error::param(format!("class {c} has a zero count")));
    }
    let dim = world.dim();
    let total = profile.total();
    let mut data = Vec::with_capacity(total * dim);
    let mut labels = Vec::with_capacity(total);
    for (c, &n) in profile.counts.iter().enumerate() {
        let mean = &world.means[c];
        for k in 0..n {
            let mut r = rng::stream(seed, DOMAIN_SAMPLE, c as u64, k as u64);
            data.extend(mean.iter().map(|m| {
                let z: f64 = r.sample(StandardNormal);
                m + world.stddev * z
            }));
            labels.push(c);
        }
    }
    Dataset::new(Tensor::matrix(total, dim, data)?, labels, world.classes())
}

/// Exact `prior(y) p(x|y) / Σ_c prior(c) p(x|c)`, evaluated in log space.
pub fn bayes_posterior(
    world: &MixtureWorld,
    x: &[f64],
    prior: &LabelDistribution,
) -> Result<Vec<f64>> {
    world.check_prior(prior)?;
    let joint: Vec<f64> = world
        .log_likelihoods(x)?
        .iter()
        .zip(prior.probs())
        .map(|(ll, p)| ll + p.ln())
        .collect();
    let z = log_sum_exp(&joint);
    Ok(joint.iter().map(|j| (j - z).exp()).collect())
}

/// Row-wise [`bayes_posterior`] over a feature matrix.
pub fn bayes_posterior_matrix(
    world: &MixtureWorld,
    features: &Tensor,
    prior: &LabelDistribution,
) -> Result<Tensor> {
    let mut out = Vec::with_capacity(features.rows() * world.classes());
    for i in 0..features.rows() {
        out.extend(bayes_posterior(world, features.row(i), prior)?);
    }
    Tensor::matrix(features.rows(), world.classes(), out)
}

/// `log(p(x|y) / p_u(x))` with `p_u(x) = (1/C) Σ_c p(x|c)`: the logit a
/// prior-free model should converge to.
pub fn true_logit_target(world: &MixtureWorld, x: &[f64], y: usize) -> Result<f64> {
    let lls = world.log_likelihoods(x)?;
    let ll = *lls.get(y).ok_or(Error::Index {
        index: y,
        bound: world.classes(),
    })?;
    Ok(ll - (log_sum_exp(&lls) - (world.classes() as f64).ln()))
}
