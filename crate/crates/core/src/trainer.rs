//! Multilayer perceptron, SGD with momentum and weight decay, and the
//! deterministic training loop.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{DiffTensor, Graph, Tensor};
use crate::error::{Error, Result};
use crate::label_space::{counts_slice_to_distribution, LabelDistribution};
use crate::losses::LossKind;
use crate::metrics::argmax;
use crate::rng::{self, DOMAIN_INIT, DOMAIN_SHUFFLE};
use crate::synthetic::Dataset;

/// Checkpoint format version written by [`ModelParams::to_json`].
pub const CHECKPOINT_VERSION: u32 = 1;

/// MLP parameters. Layer `l` maps `dims[l]` to `dims[l + 1]` features with
/// weight `[dims[l], dims[l + 1]]` and bias `[dims[l + 1]]`; ReLU between
/// layers, raw logits at the output.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    dims: Vec<usize>,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    dims: Vec<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl ModelParams {
    pub fn new(dims: Vec<usize>, weights: Vec<Tensor>, biases: Vec<Tensor>) -> Result<Self> {
        check_dims(&dims)?;
        let layers = dims.len() - 1;
        if weights.len() != layers || biases.len() != layers {
            return Err(Error::param(format!(
                "{layers} layers need {layers} weights and biases, got {} and {}",
                weights.len(),
                biases.len()
            )));
        }
        for l in 0..layers {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            if weights[l].shape() != [fan_in, fan_out] {
                return Err(Error::Dimension {
                    op: "layer weight",
                    lhs: weights[l].shape().to_vec(),
                    rhs: vec![fan_in, fan_out],
                });
            }
            if biases[l].shape() != [fan_out] {
                return Err(Error::Dimension {
                    op: "layer bias",
                    lhs: biases[l].shape().to_vec(),
                    rhs: vec![fan_out],
                });
            }
        }
        Ok(Self {
            dims,
            weights,
            biases,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn classes(&self) -> usize {
        *self.dims.last().expect("at least two layer sizes")
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn biases(&self) -> &[Tensor] {
        &self.biases
    }

    /// All parameter tensors, weight then bias per layer.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(Tensor::is_finite)
    }

    /// Records the parameters as graph leaves and returns them with the
    /// logits for `x`.
    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        x: DiffTensor<'g>,
        track: bool,
    ) -> Result<(DiffTensor<'g>, Vec<DiffTensor<'g>>)> {
        let leaf = |t: &Tensor| {
            if track {
                g.var(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let mut leaves = Vec::with_capacity(2 * self.weights.len());
        let mut h = x;
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let (wv, bv) = (leaf(w), leaf(b));
            leaves.push(wv);
            leaves.push(bv);
            h = h.matmul(wv)?.add(bv)?;
            if l < last {
                h = h.relu()?;
            }
        }
        Ok((h, leaves))
    }

    pub fn to_json(&self) -> String {
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            dims: self.dims.clone(),
            weights: self.weights.iter().map(|t| t.data().to_vec()).collect(),
            biases: self.biases.iter().map(|t| t.data().to_vec()).collect(),
        };
        serde_json::to_string_pretty(&ck).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)
            .map_err(|e| Error::param(format!("malformed checkpoint: {e}")))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::param(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        check_dims(&ck.dims)?;
        let layers = ck.dims.len() - 1;
        if ck.weights.len() != layers || ck.biases.len() != layers {
            return Err(Error::param("checkpoint layer count does not match dims"));
        }
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for (l, (w, b)) in ck.weights.into_iter().zip(ck.biases).enumerate() {
            weights.push(Tensor::matrix(ck.dims[l], ck.dims[l + 1], w)?);
            biases.push(Tensor::new(vec![ck.dims[l + 1]], b)?);
        }
        Self::new(ck.dims, weights, biases)
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(Error::param(format!(
            "need at least two positive layer sizes, got {dims:?}"
        )));
    }
    Ok(())
}

/// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
pub fn init_model(dims: &[usize], seed: u64) -> Result<ModelParams> {
    check_dims(dims)?;
    let mut weights = Vec::with_capacity(dims.len() - 1);
    let mut biases = Vec::with_capacity(dims.len() - 1);
    for l in 0..dims.len() - 1 {
        let (fan_in, fan_out) = (dims[l], dims[l + 1]);
        let bound = init_bound(fan_in);
        let mut r = rng::stream(seed, DOMAIN_INIT, l as u64, 0);
        let data = (0..fan_in * fan_out)
            .map(|_| r.random_range(-bound..bound))
            .collect();
        weights.push(Tensor::matrix(fan_in, fan_out, data)?);
        biases.push(Tensor::zeros(&[fan_out]));
    }
    ModelParams::new(dims.to_vec(), weights, biases)
}

pub fn init_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// Raw logits for a `[N, input_dim]` feature matrix.
pub fn predict_logits(model: &ModelParams, features: &Tensor) -> Result<Tensor> {
    if features.rank() != 2 || features.cols() != model.input_dim() {
        return Err(Error::Dimension {
            op: "predict_logits",
            lhs: features.shape().to_vec(),
            rhs: vec![model.input_dim()],
        });
    }
    let g = Graph::new();
    let x = g.constant(features.clone());
    let (logits, _) = model.forward(&g, x, false)?;
    Ok((*logits.value()).clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Schedule {
    Constant,
    /// Cosine decay from the base rate towards zero over the run.
    Cosine,
    /// Multiply by `factor` at each milestone epoch.
    Step {
        milestones: Vec<usize>,
        factor: f64,
    },
}

impl Schedule {
    pub fn lr_at(&self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::Cosine => {
                let t = epoch as f64 / epochs as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
            Schedule::Step { milestones, factor } => {
                let passed = milestones.iter().filter(|&&m| epoch >= m).count();
                base * factor.powi(passed as i32)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub seed: u64,
    pub loss: LossKind,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::param("epochs and batch size must be positive"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::param(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::param(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::param(format!(
                "weight decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        if let Schedule::Step { factor, .. } = &self.schedule {
            if !(*factor > 0.0) {
                return Err(Error::param("step schedule factor must be positive"));
            }
        }
        if let LossKind::Lade { lambda, alpha } = self.loss {
            if !(lambda >= 0.0) || !(alpha >= 0.0) {
                return Err(Error::param("lambda and alpha must be nonnegative"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub train_accuracy: f64,
}

/// Runs `epochs × ceil(N / batch_size)` SGD steps.
///
/// Per step: `v ← momentum·v + g + weight_decay·w`, `w ← w − lr·v`. The
/// sample order of epoch `e` is a shuffle keyed by `(seed, e)`; the last
/// partial batch is kept.
pub fn train(
    model: &ModelParams,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<(ModelParams, Vec<EpochRecord>)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::param("cannot train on an empty dataset"));
    }
    if dataset.dim() != model.input_dim() || dataset.classes() != model.classes() {
        return Err(Error::Dimension {
            op: "train",
            lhs: vec![dataset.dim(), dataset.classes()],
            rhs: vec![model.input_dim(), model.classes()],
        });
    }
    // plain CE ignores the prior
    let source = if config.loss.is_prior_free() {
        counts_slice_to_distribution(dataset.class_counts())?
    } else {
        LabelDistribution::uniform(dataset.classes())?
    };

    let mut params = model.clone();
    let mut velocity: Vec<Tensor> = params.tensors().map(|t| Tensor::zeros(t.shape())).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let n = dataset.len();
    let mut step = 0;

    for epoch in 0..config.epochs {
        let lr = config.schedule.lr_at(config.lr, epoch, config.epochs);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(
            config.seed,
            DOMAIN_SHUFFLE,
            epoch as u64,
            0,
        ));

        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let batch = dataset.subset(chunk)?;
            let g = Graph::new();
            let x = g.constant(batch.features().clone());
            let (logits, leaves) = params.forward(&g, x, true)?;
            let loss = config.loss.evaluate(logits, batch.labels(), &source)?;
            let value = loss.item()?;
            if !value.is_finite() {
                return Err(Error::NonFinite { epoch, step, value });
            }
            loss_sum += value * chunk.len() as f64;
            let lv = logits.value();
            correct += (0..chunk.len())
                .filter(|&i| argmax(lv.row(i)) == batch.labels()[i])
                .count();

            g.backward(loss)?;
            for ((param, vel), leaf) in params.tensors_mut().zip(&mut velocity).zip(&leaves) {
                let grad = leaf.grad().unwrap_or_else(|| Tensor::zeros(param.shape()));
                for ((w, v), gk) in param
                    .data_mut()
                    .iter_mut()
                    .zip(vel.data_mut())
                    .zip(grad.data())
                {
                    *v = config.momentum * *v + gk + config.weight_decay * *w;
                    *w -= lr * *v;
                }
            }
            step += 1;
        }
        history.push(EpochRecord {
            epoch,
            lr,
            mean_loss: loss_sum / n as f64,
            train_accuracy: correct as f64 / n as f64,
        });
    }
    Ok((params, history))
}
