//! In-memory pipeline shared by the subcommands: world and data generation,
//! training, and scoring of every inference method on every shift point.

use ladelab::autodiff::Tensor;
use ladelab::label_space::{
    counts_to_distribution, make_longtail, make_shifted_test, pc_softmax_probs, softmax_rows,
    CountProfile, LabelDistribution, ShiftDirection,
};
use ladelab::losses::{infer_probs, LossKind};
use ladelab::metrics::{calibration_report, group_accuracy, CalibrationReport, GroupAccuracy};
use ladelab::synthetic::{make_world, sample, Dataset, MixtureWorld};
use ladelab::trainer::{init_model, predict_logits, train, EpochRecord, ModelParams};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, PriorMode};
use crate::error::CliResult;

/// A test-set label distribution: the balanced pool, or a shifted profile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftPoint {
    pub direction: Option<ShiftDirection>,
    pub mu: f64,
}

impl ShiftPoint {
    pub const UNIFORM: ShiftPoint = ShiftPoint {
        direction: None,
        mu: 1.0,
    };

    pub fn direction_label(&self) -> &'static str {
        self.direction.map_or("uniform", |d| d.as_str())
    }

    /// File-name stem, e.g. `uniform` or `backward_50`.
    pub fn stem(&self) -> String {
        match self.direction {
            None => "uniform".into(),
            Some(d) => format!("{}_{}", d.as_str(), self.mu),
        }
    }
}

pub fn shift_points(cfg: &ExperimentConfig) -> CliResult<Vec<ShiftPoint>> {
    let mut out = vec![ShiftPoint::UNIFORM];
    for d in cfg.shift_directions()? {
        for &mu in &cfg.shift.mus {
            out.push(ShiftPoint {
                direction: Some(d),
                mu,
            });
        }
    }
    Ok(out)
}

pub fn build_world(cfg: &ExperimentConfig) -> CliResult<MixtureWorld> {
    let w = &cfg.world;
    Ok(make_world(
        w.classes,
        w.dim,
        w.spread,
        w.stddev,
        cfg.seeds().world,
    )?)
}

pub fn train_profile(cfg: &ExperimentConfig) -> CliResult<CountProfile> {
    Ok(make_longtail(
        cfg.world.classes,
        cfg.data.n_max,
        cfg.data.mu,
    )?)
}

pub fn test_profile(cfg: &ExperimentConfig, point: ShiftPoint) -> CliResult<CountProfile> {
    let (c, n) = (cfg.world.classes, cfg.shift.n_per_class);
    Ok(match point.direction {
        None => CountProfile::uniform(c, n)?,
        Some(d) => make_shifted_test(c, n, point.mu, d)?,
    })
}

#[derive(Debug, Clone)]
pub struct TestSet {
    pub point: ShiftPoint,
    pub profile: CountProfile,
    pub data: Dataset,
}

#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub world: MixtureWorld,
    pub train_profile: CountProfile,
    pub train: Dataset,
    pub tests: Vec<TestSet>,
}

/// Shifted test sets are per-class prefixes of one balanced pool.
pub fn generate(cfg: &ExperimentConfig) -> CliResult<GeneratedData> {
    let world = build_world(cfg)?;
    let seeds = cfg.seeds();
    let train_profile = train_profile(cfg)?;
    let train = sample(&world, &train_profile, seeds.train_data)?;
    let mut tests = Vec::new();
    for point in shift_points(cfg)? {
        let profile = test_profile(cfg, point)?;
        let data = sample(&world, &profile, seeds.test_data)?;
        tests.push(TestSet {
            point,
            profile,
            data,
        });
    }
    Ok(GeneratedData {
        world,
        train_profile,
        train,
        tests,
    })
}

/// A trained network plus what inference needs to know about its training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub loss: LossKind,
    /// Empirical training label distribution.
    pub source: LabelDistribution,
    pub model: ModelParams,
    /// Empty when loaded from a checkpoint.
    pub history: Vec<EpochRecord>,
}

impl TrainedModel {
    pub fn logits(&self, data: &Dataset) -> CliResult<Tensor> {
        Ok(predict_logits(&self.model, data.features())?)
    }
}

pub fn train_model(cfg: &ExperimentConfig, data: &Dataset) -> CliResult<TrainedModel> {
    let tc = cfg.train_config()?;
    let init = init_model(&cfg.model_dims(), cfg.seeds().init)?;
    let (model, history) = train(&init, data, &tc)?;
    Ok(TrainedModel {
        loss: tc.loss,
        source: ladelab::label_space::counts_slice_to_distribution(data.class_counts())?,
        model,
        history,
    })
}

/// Inference rules applied to a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Softmax of the raw logits.
    Softmax,
    /// Softmax after swapping the training prior for the target prior.
    PcSoftmax,
    /// `softmax(f + log p_t)` on prior-free logits.
    Infer,
    /// `softmax(f + log p_u)`, then post-compensated from `p_u` to `p_t`.
    InferUniformPc,
}

pub fn methods_for(loss: LossKind) -> &'static [Method] {
    if loss.is_prior_free() {
        &[Method::Infer, Method::InferUniformPc]
    } else {
        &[Method::Softmax, Method::PcSoftmax]
    }
}

pub fn method_name(method: Method, loss: LossKind) -> String {
    match method {
        Method::Softmax => "softmax".into(),
        Method::PcSoftmax => "pc-softmax".into(),
        Method::Infer => loss.tag().to_string(),
        Method::InferUniformPc => format!("{}-pu-pc", loss.tag()),
    }
}

pub fn method_probs(
    method: Method,
    model: &TrainedModel,
    logits: &Tensor,
    target: &LabelDistribution,
) -> CliResult<Tensor> {
    Ok(match method {
        Method::Softmax => softmax_rows(logits)?,
        Method::PcSoftmax => pc_softmax_probs(logits, &model.source, target)?,
        Method::Infer => infer_probs(logits, target)?,
        Method::InferUniformPc => {
            let uniform = LabelDistribution::uniform(target.classes())?;
            let log_u = -(target.classes() as f64).ln();
            pc_softmax_probs(&logits.map(|v| v + log_u), &uniform, target)?
        }
    })
}

pub fn target_prior(mode: &PriorMode, profile: &CountProfile) -> CliResult<LabelDistribution> {
    Ok(match mode {
        PriorMode::TrueShift => counts_to_distribution(profile)?,
        PriorMode::Uniform => LabelDistribution::uniform(profile.classes())?,
        PriorMode::Custom(d) => d.clone(),
    })
}

/// One row of the evaluation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: String,
    pub shift_direction: String,
    pub shift_mu: f64,
    pub top1: f64,
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
}

impl EvalRow {
    fn new(method: String, point: ShiftPoint, acc: GroupAccuracy) -> Self {
        Self {
            method,
            shift_direction: point.direction_label().into(),
            shift_mu: point.mu,
            top1: acc.all,
            many: acc.many,
            medium: acc.medium,
            few: acc.few,
        }
    }
}

/// Scores every applicable method of every model on every test set.
pub fn evaluate(
    cfg: &ExperimentConfig,
    models: &[TrainedModel],
    train_profile: &CountProfile,
    tests: &[TestSet],
) -> CliResult<Vec<EvalRow>> {
    let mode = cfg.prior_mode()?;
    let mut rows = Vec::new();
    for m in models {
        for t in tests {
            let target = target_prior(&mode, &t.profile)?;
            let logits = m.logits(&t.data)?;
            for &method in methods_for(m.loss) {
                let probs = method_probs(method, m, &logits, &target)?;
                let acc = group_accuracy(&probs, t.data.labels(), train_profile)?;
                rows.push(EvalRow::new(method_name(method, m.loss), t.point, acc));
            }
        }
    }
    Ok(rows)
}

/// Calibration of one method on the balanced test set (uniform target).
#[derive(Debug, Clone, PartialEq)]
pub struct MethodCalibration {
    pub method: String,
    pub probs: Tensor,
    pub report: CalibrationReport,
}

pub fn calibrate(
    cfg: &ExperimentConfig,
    models: &[TrainedModel],
    balanced: &Dataset,
) -> CliResult<Vec<MethodCalibration>> {
    let uniform = LabelDistribution::uniform(cfg.world.classes)?;
    let mut out = Vec::new();
    for m in models {
        let logits = m.logits(balanced)?;
        for &method in methods_for(m.loss) {
            let probs = method_probs(method, m, &logits, &uniform)?;
            let report = calibration_report(&probs, balanced.labels(), cfg.eval.bins)?;
            out.push(MethodCalibration {
                method: method_name(method, m.loss),
                probs,
                report,
            });
        }
    }
    Ok(out)
}
