//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::time::{Duration, Instant};

use ladelab::autodiff::{grad_check, Tensor};
use ladelab::label_space::CountProfile;
use ladelab::label_space::{
    counts_to_distribution, pc_softmax_probs, softmax_rows, LabelDistribution,
};
use ladelab::losses::{lade_ce, lade_loss, lader, mc_weighted_expectation, softmax_ce, LadeConfig};
use ladelab::metrics::{
    brier, classwise_ece, ece, ece_from_bins, logit_stats_per_class, nll, reliability_bins,
    top1_accuracy,
};
use ladelab::synthetic::{bayes_posterior, bayes_posterior_matrix, make_world, sample};
use ladelab_cli::commands::{self, Axis, SWEEP_HEADERS};
use ladelab_cli::experiment::{self, method_probs, GeneratedData, Method, TrainedModel};
use ladelab_cli::io::Table;
use ladelab_cli::ExperimentConfig;
use ladelab_validation::{ensure, random_dist, tv, Check};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    id: usize,
    title: &'static str,
    result: Check,
    elapsed: Duration,
    budget: Duration,
}

fn criterion_1() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let c = rng.random_range(2..12);
        let n = rng.random_range(1..6);
        let data: Vec<f64> = (0..n * c).map(|_| rng.random_range(-8.0..8.0)).collect();
        let f = Tensor::matrix(n, c, data).unwrap();
        let (ps, pt) = (random_dist(&mut rng, c), random_dist(&mut rng, c));
        let adjusted = pc_softmax_probs(&f, &ps, &pt).unwrap();
        let source_post = softmax_rows(&f).unwrap();
        for i in 0..n {
            let w: Vec<f64> = (0..c)
                .map(|k| source_post.at(i, k) * pt.probs()[k] / ps.probs()[k])
                .collect();
            let z: f64 = w.iter().sum();
            for k in 0..c {
                worst = worst.max((w[k] / z - adjusted.at(i, k)).abs());
            }
        }
    }
    ensure(
        worst <= 1e-12,
        format!("max elementwise gap {worst:.3e} over 1000 draws"),
    )
}

fn criterion_2() -> Check {
    let world = make_world(4, 2, 2.0, 1.0, 7).unwrap();
    let ps = LabelDistribution::new(vec![0.55, 0.25, 0.15, 0.05]).unwrap();
    let pt = LabelDistribution::new(vec![0.05, 0.15, 0.3, 0.5]).unwrap();
    let points = sample(&world, &CountProfile::uniform(4, 2500).unwrap(), 11).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..points.len() {
        let x = points.features().row(i);
        let log_post: Vec<f64> = bayes_posterior(&world, x, &ps)
            .unwrap()
            .iter()
            .map(|p| p.ln())
            .collect();
        let adjusted =
            pc_softmax_probs(&Tensor::matrix(1, 4, log_post).unwrap(), &ps, &pt).unwrap();
        let oracle = bayes_posterior(&world, x, &pt).unwrap();
        worst = worst.max(tv(adjusted.data(), &oracle));
    }
    ensure(
        worst <= 1e-10,
        format!(
            "max total variation {worst:.3e} over {} points",
            points.len()
        ),
    )
}

fn random_batch(rng: &mut ChaCha8Rng) -> (Tensor, Vec<usize>, LabelDistribution) {
    let c = rng.random_range(2..7);
    let n = rng.random_range(1..10);
    let data = (0..n * c).map(|_| rng.random_range(-3.0..3.0)).collect();
    let labels = (0..n).map(|_| rng.random_range(0..c)).collect();
    (
        Tensor::matrix(n, c, data).unwrap(),
        labels,
        random_dist(rng, c),
    )
}

fn criterion_3() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = [0.0f64; 4];
    for _ in 0..50 {
        let (x, y, ps) = random_batch(&mut rng);
        let lambda = rng.random_range(0.0..1.0);
        let alpha = rng.random_range(0.0..1.0);
        let cfg = LadeConfig::new(lambda, alpha, &ps).unwrap();
        let errs = [
            grad_check(|_, f| softmax_ce(f, &y), &x, 1e-5),
            grad_check(|_, f| lade_ce(f, &y, &ps), &x, 1e-5),
            grad_check(|_, f| lader(f, &y, &ps, &cfg), &x, 1e-5),
            grad_check(|_, f| lade_loss(f, &y, &ps, &cfg), &x, 1e-5),
        ];
        for (w, e) in worst.iter_mut().zip(errs) {
            *w = w.max(e.map_err(|e| e.to_string())?);
        }
    }
    let max = worst.iter().cloned().fold(0.0, f64::max);
    ensure(
        max <= 1e-4,
        format!(
            "max relative error ce {:.1e}, lade-ce {:.1e}, lader {:.1e}, lade {:.1e}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

fn criterion_4() -> Check {
    let px_given_y = [[0.4, 0.3, 0.2, 0.1], [0.1, 0.2, 0.3, 0.4]];
    let f = [0.5, -0.2, 1.0, 0.3];
    let ps = LabelDistribution::new(vec![0.9, 0.1]).unwrap();
    let exact: f64 = (0..4)
        .map(|x| 0.5 * (px_given_y[0][x] + px_given_y[1][x]) * f64::exp(f[x]))
        .sum();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let reps = 10_000;
    let mut estimates = Vec::with_capacity(reps);
    for _ in 0..reps {
        let mut col = Vec::with_capacity(32);
        let mut labels = Vec::with_capacity(32);
        for _ in 0..32 {
            let y = usize::from(rng.random::<f64>() >= 0.9);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut x = 3;
            for (k, p) in px_given_y[y].iter().enumerate() {
                acc += p;
                if u < acc {
                    x = k;
                    break;
                }
            }
            col.push(f[x]);
            labels.push(y);
        }
        estimates.push(mc_weighted_expectation(&col, &labels, &ps).map_err(|e| e.to_string())?);
    }
    let mean = estimates.iter().sum::<f64>() / reps as f64;
    let var = estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
    let se = (var / reps as f64).sqrt();
    let z = (mean - exact).abs() / se;
    ensure(
        z <= 3.0,
        format!("mean {mean:.5} vs exact {exact:.5}, {z:.2} standard errors"),
    )
}

/// The shared world for criteria 6 to 9: C = 10, imbalance 100.
fn acceptance_config() -> ExperimentConfig {
    ExperimentConfig::default()
}

fn mean_positive_logit(
    model: &TrainedModel,
    data: &ladelab::synthetic::Dataset,
) -> Result<f64, String> {
    let logits = model.logits(data).map_err(|e| e.to_string())?;
    let stats = logit_stats_per_class(&logits, data.labels()).map_err(|e| e.to_string())?;
    let means: Vec<f64> = stats.iter().filter_map(|s| s.pos_mean).collect();
    Ok(means.iter().sum::<f64>() / means.len() as f64)
}

fn criterion_5() -> Check {
    let log_c = 10f64.ln();
    let mut gaps = Vec::new();
    let mut report = Vec::new();
    for alpha in [0.0, 0.1, 0.5] {
        let cfg = ExperimentConfig::parse(
            "",
            &[
                "world.spread=8.0".into(),
                "data.n_max=800".into(),
                "loss.kind=lade".into(),
                format!("loss.alpha={alpha}"),
            ],
        )
        .map_err(|e| e.to_string())?;
        let data = experiment::generate(&cfg).map_err(|e| e.to_string())?;
        let model = experiment::train_model(&cfg, &data.train).map_err(|e| e.to_string())?;
        let pm = mean_positive_logit(&model, &data.tests[0].data)?;
        gaps.push((pm - log_c).abs());
        report.push(format!(
            "alpha {alpha}: mean {pm:.3} gap {:.3}",
            (pm - log_c).abs()
        ));
    }
    let monotone = gaps.windows(2).all(|w| w[1] < w[0]);
    let close = gaps[2] <= 0.5;
    let detail = format!(
        "{}; monotone {monotone}, gap at 0.5 within 0.5 {close}",
        report.join(", ")
    );
    ensure(monotone && close, detail)
}

struct Trained {
    cfg: ExperimentConfig,
    data: GeneratedData,
    ce: TrainedModel,
    lade: TrainedModel,
}

fn train_acceptance_models() -> Result<Trained, String> {
    let cfg = acceptance_config();
    let data = experiment::generate(&cfg).map_err(|e| e.to_string())?;
    let mut ce_cfg = cfg.clone();
    ce_cfg.loss.kind = "ce".into();
    let ce = experiment::train_model(&ce_cfg, &data.train).map_err(|e| e.to_string())?;
    let lade = experiment::train_model(&cfg, &data.train).map_err(|e| e.to_string())?;
    Ok(Trained {
        cfg,
        data,
        ce,
        lade,
    })
}

fn criterion_6(t: &Trained) -> Check {
    let rows = experiment::evaluate(
        &t.cfg,
        &[t.ce.clone(), t.lade.clone()],
        &t.data.train_profile,
        &t.data.tests,
    )
    .map_err(|e| e.to_string())?;
    let top1 = |method: &str, dir: &str, mu: f64| {
        rows.iter()
            .find(|r| r.method == method && r.shift_direction == dir && r.shift_mu == mu)
            .map(|r| r.top1)
            .expect("row present")
    };
    let plain = top1("softmax", "backward", 50.0);
    let pc = top1("pc-softmax", "backward", 50.0);
    let mut ok = pc - plain >= 0.05;
    let mut detail = format!("backward-50 softmax {plain:.4} pc {pc:.4}");
    let mut worst_gap = f64::INFINITY;
    for dir in ["forward", "backward"] {
        for mu in [2.0, 10.0, 50.0] {
            let gap = top1("lade", dir, mu) - top1("pc-softmax", dir, mu);
            worst_gap = worst_gap.min(gap);
        }
    }
    ok &= worst_gap >= -0.01;
    detail += &format!(", min lade minus pc {worst_gap:+.4}");

    let balanced = &t.data.tests[0].data;
    let logits = t.ce.logits(balanced).map_err(|e| e.to_string())?;
    let a =
        method_probs(Method::Softmax, &t.ce, &logits, &t.ce.source).map_err(|e| e.to_string())?;
    let b =
        method_probs(Method::PcSoftmax, &t.ce, &logits, &t.ce.source).map_err(|e| e.to_string())?;
    let acc_a = top1_accuracy(&a, balanced.labels()).unwrap();
    let acc_b = top1_accuracy(&b, balanced.labels()).unwrap();
    let identical = a
        .data()
        .iter()
        .zip(b.data())
        .all(|(x, y)| x.to_bits() == y.to_bits());
    ok &= identical && acc_a == acc_b;
    detail += &format!(", at p_t = p_s probabilities bit-identical {identical} (top-1 {acc_a:.4})");
    ensure(ok, detail)
}

fn criterion_7(t: &Trained) -> Check {
    let mut ok = true;
    let mut parts = Vec::new();
    for test in &t.data.tests {
        let name = match (test.point.direction_label(), test.point.mu) {
            ("uniform", _) => "uniform",
            ("backward", 10.0) => "backward-10",
            _ => continue,
        };
        let pt = counts_to_distribution(&test.profile).unwrap();
        let logits = t.lade.logits(&test.data).map_err(|e| e.to_string())?;
        let ours = method_probs(Method::Infer, &t.lade, &logits, &pt).map_err(|e| e.to_string())?;
        let oracle = bayes_posterior_matrix(&t.data.world, test.data.features(), &pt).unwrap();
        let n = oracle.rows();
        let mean = (0..n).map(|i| tv(ours.row(i), oracle.row(i))).sum::<f64>() / n as f64;
        ok &= mean <= 0.1;
        parts.push(format!("{name} mean TV {mean:.4}"));
    }
    ensure(ok && parts.len() == 2, parts.join(", "))
}

fn criterion_8(t: &Trained) -> Check {
    let balanced = &t.data.tests[0].data;
    let uniform = LabelDistribution::uniform(t.cfg.world.classes).unwrap();
    let bins = t.cfg.eval.bins;
    let ce_logits = t.ce.logits(balanced).map_err(|e| e.to_string())?;
    let ce_probs =
        method_probs(Method::Softmax, &t.ce, &ce_logits, &uniform).map_err(|e| e.to_string())?;
    let lade_logits = t.lade.logits(balanced).map_err(|e| e.to_string())?;
    let lade_probs =
        method_probs(Method::Infer, &t.lade, &lade_logits, &uniform).map_err(|e| e.to_string())?;
    let y = balanced.labels();
    let e_ce = ece(&ce_probs, y, bins).unwrap();
    let e_lade = ece(&lade_probs, y, bins).unwrap();
    let bit_exact = [&ce_probs, &lade_probs].iter().all(|p| {
        let table = reliability_bins(p, y, bins).unwrap();
        ece_from_bins(&table).to_bits() == ece(p, y, bins).unwrap().to_bits()
    });
    ensure(
        e_lade <= e_ce && bit_exact,
        format!(
            "ECE lade {e_lade:.4} vs ce softmax {e_ce:.4}, bins recompose bit-exactly {bit_exact}"
        ),
    )
}

fn criterion_9() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = acceptance_config();
    cfg.output.dir = dir.path().to_string_lossy().into_owned();
    cfg.sweep.alphas = vec![0.0, ladelab::losses::DEFAULT_ALPHA];
    cfg.sweep.lambdas = vec![0.0, ladelab::losses::DEFAULT_LAMBDA];
    let (path, ran) =
        commands::sweep(&cfg, &[Axis::Alpha, Axis::Lambda]).map_err(|e| e.to_string())?;
    let table = Table::read(&path).map_err(|e| e.to_string())?;
    let populated = ran == 4
        && table.rows.len() == 4
        && table.headers == SWEEP_HEADERS
        && table.rows.iter().all(|r| {
            r.iter()
                .zip(&table.headers)
                .all(|(v, h)| !v.is_empty() || ["many", "medium", "few"].contains(&h.as_str()))
        });

    let mut ce_cfg = cfg.clone();
    ce_cfg.loss.kind = "lade-ce".into();
    let data = experiment::generate(&ce_cfg).map_err(|e| e.to_string())?;
    let model = experiment::train_model(&ce_cfg, &data.train).map_err(|e| e.to_string())?;
    let rows = experiment::evaluate(
        &ce_cfg,
        std::slice::from_ref(&model),
        &data.train_profile,
        &data.tests,
    )
    .map_err(|e| e.to_string())?;
    let loss = model.history.last().unwrap().mean_loss.to_string();
    let top1 = rows[0].top1.to_string();
    let alpha_col = table.column("alpha").unwrap();
    let zero_rows: Vec<&Vec<String>> = table.rows.iter().filter(|r| r[alpha_col] == "0").collect();
    let identical = zero_rows.len() == 2
        && zero_rows.iter().all(|r| {
            r[table.column("final_loss").unwrap()] == loss
                && r[table.column("top1").unwrap()] == top1
        });
    ensure(
        populated && identical,
        format!(
            "{} rows, all metric cells populated {populated}, alpha=0 rows identical to lade-ce run {identical}",
            table.rows.len()
        ),
    )
}

fn criterion_10() -> Check {
    let probs = Tensor::from_rows(&[
        vec![0.7, 0.2, 0.1],
        vec![0.3, 0.6, 0.1],
        vec![0.25, 0.25, 0.5],
        vec![0.1, 0.45, 0.45],
    ])
    .unwrap();
    let y = [0, 0, 2, 1];
    // two bins; sample 3 ties between classes 1 and 2 and predicts class 1
    let expected = [
        ("ece", 27.0 / 80.0, ece(&probs, &y, 2).unwrap()),
        (
            "classwise_ece",
            1.0 / 8.0,
            classwise_ece(&probs, &y, 2).unwrap(),
        ),
        ("brier", 189.0 / 400.0, brier(&probs, &y).unwrap()),
        (
            "nll",
            -(0.7f64.ln() + 0.3f64.ln() + 0.5f64.ln() + 0.45f64.ln()) / 4.0,
            nll(&probs, &y).unwrap(),
        ),
    ];
    let worst = expected
        .iter()
        .map(|(_, e, g)| (e - g).abs())
        .fold(0.0, f64::max);
    let detail = expected
        .iter()
        .map(|(n, _, g)| format!("{n} {g:.6}"))
        .collect::<Vec<_>>()
        .join(", ");
    ensure(
        worst <= 1e-12,
        format!("{detail}; max deviation {worst:.1e}"),
    )
}

fn timed(id: usize, title: &'static str, budget_s: u64, f: impl FnOnce() -> Check) -> Outcome {
    let start = Instant::now();
    let result = f();
    Outcome {
        id,
        title,
        result,
        elapsed: start.elapsed(),
        budget: Duration::from_secs(budget_s),
    }
}

fn main() {
    let mut outcomes = vec![
        timed(1, "prior swap identity", 1, criterion_1),
        timed(2, "oracle-level prior swap", 10, criterion_2),
        timed(3, "loss gradients", 30, criterion_3),
        timed(4, "importance-weighted estimator", 10, criterion_4),
        timed(5, "logit convergence", 300, criterion_5),
    ];
    let start = Instant::now();
    let trained = train_acceptance_models();
    let train_time = start.elapsed();
    match &trained {
        Ok(t) => {
            let mut o6 = timed(6, "shift adaptation", 600, || criterion_6(t));
            o6.elapsed += train_time;
            outcomes.push(o6);
            outcomes.push(timed(7, "posterior matching", 600, || criterion_7(t)));
            outcomes.push(timed(8, "calibration direction", 60, || criterion_8(t)));
        }
        Err(e) => {
            for (id, title) in [
                (6, "shift adaptation"),
                (7, "posterior matching"),
                (8, "calibration direction"),
            ] {
                outcomes.push(Outcome {
                    id,
                    title,
                    result: Err(format!("training failed: {e}")),
                    elapsed: train_time,
                    budget: Duration::from_secs(600),
                });
            }
        }
    }
    outcomes.push(timed(9, "ablation sweep", 1200, criterion_9));
    outcomes.push(timed(10, "metric oracles", 1, criterion_10));

    let mut failed = 0;
    for o in &outcomes {
        let in_time = o.elapsed <= o.budget;
        let (status, detail) = match &o.result {
            Ok(d) if in_time => ("PASS", d.clone()),
            Ok(d) => (
                "FAIL",
                format!("{d}; over the {}s budget", o.budget.as_secs()),
            ),
            Err(d) => ("FAIL", d.clone()),
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!(
            "criterion {:>2} {status} {} ({:.2}s): {detail}",
            o.id,
            o.title,
            o.elapsed.as_secs_f64()
        );
    }
    println!(
        "acceptance: {} of {} criteria passed",
        outcomes.len() - failed,
        outcomes.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
