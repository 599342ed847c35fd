use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use ladelab::label_space::LabelDistribution;
use ladelab::metrics::ece_from_bins;
use ladelab_cli::commands::{self, Axis};
use ladelab_cli::experiment::{self, method_probs, Method};
use ladelab_cli::io::{read_checkpoint, Table};
use ladelab_cli::ExperimentConfig;

const SMALL: &[&str] = &[
    "world.classes=4",
    "world.dim=2",
    "world.spread=3.0",
    "data.n_max=120",
    "data.mu=10",
    "shift.n_per_class=60",
    "shift.mus=[1, 10, 50]",
    "model.hidden=[8]",
    "train.epochs=3",
    "train.batch_size=16",
];

fn small(dir: &Path, extra: &[&str]) -> ExperimentConfig {
    let mut sets: Vec<String> = SMALL.iter().map(|s| s.to_string()).collect();
    sets.extend(extra.iter().map(|s| s.to_string()));
    sets.push(format!("output.dir=\"{}\"", dir.display()));
    ExperimentConfig::parse("", &sets).unwrap()
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ladelab"))
}

fn run_bin(dir: &Path, args: &[&str], extra: &[&str]) -> std::process::Output {
    let mut c = bin();
    c.args(args).arg("--out").arg(dir);
    for s in SMALL.iter().chain(extra) {
        c.arg("--set").arg(s);
    }
    c.output().unwrap()
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        let name = p.file_name().unwrap().to_string_lossy().into_owned();
        if name != "timing.json" {
            out.insert(name, fs::read(&p).unwrap());
        }
    }
    out
}

fn column(t: &Table, name: &str) -> Vec<String> {
    let j = t.column(name).unwrap();
    t.rows.iter().map(|r| r[j].clone()).collect()
}

#[test]
fn gen_data_grid_and_determinism() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    commands::gen_data(&small(a.path(), &[])).unwrap();
    commands::gen_data(&small(b.path(), &[])).unwrap();
    let fa = files(a.path());
    assert_eq!(fa, files(b.path()));
    let tests: Vec<&String> = fa.keys().filter(|k| k.starts_with("test_")).collect();
    // {forward, backward} x {1, 10, 50} plus the balanced pool
    assert_eq!(tests.len(), 7, "{tests:?}");
    assert!(fa.contains_key("test_uniform.csv"));
    assert!(fa.contains_key("test_backward_50.csv"));
    assert!(fa.contains_key("profile_train.csv"));
}

#[test]
fn emitted_profiles_match_recomputed_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), &[]);
    commands::gen_data(&cfg).unwrap();
    let (c, n) = (4usize, 60.0f64);
    for (dir_name, mu) in [("forward", 10.0f64), ("backward", 50.0)] {
        let t = Table::read(&dir.path().join(format!("profile_{dir_name}_{mu}.csv"))).unwrap();
        let got: Vec<usize> = column(&t, "count")
            .iter()
            .map(|v| v.parse().unwrap())
            .collect();
        let mut want: Vec<usize> = (0..c)
            .map(|j| (n * mu.powf(-(j as f64) / c as f64) + 0.5).floor() as usize)
            .collect();
        if dir_name == "backward" {
            want.reverse();
        }
        assert_eq!(got, want);
        let data = Table::read(&dir.path().join(format!("test_{dir_name}_{mu}.csv"))).unwrap();
        assert_eq!(data.rows.len(), want.iter().sum::<usize>());
    }
    let t = Table::read(&dir.path().join("profile_train.csv")).unwrap();
    let got: Vec<usize> = column(&t, "count")
        .iter()
        .map(|v| v.parse().unwrap())
        .collect();
    let want: Vec<usize> = (0..c)
        .map(|j| (120.0 * 10f64.powf(-(j as f64) / 3.0) + 0.5).floor() as usize)
        .collect();
    assert_eq!(got, want);
}

#[test]
fn every_artifact_starts_with_header() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), &[]);
    commands::gen_data(&cfg).unwrap();
    commands::train(&cfg).unwrap();
    commands::evaluate(&cfg, &[]).unwrap();
    commands::calibrate(&cfg, &[]).unwrap();
    let expect = format!("# config_hash={} version=", cfg.hash());
    for (name, bytes) in files(dir.path()) {
        let text = String::from_utf8(bytes).unwrap();
        assert!(text.starts_with(&expect), "{name}");
    }
}

#[test]
fn ce_and_lade_without_regularizer_share_history_on_balanced_data() {
    let dir = tempfile::tempdir().unwrap();
    let ce = small(dir.path(), &["data.mu=1", "loss.kind=ce"]);
    let lade = small(dir.path(), &["data.mu=1", "loss.kind=lade", "loss.alpha=0"]);
    commands::gen_data(&ce).unwrap();
    commands::train(&ce).unwrap();
    commands::train(&lade).unwrap();
    let h_ce = Table::read(&dir.path().join("history_ce.csv")).unwrap();
    let h_lade = Table::read(&dir.path().join("history_lade.csv")).unwrap();
    let a = column(&h_ce, "mean_loss");
    let b = column(&h_lade, "mean_loss");
    assert_eq!(a.len(), 3);
    for (x, y) in a.iter().zip(&b) {
        let (x, y): (f64, f64) = (x.parse().unwrap(), y.parse().unwrap());
        assert!(x.is_finite());
        assert!((x - y).abs() <= 1e-10, "{x} vs {y}");
    }
}

#[test]
fn training_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), &[]);
    commands::gen_data(&cfg).unwrap();
    let (ckpt, _) = commands::train(&cfg).unwrap();
    let first = fs::read(&ckpt).unwrap();
    commands::train(&cfg).unwrap();
    assert_eq!(first, fs::read(&ckpt).unwrap());
}

#[test]
fn pc_softmax_with_source_prior_is_plain_softmax() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), &["loss.kind=ce"]);
    commands::gen_data(&cfg).unwrap();
    let (ckpt, _) = commands::train(&cfg).unwrap();
    let model = read_checkpoint(&ckpt).unwrap();
    let custom: Vec<String> = model.source.probs().iter().map(|p| p.to_string()).collect();
    let set = format!("eval.custom=[{}]", custom.join(", "));
    let cfg = small(dir.path(), &["loss.kind=ce", "eval.prior=custom", &set]);
    commands::evaluate(&cfg, &[]).unwrap();
    let t = Table::read(&dir.path().join("evaluation.csv")).unwrap();
    let methods = column(&t, "method");
    let top1 = column(&t, "top1");
    let plain: Vec<&String> = (0..t.rows.len())
        .filter(|&i| methods[i] == "softmax")
        .map(|i| &top1[i])
        .collect();
    let pc: Vec<&String> = (0..t.rows.len())
        .filter(|&i| methods[i] == "pc-softmax")
        .map(|i| &top1[i])
        .collect();
    assert_eq!(plain.len(), 7);
    assert_eq!(plain, pc);
}

#[test]
fn pc_softmax_moves_only_under_nonuniform_source() {
    for (mu, should_differ) in [(10.0, true), (1.0, false)] {
        let dir = tempfile::tempdir().unwrap();
        let set = format!("data.mu={mu}");
        let cfg = small(dir.path(), &["loss.kind=ce", &set]);
        let data = experiment::generate(&cfg).unwrap();
        let m = experiment::train_model(&cfg, &data.train).unwrap();
        let uniform = LabelDistribution::uniform(4).unwrap();
        let logits = m.logits(&data.tests[0].data).unwrap();
        let plain = method_probs(Method::Softmax, &m, &logits, &uniform).unwrap();
        let pc = method_probs(Method::PcSoftmax, &m, &logits, &uniform).unwrap();
        let gap = plain
            .data()
            .iter()
            .zip(pc.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert_eq!(gap > 1e-9, should_differ, "mu {mu}: gap {gap}");
    }
}

#[test]
fn evaluation_table_shape() {
    let dir = tempfile::tempdir().unwrap();
    let ce = small(dir.path(), &["loss.kind=ce"]);
    let lade = small(dir.path(), &["loss.kind=lade"]);
    commands::gen_data(&ce).unwrap();
    commands::train(&ce).unwrap();
    commands::train(&lade).unwrap();
    let record = commands::evaluate(&lade, &[]).unwrap();
    let t = Table::read(&dir.path().join("evaluation.csv")).unwrap();
    assert_eq!(t.headers, commands::EVAL_HEADERS);
    // 2 checkpoints x 2 methods x 7 shift points
    assert_eq!(t.rows.len(), 28);
    let methods: std::collections::BTreeSet<String> = column(&t, "method").into_iter().collect();
    let want: std::collections::BTreeSet<String> = ["lade", "lade-pu-pc", "softmax", "pc-softmax"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    assert_eq!(methods, want);
    let back: commands::ResultRecord =
        commands::read_json(&dir.path().join("result.json")).unwrap();
    assert_eq!(back.rows, record.rows);
    assert_eq!(back.calibration, record.calibration);
    assert_eq!(back.config_hash, lade.hash());
    assert!(dir.path().join("timing.json").exists());
}

#[test]
fn calibration_tables_recompose_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), &["loss.kind=ce"]);
    commands::gen_data(&cfg).unwrap();
    commands::train(&cfg).unwrap();
    commands::calibrate(&cfg, &[]).unwrap();
    let scalars = Table::read(&dir.path().join("calibration_scalars.csv")).unwrap();
    assert_eq!(scalars.headers, commands::SCALAR_HEADERS);
    for (k, method) in column(&scalars, "method").iter().enumerate() {
        let path = dir.path().join(format!("reliability_{method}.csv"));
        let bins = commands::read_bins(&path).unwrap();
        assert_eq!(bins.len(), cfg.eval.bins);
        let ece: f64 = scalars.rows[k][1].parse().unwrap();
        assert_eq!(ece_from_bins(&bins).to_bits(), ece.to_bits());
        let rendered = commands::bins_table(&bins).render("");
        let again = Table::read(&path).unwrap().render("");
        assert_eq!(rendered, again);
    }
    let stats = Table::read(&dir.path().join("logit_stats_ce.csv")).unwrap();
    assert_eq!(stats.headers, commands::LOGIT_HEADERS);
    assert_eq!(stats.rows.len(), 4);
    let avg = Table::read(&dir.path().join("avg_prob_softmax.csv")).unwrap();
    let total: f64 = column(&avg, "avg_prob")
        .iter()
        .map(|v| v.parse::<f64>().unwrap())
        .sum();
    assert!((total - 1.0).abs() <= 1e-12);
}

#[test]
fn sweep_alpha_axis_is_resumable_and_matches_lade_ce() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), &["sweep.alphas=[0, 0.1, 0.5]"]);
    let (path, ran) = commands::sweep(&cfg, &[Axis::Alpha]).unwrap();
    assert_eq!(ran, 3);
    let first = fs::read(&path).unwrap();
    let t = Table::read(&path).unwrap();
    assert_eq!(t.rows.len(), 3);

    let (_, ran) = commands::sweep(&cfg, &[Axis::Alpha]).unwrap();
    assert_eq!(ran, 0);
    assert_eq!(first, fs::read(&path).unwrap());

    let ce_only = small(dir.path(), &["loss.kind=lade-ce"]);
    let data = experiment::generate(&ce_only).unwrap();
    let m = experiment::train_model(&ce_only, &data.train).unwrap();
    let loss: f64 = t.rows[0][4].parse().unwrap();
    assert_eq!(
        loss.to_bits(),
        m.history.last().unwrap().mean_loss.to_bits()
    );
    let rows = experiment::evaluate(&ce_only, &[m], &data.train_profile, &data.tests).unwrap();
    assert_eq!(t.rows[0][5], rows[0].top1.to_string());
}

#[test]
fn sweep_lambda_changes_the_loss() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), &["sweep.lambdas=[0, 0.1]", "loss.alpha=0.5"]);
    let (path, _) = commands::sweep(&cfg, &[Axis::Lambda]).unwrap();
    let t = Table::read(&path).unwrap();
    assert_ne!(t.rows[0][4], t.rows[1][4]);
}

#[test]
fn end_to_end_outputs_are_byte_identical() {
    let run = |dir: &Path| {
        let ce = small(dir, &["loss.kind=ce"]);
        let lade = small(dir, &[]);
        commands::gen_data(&lade).unwrap();
        commands::train(&ce).unwrap();
        commands::train(&lade).unwrap();
        commands::evaluate(&lade, &[]).unwrap();
        commands::calibrate(&lade, &[]).unwrap();
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run(a.path());
    run(b.path());
    assert_eq!(files(a.path()), files(b.path()));
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_bin(dir.path(), &["train"], &[]);
    assert_eq!(
        out.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let out = run_bin(dir.path(), &["gen-data"], &["world.colour=3"]);
    assert_eq!(out.status.code(), Some(2));

    let out = run_bin(dir.path(), &["gen-data"], &[]);
    assert_eq!(out.status.code(), Some(0));

    let out = run_bin(dir.path(), &["evaluate"], &["eval.prior=custom"]);
    assert_eq!(out.status.code(), Some(2));

    let out = run_bin(
        dir.path(),
        &["train"],
        &[
            "loss.kind=ce",
            "train.lr=1e200",
            "train.momentum=0",
            "train.weight_decay=1",
            "model.hidden=[]",
            "train.schedule=constant",
        ],
    );
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("epoch") && err.contains("step"), "{err}");
}

#[test]
fn binary_full_pipeline_with_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path: PathBuf = dir.path().join("exp.cfg");
    let text: String = SMALL
        .iter()
        .map(|s| {
            let (k, v) = s.split_once('=').unwrap();
            format!("{k} = {v}\n")
        })
        .collect();
    fs::write(&cfg_path, text).unwrap();
    let out_dir = dir.path().join("out");
    for args in [
        vec!["gen-data"],
        vec!["train"],
        vec!["evaluate"],
        vec!["calibrate"],
        vec!["sweep", "--axis", "alpha"],
    ] {
        let out = bin()
            .args(&args)
            .arg("--config")
            .arg(&cfg_path)
            .arg("--out")
            .arg(&out_dir)
            .arg("--seed")
            .arg("7")
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let head = fs::read_to_string(out_dir.join("evaluation.csv")).unwrap();
    let cfg = ExperimentConfig::parse(
        &fs::read_to_string(&cfg_path).unwrap(),
        &["run.seed=7".into()],
    )
    .unwrap();
    assert!(head.starts_with(&format!("# config_hash={}", cfg.hash())));
}
