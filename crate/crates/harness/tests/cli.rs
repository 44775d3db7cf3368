use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gamma_rnn::{Checkpoint, Scenario};
use gamma_rnn_harness::commands::{cmd_eval, cmd_grid, cmd_train, cmd_transfer, EvalRequest, GridMeasure, GridRequest, TransferConfig};
use gamma_rnn_harness::config::{GridConfig, Precision, RunConfig, TaskConfig};
use gamma_rnn_harness::train::{init_model, TaskData};
use gamma_rnn_harness::HarnessError;
use gamma_rnn::GridSpec;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_gamma-rnn"));
    c.env_remove(gamma_rnn_harness::DATA_DIR_ENV);
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_copy() -> RunConfig {
    let mut c = RunConfig::desk("copy").unwrap();
    c.task = TaskConfig::Copy { alphabet: 4, payload: 3, delay: 5, eval_sequences: 40 };
    c.hidden = 12;
    c.batch_size = 8;
    c.iterations = 20;
    c.eval_every = 10;
    c
}

fn tiny_digits(scenario: Scenario) -> RunConfig {
    let mut c = RunConfig::desk("digits").unwrap();
    c.scenario = scenario;
    c.hidden = 16;
    c.epochs = 1;
    c.lr = 1e-3;
    c
}

fn corpus(dir: &Path) -> PathBuf {
    let text = "the quick brown fox jumps over the lazy dog. ".repeat(60);
    let p = dir.join("corpus.txt");
    std::fs::write(&p, text).unwrap();
    p
}

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn invalid_configs_exit_with_one_before_compute() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = run(&["train", "--task", "copy", "--hidden", "0", "-o", out.to_str().unwrap()]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("hidden"));
    assert!(!out.exists(), "nothing written for an invalid config");

    assert_eq!(code(&run(&["train", "--task", "mnist"])), 1);
    assert_eq!(code(&run(&["train", "--task", "copy", "--lr", "0"])), 1);
    assert_eq!(code(&run(&["train", "--task", "copy", "--scenario", "dynamic"])), 1);
    assert_eq!(code(&run(&["train"])), 1);
    assert_eq!(code(&run(&["train", "--task", "copy", "--bogus"])), 1);
    assert_eq!(code(&run(&["train", "--task", "char_lm", "--corpus", "/nonexistent/corpus.txt"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn config_file_round_trips_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    for task in ["copy", "digits"] {
        let o = run(&["train", "--task", task, "--dry-run", "--seed", "7", "-s", "-0.5"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let text = String::from_utf8(o.stdout).unwrap();
        let path = dir.path().join(format!("{task}.json"));
        std::fs::write(&path, &text).unwrap();
        let again = run(&["train", "--config", path.to_str().unwrap(), "--dry-run"]);
        assert_eq!(String::from_utf8(again.stdout).unwrap(), text);
        let cfg = RunConfig::from_json(&text).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.saturation, -0.5);
    }
    let path = dir.path().join("copy.json");
    let o = run(&["train", "--config", path.to_str().unwrap(), "--hidden", "33", "--dry-run"]);
    assert_eq!(RunConfig::from_json(&String::from_utf8(o.stdout).unwrap()).unwrap().hidden, 33, "flags win");
    let o = run(&["train", "--config", path.to_str().unwrap(), "--task", "digits", "--dry-run"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn paper_scale_switch() {
    let o = run(&["train", "--task", "copy", "--paper-scale", "--dry-run"]);
    let c = RunConfig::from_json(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(c.iterations, 100_000);
    assert!(matches!(c.task, TaskConfig::Copy { delay: 200, .. }));
    let o = bin().args(["train", "--task", "digits", "--paper-scale", "--dry-run"]).env("GAMMA_RNN_DATA_DIR", "/data/mnist").output().unwrap();
    let c = RunConfig::from_json(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(c.hidden, 400);
    match c.task {
        TaskConfig::Digits { source: gamma_rnn::DigitSource::Idx { images, .. }, .. } => {
            assert!(images.starts_with("/data/mnist"))
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn zero_epoch_run_keeps_initialisation() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_copy();
    cfg.iterations = 0;
    cfg.scenario = Scenario::Heterogeneous;
    let s = cmd_train(&cfg, Some(dir.path())).unwrap();
    assert_eq!(s.record.rows.len(), 1);
    assert_eq!(s.record.rows[0].epoch, 0);
    let metrics = read(dir.path().join("metrics.csv"));
    assert_eq!(metrics.lines().count(), 2);
    let ckpt = Checkpoint::<f64>::load(&dir.path().join("checkpoint.bin")).unwrap();
    let data = TaskData::<f64>::load(&cfg).unwrap();
    assert_eq!(ckpt.model, init_model::<f64>(&cfg, data.dims(cfg.hidden)).unwrap());
    assert_eq!(ckpt.epoch, 0);
    assert_eq!(RunConfig::from_json(&ckpt.config).unwrap(), cfg);
    for f in ["config.json", "shapes.csv", "record.json", "manifest.json", "test.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&read(dir.path().join("manifest.json"))).unwrap();
    assert_eq!(manifest["csv_schema_version"], 1);
    assert!(manifest["code_version"].as_str().unwrap().contains("0.1.0"));
    let shapes = read(dir.path().join("shapes.csv"));
    assert_eq!(shapes.lines().count(), 1 + cfg.hidden, "full per-neuron vectors for heterogeneous runs");
}

#[test]
fn rows_are_complete_and_increasing() {
    let mut cfg = tiny_copy();
    cfg.scenario = Scenario::Homogeneous;
    cfg.mle_every = Some(1);
    let s = cmd_train(&cfg, None).unwrap();
    assert_eq!(s.record.rows.len(), 3);
    for w in s.record.rows.windows(2) {
        assert!(w[1].epoch > w[0].epoch && w[1].iteration > w[0].iteration);
    }
    for r in &s.record.rows {
        assert!(r.train_loss.is_finite() && r.eval_accuracy.is_finite() && r.eval_bpc.is_finite());
        assert_eq!((r.gain.len(), r.saturation.len()), (1, 1));
        assert!(r.mle.is_some_and(f64::is_finite));
    }
    assert_ne!(s.record.rows[2].gain, s.record.rows[0].gain, "homogeneous shape moves");
}

#[test]
fn numerical_failure_exits_with_two_and_keeps_partial_record() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = run(&[
        "train", "--task", "copy", "--hidden", "16", "--iterations", "50", "--eval-every", "1", "--lr", "1e30",
        "--precision", "f32", "-n", "5", "-o", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let metrics = read(out.join("metrics.csv"));
    assert!(metrics.lines().last().unwrap().starts_with("# failed:"), "{metrics}");
    assert!(metrics.lines().nth(1).unwrap().starts_with("0,0,"));
    let manifest = read(out.join("manifest.json"));
    assert!(manifest.contains("\"failed\""));
}

#[test]
fn training_is_deterministic_and_precision_independent_in_layout() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = tiny_copy();
    cmd_train(&cfg, Some(a.path())).unwrap();
    cmd_train(&cfg, Some(b.path())).unwrap();
    for f in ["metrics.csv", "shapes.csv", "record.json", "checkpoint.bin", "manifest.json", "config.json"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let mut c32 = cfg.clone();
    c32.precision = Precision::F32;
    let s = cmd_train(&c32, None).unwrap();
    assert_eq!(s.record.rows.len(), 3);
}

#[test]
fn single_cell_grid_matches_train_byte_for_byte() {
    let grid_dir = tempfile::tempdir().unwrap();
    let train_dir = tempfile::tempdir().unwrap();
    let mut base = tiny_copy();
    base.gain = 2.5;
    base.saturation = 0.25;
    base.seed = 3;
    cmd_train(&base, Some(train_dir.path())).unwrap();
    let req = GridRequest {
        grid: GridConfig { grid: GridSpec { gains: vec![2.5], saturations: vec![0.25], seeds: vec![3] }, ..GridConfig::default() },
        measure: GridMeasure::TrainPerf,
        run: Some(base),
        workers: 2,
        precision: Precision::F64,
    };
    let table = cmd_grid(&req, Some(grid_dir.path())).unwrap();
    assert_eq!(table.rows.len(), 1);
    let cell = gamma_rnn_harness::commands::cell_dir(grid_dir.path(), 0, 3);
    assert_eq!(read(cell.join("metrics.csv")), read(train_dir.path().join("metrics.csv")));
    assert_eq!(read(cell.join("shapes.csv")), read(train_dir.path().join("shapes.csv")));
    let summary = read(grid_dir.path().join("grid_summary.csv"));
    assert_eq!(summary.lines().next(), Some("gain,saturation,mean,std"));
    assert_eq!(read(grid_dir.path().join("grid.csv")).lines().next(), Some("gain,saturation,seed,value"));
}

#[test]
fn grid_cli_is_reproducible_and_flags_failures() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for (dir, workers) in [(&a, "1"), (&b, "3")] {
        let o = run(&[
            "grid", "--measure", "jn", "--gains", "1,5,20", "--saturations", "0,1", "--seeds", "0,1", "--grid-hidden", "8",
            "--workers", workers, "-o", dir.path().to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in ["grid.csv", "grid_summary.csv", "manifest.json", "config.json"] {
        assert_eq!(read(a.path().join(f)), read(b.path().join(f)), "{f}");
    }
    assert_eq!(read(a.path().join("grid_summary.csv")).lines().count(), 1 + 6);
    assert_eq!(read(a.path().join("grid.csv")).lines().count(), 1 + 12);

    // a cell whose run blows up is flagged without stopping the others
    let mut base = tiny_copy();
    base.lr = 1e30;
    base.precision = Precision::F32;
    base.iterations = 10;
    base.eval_every = 1;
    let req = GridRequest {
        grid: GridConfig { grid: GridSpec { gains: vec![5.0], saturations: vec![0.0, 1.0], seeds: vec![0] }, ..GridConfig::default() },
        measure: GridMeasure::TrainPerf,
        run: Some(base),
        workers: 1,
        precision: Precision::F32,
    };
    let out = tempfile::tempdir().unwrap();
    let t = cmd_grid(&req, Some(out.path())).unwrap();
    assert_eq!(t.rows.len(), 2, "every cell reported");
    assert!(t.rows[0].value.is_err());
    assert!(read(out.path().join("grid.csv")).contains("NaN # failed:"));
    assert!(read(out.path().join("manifest.json")).contains("failed rows"));
}

fn digits_checkpoint(dir: &Path, scenario: Scenario) -> PathBuf {
    let cfg = tiny_digits(scenario);
    cmd_train(&cfg, Some(dir)).unwrap();
    dir.join("checkpoint.bin")
}

#[test]
fn eval_is_deterministic_and_checks_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = digits_checkpoint(dir.path(), Scenario::Static);
    let req = EvalRequest { checkpoint: ckpt.clone(), ..Default::default() };
    let a = cmd_eval(&req, None).unwrap();
    let b = cmd_eval(&req, None).unwrap();
    assert_eq!(a, b);
    let test: gamma_rnn::Metrics = serde_json::from_str(&read(dir.path().join("test.json"))).unwrap();
    assert_eq!(a, test, "eval reproduces the end-of-training test metrics");

    let o = run(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--hidden", "32"]);
    assert_eq!(code(&o), 1);
    let msg = stderr(&o);
    assert!(msg.contains("16") && msg.contains("32"), "{msg}");

    let bad = dir.path().join("corrupt.bin");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    assert_eq!(code(&run(&["eval", "--checkpoint", bad.to_str().unwrap()])), 1);
}

#[test]
fn untrained_char_model_is_near_uniform() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = corpus(dir.path());
    let out = dir.path().join("run");
    let o = run(&[
        "train", "--task", "char_lm", "--corpus", corpus.to_str().unwrap(), "--epochs", "0", "-o", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = run(&["eval", "--checkpoint", out.join("checkpoint.bin").to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m: gamma_rnn::Metrics = serde_json::from_slice(&o.stdout).unwrap();
    let vocab = {
        let mut c: Vec<char> = read(&corpus).chars().collect();
        c.sort_unstable();
        c.dedup();
        c.len()
    };
    assert!((m.bpc - (vocab as f64).log2()).abs() < 0.05, "bpc {} vs log2 {vocab}", m.bpc);

    // relative corpus path resolved through the data-dir variable
    let o = bin()
        .args(["train", "--task", "char_lm", "--corpus", "corpus.txt", "--epochs", "0", "--dry-run"])
        .env("GAMMA_RNN_DATA_DIR", dir.path())
        .current_dir(std::env::temp_dir())
        .output()
        .unwrap();
    let c = RunConfig::from_json(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert!(matches!(c.task, TaskConfig::CharLm { corpus, .. } if corpus == dir.path().join("corpus.txt")));
}

#[test]
fn char_lm_trains_with_scheduler() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::desk("char_lm").unwrap();
    cfg.task = TaskConfig::CharLm { corpus: corpus(dir.path()), chunk: 20, train_fraction: 0.8, valid_fraction: 0.1 };
    cfg.hidden = 24;
    cfg.batch_size = 8;
    cfg.epochs = 3;
    cfg.lr = 3e-3;
    let s = cmd_train(&cfg, None).unwrap();
    let rows = &s.record.rows;
    assert_eq!(rows.len(), 4);
    assert!(rows[3].eval_bpc < rows[0].eval_bpc);
    assert!(s.test.unwrap().bpc.is_finite());
}

#[test]
fn transfer_rejects_non_heterogeneous_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    for scenario in [Scenario::Static, Scenario::Homogeneous] {
        let sub = dir.path().join(scenario.to_string());
        let ckpt = digits_checkpoint(&sub, scenario);
        let e = cmd_transfer(&ckpt, &TransferConfig::default(), None, None).unwrap_err();
        assert!(matches!(e, HarnessError::Config(ref m) if m.contains("heterogeneous")), "{e}");
        let o = run(&["transfer", "--checkpoint", ckpt.to_str().unwrap()]);
        assert_eq!(code(&o), 1);
        assert!(stderr(&o).contains(&scenario.to_string()));
    }
}

#[test]
fn transfer_identity_and_null_update() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = digits_checkpoint(dir.path(), Scenario::Heterogeneous);

    let t = TransferConfig { degrees: 0.0, epochs: 1, ..TransferConfig::default() };
    let o = cmd_transfer(&ckpt, &t, None, None).unwrap();
    assert_eq!(o.pre_accuracy, o.original_accuracy);

    let t = TransferConfig { lr: 0.0, epochs: 2, ..TransferConfig::default() };
    let out = dir.path().join("transfer");
    let o = cmd_transfer(&ckpt, &t, None, Some(&out)).unwrap();
    assert_eq!(o.pre_accuracy, o.post_accuracy);
    let rows = &o.record.rows;
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0].gain, rows[2].gain);
    assert_eq!(rows[0].saturation, rows[2].saturation);
    assert_eq!(o.spread_before, o.spread_after);
    let before = Checkpoint::<f64>::load(&ckpt).unwrap();
    let after = Checkpoint::<f64>::load(&out.join("checkpoint.bin")).unwrap();
    assert_eq!(before.model.w_rec, after.model.w_rec);
    assert_eq!(before.model.shape, after.model.shape);
    assert!(read(out.join("shapes.csv")).lines().count() == 1 + 3 * 16);
}

#[test]
fn transfer_freezes_weights() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = digits_checkpoint(dir.path(), Scenario::Heterogeneous);
    let out = dir.path().join("t");
    let o = bin()
        .args(["transfer", "--checkpoint", ckpt.to_str().unwrap(), "--epochs", "1", "-o", out.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let before = Checkpoint::<f64>::load(&ckpt).unwrap().model;
    let after = Checkpoint::<f64>::load(&out.join("checkpoint.bin")).unwrap().model;
    assert_eq!((&before.w_rec, &before.w_in, &before.w_out, &before.b, &before.b_out), (&after.w_rec, &after.w_in, &after.w_out, &after.b, &after.b_out));
    assert_ne!(before.shape, after.shape);
    let summary: serde_json::Value = serde_json::from_str(&read(out.join("transfer.json"))).unwrap();
    for k in ["original_accuracy", "pre_accuracy", "post_accuracy", "recovery", "spread_before", "spread_after"] {
        assert!(summary[k].is_number() || (k == "recovery" && summary[k].is_null()), "{k}");
    }
}
