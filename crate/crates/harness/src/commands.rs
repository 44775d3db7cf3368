//! The four subcommands. Each writes a self-describing run directory when
//! given one.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use gamma_rnn::diagnostics::{mi_landscape, stability_grid, MiSource, StabilityMeasure};
use gamma_rnn::optim::Trainable;
use gamma_rnn::tasks::{self, rotate_digits, stratified_split};
use gamma_rnn::{Checkpoint, GridTable, Metrics, RnnModel, Scalar, Scenario};
use serde::{Deserialize, Serialize};

use crate::config::{GridConfig, Precision, RunConfig, TaskConfig};
use crate::record::{self, aggregate_csv, grid_csv, mean_std, Manifest, RunRecord};
use crate::train::{self, digit_metrics, TaskData, TrainOutcome, Trainer};
use crate::HarnessError;

/// What `train` reports back.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub record: RunRecord,
    pub test: Option<Metrics>,
}

fn write_run<T: Scalar>(out: &Path, cfg: &RunConfig, outcome: &TrainOutcome<T>, command: &str) -> Result<(), HarnessError> {
    let status = if outcome.record.failure.is_some() { "failed" } else { "completed" };
    record::write(&out.join("config.json"), &cfg.to_json())?;
    record::write(&out.join("metrics.csv"), &outcome.record.metrics_csv())?;
    record::write(&out.join("shapes.csv"), &outcome.record.shapes_csv())?;
    record::write(&out.join("record.json"), &outcome.record.to_json())?;
    if let Some(t) = &outcome.test {
        record::write(&out.join("test.json"), &(serde_json::to_string_pretty(t).expect("metrics serialise") + "\n"))?;
    }
    outcome.checkpoint.save(&out.join("checkpoint.bin"))?;
    let manifest = Manifest::new(command, vec![("seed".into(), cfg.seed)], status);
    record::write(&out.join("manifest.json"), &manifest.to_json())
}

fn train_typed<T: Scalar>(cfg: &RunConfig, out: Option<&Path>) -> Result<TrainSummary, HarnessError> {
    let outcome = train::train::<T>(cfg)?;
    if let Some(dir) = out {
        write_run(dir, cfg, &outcome, "train")?;
    }
    if let Some(f) = &outcome.record.failure {
        return Err(HarnessError::Numerical(f.clone()));
    }
    Ok(TrainSummary { record: outcome.record, test: outcome.test })
}

/// Trains one model. A numerical failure still writes the partial record
/// before returning [`HarnessError::Numerical`].
pub fn cmd_train(cfg: &RunConfig, out: Option<&Path>) -> Result<TrainSummary, HarnessError> {
    cfg.validate()?;
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(cfg, out),
        Precision::F64 => train_typed::<f64>(cfg, out),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridMeasure {
    Jn,
    Mle,
    Mi,
    /// Final held-out score of a static training run per cell.
    TrainPerf,
}

impl std::str::FromStr for GridMeasure {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "jn" => GridMeasure::Jn,
            "mle" => GridMeasure::Mle,
            "mi" => GridMeasure::Mi,
            "train_perf" | "train-perf" | "train" => GridMeasure::TrainPerf,
            other => return Err(HarnessError::Config(format!("unknown measure `{other}` (jn, mle, mi, train_perf)"))),
        })
    }
}

#[derive(Debug, Clone)]
pub struct GridRequest {
    pub grid: GridConfig,
    pub measure: GridMeasure,
    /// Task and training settings for `TrainPerf`; input source for `Mi`.
    pub run: Option<RunConfig>,
    pub workers: usize,
    pub precision: Precision,
}

/// Directory of one (cell, seed) training run inside a grid directory.
pub fn cell_dir(root: &Path, cell: usize, seed: u64) -> PathBuf {
    root.join("cells").join(format!("cell{cell:03}_seed{seed}"))
}

fn mi_source(run: Option<&RunConfig>) -> Result<MiSource, HarnessError> {
    match run.map(|r| &r.task) {
        None => Ok(MiSource::CopySymbols { alphabet: 8 }),
        Some(TaskConfig::Copy { alphabet, .. }) => Ok(MiSource::CopySymbols { alphabet: *alphabet }),
        Some(TaskConfig::Digits { source, downscale, permutation_seed, .. }) => {
            Ok(MiSource::Digits(Arc::new(tasks::load_digits(source, *downscale, *permutation_seed)?)))
        }
        Some(TaskConfig::CharLm { .. }) => Err(HarnessError::Config("MI landscapes support the copy and digit inputs".into())),
    }
}

fn train_cell(base: &RunConfig, gain: f64, saturation: f64, seed: u64, dir: Option<PathBuf>) -> Result<f64, String> {
    let mut cfg = base.clone();
    cfg.scenario = Scenario::Static;
    cfg.gain = gain;
    cfg.saturation = saturation;
    cfg.seed = seed;
    cfg.output_dir = dir.clone();
    let summary = cmd_train(&cfg, dir.as_deref()).map_err(|e| e.to_string())?;
    let test = summary.test.ok_or("no test metrics")?;
    Ok(match cfg.task {
        TaskConfig::CharLm { .. } => test.bpc,
        _ => test.accuracy,
    })
}

fn grid_typed<T: Scalar>(req: &GridRequest, out: Option<&Path>) -> Result<GridTable, HarnessError> {
    let g = &req.grid;
    Ok(match req.measure {
        GridMeasure::Jn => {
            stability_grid::<T>(&g.grid, g.hidden, StabilityMeasure::JacobianNorm { samples: g.jn_samples, norm: g.jn_norm })?
        }
        GridMeasure::Mle => {
            stability_grid::<T>(&g.grid, g.hidden, StabilityMeasure::MaxLyapunov { burn_in: g.mle_burn_in, steps: g.mle_steps })?
        }
        GridMeasure::Mi => mi_landscape::<T>(&g.grid, &mi_source(req.run.as_ref())?, &g.mi)?,
        GridMeasure::TrainPerf => {
            let base = req.run.as_ref().ok_or_else(|| HarnessError::Config("train_perf needs a task".into()))?;
            base.validate()?;
            gamma_rnn::diagnostics::run_grid(&g.grid, |cell, seed| {
                train_cell(base, cell.gain, cell.saturation, seed, out.map(|o| cell_dir(o, cell.index, seed)))
            })?
        }
    })
}

/// Runs a grid scan on a pool of `workers` threads and writes `grid.csv`
/// (per seed) and `grid_summary.csv` (mean and sample std per cell).
pub fn cmd_grid(req: &GridRequest, out: Option<&Path>) -> Result<GridTable, HarnessError> {
    req.grid.grid.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(req.workers.max(1))
        .build()
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let table = pool.install(|| match req.precision {
        Precision::F32 => grid_typed::<f32>(req, out),
        Precision::F64 => grid_typed::<f64>(req, out),
    })?;
    if let Some(dir) = out {
        record::write(&dir.join("grid.csv"), &grid_csv(&table))?;
        record::write(&dir.join("grid_summary.csv"), &aggregate_csv(&table.aggregate()))?;
        let failed = table.rows.iter().filter(|r| r.value.is_err()).count();
        let status = if failed == 0 { "completed".to_string() } else { format!("completed with {failed} failed rows") };
        let seeds = req.grid.grid.seeds.iter().map(|&s| ("seed".to_string(), s)).collect();
        let m = Manifest::new(&format!("grid {:?}", req.measure).to_lowercase(), seeds, &status);
        record::write(&dir.join("manifest.json"), &m.to_json())?;
        let mut gc = serde_json::to_value(&req.grid).expect("grid config serialises");
        gc["measure"] = serde_json::to_value(req.measure).expect("measure serialises");
        if let Some(run) = &req.run {
            gc["run"] = serde_json::from_str(&run.to_json()).expect("config is json");
        }
        record::write(&dir.join("config.json"), &(serde_json::to_string_pretty(&gc).expect("json") + "\n"))?;
    }
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferConfig {
    /// Anticlockwise rotation applied to the test images.
    pub degrees: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Shuffling seed for retraining minibatches.
    pub seed: u64,
    /// Seed of the balanced split of the rotated images.
    pub split_seed: u64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self { degrees: 45.0, epochs: 50, lr: 1e-2, batch_size: 16, seed: 0, split_seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferOutcome {
    /// Accuracy on the unrotated versions of the rotated test half.
    pub original_accuracy: f64,
    pub pre_accuracy: f64,
    pub post_accuracy: f64,
    /// `(post - pre) / (original - pre)`; NaN (`null` in JSON) when the
    /// rotation costs nothing.
    pub recovery: f64,
    /// `sqrt(var(n_i) + var(s_i))` before and after retraining.
    pub spread_before: f64,
    pub spread_after: f64,
    pub record: RunRecord,
}

fn spread(gain: &[f64], saturation: &[f64]) -> f64 {
    let (_, gs) = mean_std(gain);
    let (_, ss) = mean_std(saturation);
    (gs * gs + ss * ss).sqrt()
}

fn transfer_typed<T: Scalar>(
    ckpt: Checkpoint<T>,
    base: &RunConfig,
    tcfg: &TransferConfig,
    out: Option<&Path>,
) -> Result<TransferOutcome, HarnessError> {
    let TaskConfig::Digits { source, downscale, permutation_seed, test_fraction, split_seed } = &base.task else {
        return Err(HarnessError::Config(format!("transfer needs a digits checkpoint, got task `{}`", base.task.name())));
    };
    let all = tasks::load_digits(source, *downscale, *permutation_seed)?;
    let (_, test_idx) = stratified_split(&all.images.labels, *test_fraction, *split_seed);
    let test = all.subset(&test_idx);
    let (_, original) = rotate_digits(&test, 0.0, tcfg.split_seed)?;
    let (rot_train, rot_test) = rotate_digits(&test, tcfg.degrees, tcfg.split_seed)?;

    let model: RnnModel<T> = ckpt.model;
    let original_accuracy = digit_metrics(&model, &original)?.accuracy;

    let mut cfg = base.clone();
    cfg.lr = tcfg.lr;
    cfg.epochs = tcfg.epochs;
    cfg.batch_size = tcfg.batch_size;
    cfg.seed = tcfg.seed;
    cfg.scheduler = false;
    cfg.mle_every = None;
    cfg.output_dir = out.map(Path::to_path_buf);
    let data = TaskData::Digits { train: rot_train, test: rot_test };
    let mut trainer = Trainer::new(&cfg, model, Trainable::shape_only())?;
    trainer.run(&data)?;
    let rows = &trainer.record.rows;
    let (first, last) = (&rows[0], rows.last().expect("epoch-0 row"));
    let (pre, post) = (first.eval_accuracy, last.eval_accuracy);
    let outcome = TransferOutcome {
        original_accuracy,
        pre_accuracy: pre,
        post_accuracy: post,
        recovery: if original_accuracy > pre { (post - pre) / (original_accuracy - pre) } else { f64::NAN },
        spread_before: spread(&first.gain, &first.saturation),
        spread_after: spread(&last.gain, &last.saturation),
        record: trainer.record.clone(),
    };
    if let Some(dir) = out {
        record::write(&dir.join("transfer_config.json"), &(serde_json::to_string_pretty(tcfg).expect("json") + "\n"))?;
        record::write(&dir.join("metrics.csv"), &outcome.record.metrics_csv())?;
        record::write(&dir.join("shapes.csv"), &outcome.record.shapes_csv())?;
        let mut summary = serde_json::to_value(&outcome).expect("json");
        summary.as_object_mut().expect("object").remove("record");
        record::write(&dir.join("transfer.json"), &(serde_json::to_string_pretty(&summary).expect("json") + "\n"))?;
        trainer.checkpoint().save(&dir.join("checkpoint.bin"))?;
        let status = if outcome.record.failure.is_some() { "failed" } else { "completed" };
        let seeds = vec![("seed".into(), tcfg.seed), ("split_seed".into(), tcfg.split_seed), ("base_seed".into(), base.seed)];
        record::write(&dir.join("manifest.json"), &Manifest::new("transfer", seeds, status).to_json())?;
    }
    if let Some(f) = &outcome.record.failure {
        return Err(HarnessError::Numerical(f.clone()));
    }
    Ok(outcome)
}

fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(Checkpoint<T>, RunConfig), HarnessError> {
    let ckpt = Checkpoint::<T>::load(path)?;
    let cfg = RunConfig::from_json(&ckpt.config)
        .map_err(|e| HarnessError::Config(format!("{}: embedded config unreadable: {e}", path.display())))?;
    Ok((ckpt, cfg))
}

fn checkpoint_precision(path: &Path) -> Result<Precision, HarnessError> {
    Ok(load_checkpoint::<f64>(path)?.1.precision)
}

/// Retrains only the per-neuron `(n_i, s_i)` of a heterogeneous digits
/// checkpoint on rotated test images.
pub fn cmd_transfer(
    checkpoint: &Path,
    tcfg: &TransferConfig,
    task: Option<&TaskConfig>,
    out: Option<&Path>,
) -> Result<TransferOutcome, HarnessError> {
    if !(tcfg.lr >= 0.0 && tcfg.lr.is_finite()) || tcfg.batch_size == 0 || !tcfg.degrees.is_finite() {
        return Err(HarnessError::Config(format!("invalid transfer settings {tcfg:?}")));
    }
    fn go<T: Scalar>(p: &Path, t: &TransferConfig, task: Option<&TaskConfig>, out: Option<&Path>) -> Result<TransferOutcome, HarnessError> {
        let (ckpt, mut base) = load_checkpoint::<T>(p)?;
        let scenario = ckpt.model.scenario();
        if scenario != Scenario::Heterogeneous {
            return Err(HarnessError::Config(format!(
                "transfer retrains per-neuron (n_i, s_i) and needs a heterogeneous checkpoint; {} was trained as {scenario}",
                p.display()
            )));
        }
        if let Some(task) = task {
            base.task = task.clone();
        }
        transfer_typed(ckpt, &base, t, out)
    }
    match checkpoint_precision(checkpoint)? {
        Precision::F32 => go::<f32>(checkpoint, tcfg, task, out),
        Precision::F64 => go::<f64>(checkpoint, tcfg, task, out),
    }
}

#[derive(Debug, Clone, Default)]
pub struct EvalRequest {
    pub checkpoint: PathBuf,
    /// Replaces the task stored in the checkpoint (e.g. other data paths).
    pub task: Option<TaskConfig>,
    /// Expected hidden size; rejected if it differs from the checkpoint.
    pub hidden: Option<usize>,
    /// Base for relative data paths; `$GAMMA_RNN_DATA_DIR` when absent.
    pub data_dir: Option<PathBuf>,
}

/// Test-set metrics of a checkpoint.
pub fn cmd_eval(req: &EvalRequest, out: Option<&Path>) -> Result<Metrics, HarnessError> {
    fn go<T: Scalar>(req: &EvalRequest) -> Result<Metrics, HarnessError> {
        let (ckpt, mut cfg) = load_checkpoint::<T>(&req.checkpoint)?;
        let dims = ckpt.model.dims();
        if let Some(h) = req.hidden {
            if h != dims.hidden {
                return Err(HarnessError::Config(format!(
                    "hidden size mismatch: checkpoint has {} units, configuration asks for {h}",
                    dims.hidden
                )));
            }
        }
        if let Some(t) = &req.task {
            cfg.task = t.clone();
        }
        cfg.resolve_data_paths(req.data_dir.as_deref());
        let data = TaskData::<T>::load(&cfg)?;
        let want = data.dims(dims.hidden);
        if want != dims {
            return Err(HarnessError::Config(format!(
                "task needs {} inputs and {} outputs, checkpoint has {} and {}",
                want.input, want.output, dims.input, dims.output
            )));
        }
        data.test(&ckpt.model)
    }
    let m = match checkpoint_precision(&req.checkpoint)? {
        Precision::F32 => go::<f32>(req)?,
        Precision::F64 => go::<f64>(req)?,
    };
    if let Some(dir) = out {
        record::write(&dir.join("eval.json"), &(serde_json::to_string_pretty(&m).expect("json") + "\n"))?;
    }
    Ok(m)
}
