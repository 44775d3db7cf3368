use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gamma_rnn::tasks::DigitSource;
use gamma_rnn::{GridSpec, Scenario};
use gamma_rnn_harness::commands::{cmd_eval, cmd_grid, cmd_train, cmd_transfer, EvalRequest, GridMeasure, GridRequest, TransferConfig};
use gamma_rnn_harness::config::{GridConfig, Precision, RunConfig, TaskConfig, DATA_DIR_ENV};
use gamma_rnn_harness::HarnessError;

#[derive(Parser)]
#[command(name = "gamma-rnn", version, about = "Train and analyse RNNs with adaptive gain/saturation activations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its run directory.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Print the resolved configuration and exit.
        #[arg(long)]
        dry_run: bool,
    },
    /// Scan a (gain, saturation) grid.
    Grid {
        #[command(flatten)]
        grid: GridArgs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Retrain only per-neuron (n_i, s_i) of a heterogeneous digits checkpoint on rotated images.
    Transfer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        degrees: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        split_seed: Option<u64>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Test-set metrics of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Expected hidden size.
        #[arg(long)]
        hidden: Option<usize>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Default)]
struct DataArgs {
    /// Directory for relative data paths.
    #[arg(long, env = DATA_DIR_ENV)]
    data_dir: Option<PathBuf>,
    /// UTF-8 text corpus (character LM).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// IDX image file (digits); needs --labels.
    #[arg(long, requires = "labels")]
    images: Option<PathBuf>,
    #[arg(long, requires = "images")]
    labels: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// copy, digits or char_lm.
    #[arg(long)]
    task: Option<String>,
    /// Full-size defaults instead of desk-scale ones.
    #[arg(long)]
    paper_scale: bool,
    /// static, homogeneous or heterogeneous.
    #[arg(long)]
    scenario: Option<String>,
    /// Initial gain.
    #[arg(long, short = 'n')]
    n: Option<f64>,
    /// Initial saturation.
    #[arg(long, short = 's', allow_hyphen_values = true)]
    s: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Copy-task delay.
    #[arg(long)]
    delay: Option<usize>,
    #[arg(long)]
    scheduler: Option<bool>,
    #[arg(long)]
    clip_norm: Option<f64>,
    /// f32 or f64.
    #[arg(long)]
    precision: Option<String>,
    /// Maximal Lyapunov exponent every k evaluation rows.
    #[arg(long)]
    mle_every: Option<usize>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GridArgs {
    /// jn, mle, mi or train_perf.
    #[arg(long)]
    measure: String,
    /// JSON grid configuration; flags override its fields.
    #[arg(long)]
    grid_config: Option<PathBuf>,
    /// Comma-separated gains (default: the 17-value paper axis).
    #[arg(long, value_delimiter = ',')]
    gains: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    saturations: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Hidden size of the untrained grid models (JN, MLE, MI).
    #[arg(long)]
    grid_hidden: Option<usize>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

fn config_err(m: impl Into<String>) -> HarnessError {
    HarnessError::Config(m.into())
}

fn parse_scenario(s: &str) -> Result<Scenario, HarnessError> {
    serde_json::from_value(serde_json::Value::String(s.to_lowercase()))
        .map_err(|_| config_err(format!("unknown scenario `{s}` (static, homogeneous, heterogeneous)")))
}

fn parse_precision(s: &str) -> Result<Precision, HarnessError> {
    serde_json::from_value(serde_json::Value::String(s.to_lowercase()))
        .map_err(|_| config_err(format!("unknown precision `{s}` (f32, f64)")))
}

impl DataArgs {
    fn apply(&self, task: &mut TaskConfig) -> Result<(), HarnessError> {
        match task {
            TaskConfig::CharLm { corpus, .. } => {
                if let Some(c) = &self.corpus {
                    *corpus = c.clone();
                }
            }
            TaskConfig::Digits { source, .. } => {
                if let (Some(images), Some(labels)) = (&self.images, &self.labels) {
                    *source = DigitSource::Idx { images: images.clone(), labels: labels.clone() };
                }
            }
            TaskConfig::Copy { .. } => {}
        }
        let wrong = match task {
            TaskConfig::CharLm { .. } => self.images.is_some(),
            TaskConfig::Digits { .. } => self.corpus.is_some(),
            TaskConfig::Copy { .. } => self.images.is_some() || self.corpus.is_some(),
        };
        if wrong {
            return Err(config_err(format!("data flags do not apply to task `{}`", task.name())));
        }
        Ok(())
    }

    fn has_override(&self) -> bool {
        self.corpus.is_some() || self.images.is_some()
    }
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, HarnessError> {
        let defaults = |task: &str| if self.paper_scale { RunConfig::paper(task) } else { RunConfig::desk(task) };
        let mut c = match (&self.config, &self.task) {
            (Some(path), task) => {
                let c = RunConfig::load(path)?;
                if let Some(t) = task {
                    if TaskConfig::desk(t)?.name() != c.task.name() {
                        return Err(config_err(format!("--task {t} contradicts the task `{}` in {}", c.task.name(), path.display())));
                    }
                }
                c
            }
            (None, Some(task)) => defaults(task)?,
            (None, None) => return Err(config_err("either --task or --config is required")),
        };
        if let Some(v) = &self.scenario {
            c.scenario = parse_scenario(v)?;
        }
        if let Some(v) = self.n {
            c.gain = v;
        }
        if let Some(v) = self.s {
            c.saturation = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.hidden {
            c.hidden = v;
        }
        if let Some(v) = self.lr {
            c.lr = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.iterations {
            c.iterations = v;
        }
        if let Some(v) = self.eval_every {
            c.eval_every = v;
        }
        if let Some(v) = self.delay {
            match &mut c.task {
                TaskConfig::Copy { delay, .. } => *delay = v,
                _ => return Err(config_err("--delay only applies to the copy task")),
            }
        }
        if let Some(v) = self.scheduler {
            c.scheduler = v;
        }
        if let Some(v) = self.clip_norm {
            c.clip_norm = Some(v);
        }
        if let Some(v) = &self.precision {
            c.precision = parse_precision(v)?;
        }
        if let Some(v) = self.mle_every {
            c.mle_every = Some(v);
        }
        if let Some(v) = &self.out {
            c.output_dir = Some(v.clone());
        }
        self.data.apply(&mut c.task)?;
        c.resolve_data_paths(self.data.data_dir.as_deref());
        c.validate()?;
        Ok(c)
    }

    fn given(&self) -> bool {
        self.config.is_some() || self.task.is_some()
    }
}

impl GridArgs {
    fn resolve(&self) -> Result<GridConfig, HarnessError> {
        let mut g = match &self.grid_config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| config_err(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", p.display())))?
            }
            None => GridConfig::default(),
        };
        let GridSpec { gains, saturations, seeds } = &mut g.grid;
        if let Some(v) = &self.gains {
            *gains = v.clone();
        }
        if let Some(v) = &self.saturations {
            *saturations = v.clone();
        }
        if let Some(v) = &self.seeds {
            *seeds = v.clone();
        }
        if let Some(h) = self.grid_hidden {
            g.hidden = h;
            g.mi.hidden = h;
        }
        g.grid.validate().map_err(|e| config_err(e.to_string()))?;
        Ok(g)
    }
}

fn print_json<S: serde::Serialize>(v: &S) {
    println!("{}", serde_json::to_string_pretty(v).expect("json"));
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Train { run, dry_run } => {
            let cfg = run.resolve()?;
            if dry_run {
                print!("{}", cfg.to_json());
                return Ok(());
            }
            let summary = cmd_train(&cfg, cfg.output_dir.as_deref())?;
            if let Some(t) = summary.test {
                print_json(&t);
            }
        }
        Command::Grid { grid, run } => {
            let measure: GridMeasure = grid.measure.parse()?;
            let g = grid.resolve()?;
            let task = if run.given() { Some(run.resolve()?) } else { None };
            let precision = task.as_ref().map(|t| t.precision).unwrap_or_default();
            let req = GridRequest { grid: g, measure, run: task, workers: grid.workers, precision };
            let table = cmd_grid(&req, run.out.as_deref())?;
            print!("{}", gamma_rnn_harness::record::aggregate_csv(&table.aggregate()));
        }
        Command::Transfer { checkpoint, degrees, epochs, lr, batch_size, seed, split_seed, data, out } => {
            let d = TransferConfig::default();
            let t = TransferConfig {
                degrees: degrees.unwrap_or(d.degrees),
                epochs: epochs.unwrap_or(d.epochs),
                lr: lr.unwrap_or(d.lr),
                batch_size: batch_size.unwrap_or(d.batch_size),
                seed: seed.unwrap_or(d.seed),
                split_seed: split_seed.unwrap_or(d.split_seed),
            };
            let task = task_override(&checkpoint, &data)?;
            let o = cmd_transfer(&checkpoint, &t, task.as_ref(), out.as_deref())?;
            print_json(&serde_json::json!({
                "original_accuracy": o.original_accuracy,
                "pre_accuracy": o.pre_accuracy,
                "post_accuracy": o.post_accuracy,
                "recovery": o.recovery,
                "spread_before": o.spread_before,
                "spread_after": o.spread_after,
            }));
        }
        Command::Eval { checkpoint, hidden, data, out } => {
            let task = task_override(&checkpoint, &data)?;
            let req = EvalRequest { checkpoint, task, hidden, data_dir: data.data_dir.clone() };
            print_json(&cmd_eval(&req, out.as_deref())?);
        }
    }
    Ok(())
}

/// The checkpoint's own task with the data flags applied.
fn task_override(checkpoint: &Path, data: &DataArgs) -> Result<Option<TaskConfig>, HarnessError> {
    if !data.has_override() {
        return Ok(None);
    }
    let ckpt = gamma_rnn::Checkpoint::<f64>::load(checkpoint)?;
    let mut task = RunConfig::from_json(&ckpt.config)?.task;
    data.apply(&mut task)?;
    Ok(Some(task))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    gamma_rnn_harness::train::set_progress(true);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gamma-rnn: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
