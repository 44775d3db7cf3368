//! Training loops for the three tasks.

use std::sync::atomic::{AtomicBool, Ordering};

use gamma_rnn::diagnostics::{lyapunov_spectrum, LyapunovConfig};
use gamma_rnn::optim::Trainable;
use gamma_rnn::rng::streams;
use gamma_rnn::tasks::{self, charlm_batches, copy_batch, stratified_split, MetricSums};
use gamma_rnn::{
    adam_step, AdamState, Checkpoint, CopyConfig, CorpusSplit, DigitDataset, Dims, Matrix, Metrics, PlateauScheduler,
    RngStream, RnnError, RnnModel, Scalar, SeedRecord, ShapeParams, TaskBatch,
};

use crate::config::{RunConfig, TaskConfig};
use crate::record::{RecordRow, RunRecord};
use crate::HarnessError;

/// Loaded task data.
pub enum TaskData<T> {
    Copy { cfg: CopyConfig, eval: Vec<TaskBatch<T>> },
    Digits { train: DigitDataset, test: DigitDataset },
    CharLm { corpus: CorpusSplit },
}

static PROGRESS: AtomicBool = AtomicBool::new(false);

/// Echo every evaluation row to stderr.
pub fn set_progress(on: bool) {
    PROGRESS.store(on, Ordering::Relaxed);
}

/// Evaluation batch size for the digit test set.
const DIGIT_EVAL_BATCH: usize = 256;
/// Parallel columns used when scoring a character stream.
const CHAR_EVAL_COLUMNS: usize = 16;

impl<T: Scalar> TaskData<T> {
    pub fn load(cfg: &RunConfig) -> Result<Self, HarnessError> {
        match &cfg.task {
            TaskConfig::Copy { alphabet, payload, delay, eval_sequences } => {
                let copy = CopyConfig { alphabet: *alphabet, payload: *payload, delay: *delay, batch_size: cfg.batch_size };
                let mut rng = RngStream::new(cfg.seed, streams::EVAL);
                let mut eval = Vec::new();
                let mut left = *eval_sequences;
                while left > 0 {
                    let b = left.min(cfg.batch_size);
                    eval.push(copy_batch(&CopyConfig { batch_size: b, ..copy }, &mut rng)?);
                    left -= b;
                }
                Ok(TaskData::Copy { cfg: copy, eval })
            }
            TaskConfig::Digits { source, downscale, permutation_seed, test_fraction, split_seed } => {
                let all = tasks::load_digits(source, *downscale, *permutation_seed)?;
                let (train, test) = stratified_split(&all.images.labels, *test_fraction, *split_seed);
                Ok(TaskData::Digits { train: all.subset(&train), test: all.subset(&test) })
            }
            TaskConfig::CharLm { corpus, chunk, train_fraction, valid_fraction } => {
                let text = std::fs::read_to_string(corpus)
                    .map_err(|e| HarnessError::Config(format!("corpus {}: {e}", corpus.display())))?;
                Ok(TaskData::CharLm { corpus: CorpusSplit::from_text(&text, *chunk, *train_fraction, *valid_fraction)? })
            }
        }
    }

    pub fn dims(&self, hidden: usize) -> Dims {
        match self {
            TaskData::Copy { cfg, .. } => Dims { input: cfg.input_width(), hidden, output: cfg.classes() },
            TaskData::Digits { .. } => Dims { input: 1, hidden, output: tasks::DIGIT_CLASSES },
            TaskData::CharLm { corpus } => Dims { input: corpus.vocab_size(), hidden, output: corpus.vocab_size() },
        }
    }

    /// Held-out metrics: copy eval set, digit test split, character
    /// validation stream.
    pub fn evaluate(&self, model: &RnnModel<T>) -> Result<Metrics, HarnessError> {
        match self {
            TaskData::Copy { eval, .. } => score(model, eval.iter(), false),
            TaskData::Digits { test, .. } => digit_metrics(model, test),
            TaskData::CharLm { corpus } => stream_metrics(model, &corpus.valid, corpus.vocab_size(), corpus.chunk),
        }
    }

    /// Final test metrics (the character test stream differs from the
    /// validation stream used during training).
    pub fn test(&self, model: &RnnModel<T>) -> Result<Metrics, HarnessError> {
        match self {
            TaskData::CharLm { corpus } => stream_metrics(model, &corpus.test, corpus.vocab_size(), corpus.chunk),
            _ => self.evaluate(model),
        }
    }
}

fn score<'a, T: Scalar + 'a>(
    model: &RnnModel<T>,
    batches: impl Iterator<Item = &'a TaskBatch<T>>,
    stateful: bool,
) -> Result<Metrics, HarnessError> {
    let mut sums = MetricSums::default();
    let mut h: Option<Matrix<T>> = None;
    for b in batches {
        let out = model.evaluate(b, h.as_ref())?;
        sums.add(&out.logits, b)?;
        if stateful {
            h = Some(out.final_state);
        }
    }
    Ok(sums.finish()?)
}

pub fn digit_metrics<T: Scalar>(model: &RnnModel<T>, data: &DigitDataset) -> Result<Metrics, HarnessError> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let batches: Vec<TaskBatch<T>> = idx.chunks(DIGIT_EVAL_BATCH).map(|c| data.batch(c)).collect();
    score(model, batches.iter(), false)
}

pub fn stream_metrics<T: Scalar>(model: &RnnModel<T>, ids: &[usize], vocab: usize, chunk: usize) -> Result<Metrics, HarnessError> {
    let columns = CHAR_EVAL_COLUMNS.min(ids.len() / 2).max(1);
    let batches = charlm_batches::<T>(ids, vocab, columns, chunk)?;
    score(model, batches.iter(), true)
}

/// Result of a training run. `record.failure` is set if it stopped early.
pub struct TrainOutcome<T> {
    pub record: RunRecord,
    pub checkpoint: Checkpoint<T>,
    /// Final held-out test metrics, absent after a failure.
    pub test: Option<Metrics>,
}

fn is_numerical(e: &RnnError) -> bool {
    matches!(e, RnnError::NonFinite { .. } | RnnError::NonFiniteLoss(_))
}

enum StepError {
    Numerical(String),
    Other(HarnessError),
}

impl StepError {
    fn from_harness(e: HarnessError) -> Self {
        match e {
            HarnessError::Numerical(msg) => StepError::Numerical(msg),
            other => StepError::Other(other),
        }
    }
}

impl From<RnnError> for StepError {
    fn from(e: RnnError) -> Self {
        if is_numerical(&e) {
            StepError::Numerical(e.to_string())
        } else {
            StepError::Other(e.into())
        }
    }
}

pub fn init_model<T: Scalar>(cfg: &RunConfig, dims: Dims) -> Result<RnnModel<T>, HarnessError> {
    let shape = ShapeParams::for_scenario(cfg.scenario, dims.hidden, T::lit(cfg.gain), T::lit(cfg.saturation))
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let mut rng = RngStream::new(cfg.seed, streams::INIT);
    Ok(RnnModel::init(dims, shape, &cfg.init, &mut rng)?)
}

/// Everything mutated by the loop.
pub struct Trainer<'a, T> {
    pub cfg: &'a RunConfig,
    pub model: RnnModel<T>,
    pub adam: AdamState<T>,
    pub trainable: Trainable,
    pub scheduler: Option<PlateauScheduler>,
    pub data_rng: RngStream,
    pub iteration: u64,
    pub epoch: usize,
    pub record: RunRecord,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(cfg: &'a RunConfig, model: RnnModel<T>, trainable: Trainable) -> Result<Self, HarnessError> {
        let mut model = model;
        let adam = AdamState::new(cfg.adam_config(), &mut model).map_err(|e| HarnessError::Config(e.to_string()))?;
        let scheduler = if cfg.scheduler {
            Some(PlateauScheduler::new(cfg.plateau, cfg.lr).map_err(|e| HarnessError::Config(e.to_string()))?)
        } else {
            None
        };
        let record = RunRecord {
            task: cfg.task.name().to_string(),
            scenario: cfg.scenario.to_string(),
            seed: cfg.seed,
            rows: Vec::new(),
            failure: None,
        };
        Ok(Self {
            cfg,
            model,
            adam,
            trainable,
            scheduler,
            data_rng: RngStream::new(cfg.seed, streams::DATA),
            iteration: 0,
            epoch: 0,
            record,
        })
    }

    fn step(&mut self, batch: &TaskBatch<T>, h0: Option<&Matrix<T>>) -> Result<(f64, Matrix<T>), StepError> {
        let mut out = self.model.loss_and_grads_from(batch, h0)?;
        if let Some(c) = self.cfg.clip_norm {
            out.grads.clip_global_norm(T::lit(c));
        }
        adam_step(&mut self.model, &out.grads, &mut self.adam, self.trainable).map_err(|e| match e {
            gamma_rnn::OptimError::NonFiniteGradient { .. } => StepError::Numerical(e.to_string()),
            other => StepError::Other(HarnessError::Config(other.to_string())),
        })?;
        self.iteration += 1;
        Ok((out.loss.as_f64(), out.final_state))
    }

    /// Appends an evaluation row and applies the plateau schedule.
    pub fn log_row(&mut self, data: &TaskData<T>, train_loss: Option<f64>) -> Result<(), HarnessError> {
        let m = data.evaluate(&self.model)?;
        let mle = match self.cfg.mle_every {
            Some(k) if self.epoch % k == 0 => self.mle(),
            _ => None,
        };
        let lr = self.adam.lr();
        self.record.rows.push(RecordRow {
            epoch: self.epoch,
            iteration: self.iteration,
            train_loss: train_loss.unwrap_or(m.loss),
            eval_accuracy: m.accuracy,
            eval_bpc: m.bpc,
            lr,
            gain: self.model.shape.gain().iter().map(|v| v.as_f64()).collect(),
            saturation: self.model.shape.saturation().iter().map(|v| v.as_f64()).collect(),
            mle,
        });
        if PROGRESS.load(Ordering::Relaxed) {
            eprintln!(
                "{} {} seed {}: epoch {} iteration {} loss {:.4} acc {:.4} bpc {:.4} lr {:e}",
                self.record.task, self.record.scenario, self.cfg.seed, self.epoch, self.iteration,
                self.record.rows.last().map_or(f64::NAN, |r| r.train_loss), m.accuracy, m.bpc, lr
            );
        }
        if let (Some(s), Some(_)) = (&mut self.scheduler, train_loss) {
            let lr = s.update(m.bpc).map_err(|e| HarnessError::Numerical(e.to_string()))?;
            self.adam.set_lr(lr);
        }
        Ok(())
    }

    fn mle(&self) -> Option<f64> {
        let n = self.model.dims().hidden;
        let mut rng = RngStream::for_cell(self.cfg.seed, streams::DIAGNOSTIC, self.epoch as u64);
        let h0: Vec<T> = (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let c = LyapunovConfig { count: Some(1), ..Default::default() };
        lyapunov_spectrum(&self.model, &h0, &c).ok().map(|s| s.max_exponent())
    }

    fn fail(&mut self, msg: String) {
        self.record.failure = Some(format!("epoch {} iteration {}: {msg}", self.epoch + 1, self.iteration));
    }

    /// Runs the configured budget. Numerical failures end the run with a
    /// failure marker instead of an error.
    pub fn run(&mut self, data: &TaskData<T>) -> Result<(), HarnessError> {
        self.log_row(data, None)?;
        let result = match data {
            TaskData::Copy { cfg, .. } => self.run_copy(data, cfg),
            TaskData::Digits { train, .. } => self.run_digits(data, train),
            TaskData::CharLm { corpus } => self.run_charlm(data, corpus),
        };
        match result {
            Ok(()) => Ok(()),
            Err(StepError::Numerical(msg)) => {
                self.fail(msg);
                Ok(())
            }
            Err(StepError::Other(e)) => Err(e),
        }
    }

    fn run_copy(&mut self, data: &TaskData<T>, copy: &CopyConfig) -> Result<(), StepError> {
        let total = self.cfg.iterations as u64;
        let mut loss_sum = 0.0;
        let mut since = 0usize;
        while self.iteration < total {
            let batch = copy_batch::<T>(copy, &mut self.data_rng).map_err(|e| StepError::Other(e.into()))?;
            let (loss, _) = self.step(&batch, None)?;
            loss_sum += loss;
            since += 1;
            if self.iteration % self.cfg.eval_every as u64 == 0 || self.iteration == total {
                self.epoch += 1;
                self.log_row(data, Some(loss_sum / since as f64)).map_err(StepError::from_harness)?;
                loss_sum = 0.0;
                since = 0;
            }
        }
        Ok(())
    }

    fn run_digits(&mut self, data: &TaskData<T>, train: &DigitDataset) -> Result<(), StepError> {
        let mut order: Vec<usize> = (0..train.len()).collect();
        for _ in 0..self.cfg.epochs {
            self.data_rng.shuffle(&mut order);
            let mut loss_sum = 0.0;
            let mut count = 0;
            for chunk in order.chunks(self.cfg.batch_size) {
                let batch = train.batch::<T>(chunk);
                let (loss, _) = self.step(&batch, None)?;
                loss_sum += loss * chunk.len() as f64;
                count += chunk.len();
            }
            self.epoch += 1;
            self.log_row(data, Some(loss_sum / count as f64)).map_err(StepError::from_harness)?;
        }
        Ok(())
    }

    fn run_charlm(&mut self, data: &TaskData<T>, corpus: &CorpusSplit) -> Result<(), StepError> {
        let batches = charlm_batches::<T>(&corpus.train, corpus.vocab_size(), self.cfg.batch_size, corpus.chunk)
            .map_err(|e| StepError::Other(e.into()))?;
        for _ in 0..self.cfg.epochs {
            let mut h: Option<Matrix<T>> = None;
            let mut loss_sum = 0.0;
            let mut count = 0;
            for b in &batches {
                let (loss, state) = self.step(b, h.as_ref())?;
                loss_sum += loss * b.scored_count() as f64;
                count += b.scored_count();
                h = Some(state);
            }
            self.epoch += 1;
            self.log_row(data, Some(loss_sum / count as f64)).map_err(StepError::from_harness)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            model: self.model.clone(),
            epoch: self.epoch as u64,
            iteration: self.iteration,
            seeds: vec![
                SeedRecord { name: "init".into(), seed: self.cfg.seed, stream: streams::INIT, word_pos: 0 },
                SeedRecord {
                    name: "data".into(),
                    seed: self.data_rng.seed(),
                    stream: self.data_rng.stream(),
                    word_pos: self.data_rng.word_pos(),
                },
            ],
            adam: Some(self.adam.clone()),
            config: self.cfg.to_json(),
        }
    }
}

/// Trains from scratch according to `cfg`.
pub fn train<T: Scalar>(cfg: &RunConfig) -> Result<TrainOutcome<T>, HarnessError> {
    cfg.validate()?;
    let data = TaskData::<T>::load(cfg)?;
    train_on(cfg, &data)
}

/// As [`train`] with preloaded data.
pub fn train_on<T: Scalar>(cfg: &RunConfig, data: &TaskData<T>) -> Result<TrainOutcome<T>, HarnessError> {
    cfg.validate()?;
    let model = init_model::<T>(cfg, data.dims(cfg.hidden))?;
    let trainable = Trainable::for_model(&model);
    let mut trainer = Trainer::new(cfg, model, trainable)?;
    trainer.run(data)?;
    let test = if trainer.record.failure.is_none() { Some(data.test(&trainer.model)?) } else { None };
    Ok(TrainOutcome { checkpoint: trainer.checkpoint(), record: trainer.record, test })
}
