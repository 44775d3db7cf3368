//! Sequential tasks: copy memory, pixel-by-pixel digit classification and
//! next-character prediction, plus the rotated-digit transfer split.
//!
//! Every batch uses the same layout: one `B x N_in` input matrix per step,
//! one target class per (step, sequence), and a boolean mask of the
//! positions that are scored.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::rng::RngStream;
use crate::rnn::log_sum_exp;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("invalid task configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed IDX file: {0}")]
    MalformedIdx(String),
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("image is {rows}x{cols}, rotation needs a square image")]
    NonSquare { rows: usize, cols: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("batch has no scored positions")]
    EmptyMask,
    #[error("outputs do not match batch: {0}")]
    Shape(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Digits,
    CharLm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchMeta {
    pub task: TaskKind,
    /// Number of output classes.
    pub classes: usize,
    pub input_width: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskBatch<T> {
    /// One `B x N_in` matrix per step.
    pub inputs: Vec<Matrix<T>>,
    /// `targets[t][b]`, meaningful where `mask[t][b]` holds.
    pub targets: Vec<Vec<usize>>,
    pub mask: Vec<Vec<bool>>,
    pub meta: BatchMeta,
}

impl<T: Scalar> TaskBatch<T> {
    pub fn batch_size(&self) -> usize {
        self.targets.first().map_or(0, Vec::len)
    }

    pub fn steps(&self) -> usize {
        self.inputs.len()
    }

    pub fn scores_step(&self, t: usize) -> bool {
        self.mask[t].iter().any(|&m| m)
    }

    pub fn scored_count(&self) -> usize {
        self.mask.iter().flatten().filter(|&&m| m).count()
    }

    /// Sequence `b` as a `T x N_in` matrix.
    pub fn sequence(&self, b: usize) -> Matrix<T> {
        let width = self.meta.input_width;
        let mut m = Matrix::zeros(self.steps(), width);
        for (t, x) in self.inputs.iter().enumerate() {
            m.row_mut(t).copy_from_slice(x.row(b));
        }
        m
    }
}

fn one_hot_rows<T: Scalar>(ids: &[usize], width: usize) -> Matrix<T> {
    let mut m = Matrix::zeros(ids.len(), width);
    for (r, &id) in ids.iter().enumerate() {
        m[(r, id)] = T::one();
    }
    m
}

// ---------------------------------------------------------------------------
// copy task

/// Copy-memory task: `payload` symbols from an alphabet of `alphabet`, a
/// blank delay, then a recall marker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CopyConfig {
    pub alphabet: usize,
    pub payload: usize,
    pub delay: usize,
    pub batch_size: usize,
}

impl Default for CopyConfig {
    fn default() -> Self {
        Self { alphabet: 8, payload: 10, delay: 50, batch_size: 64 }
    }
}

impl CopyConfig {
    pub fn validate(&self) -> Result<(), TaskError> {
        if self.alphabet < 2 || self.payload < 1 || self.batch_size < 1 {
            return Err(TaskError::InvalidConfig(format!(
                "copy task needs alphabet >= 2, payload >= 1 and batch >= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn blank(&self) -> usize {
        self.alphabet
    }

    pub fn marker(&self) -> usize {
        self.alphabet + 1
    }

    /// One-hot input width: symbols, blank and marker.
    pub fn input_width(&self) -> usize {
        self.alphabet + 2
    }

    /// Output classes: symbols and blank.
    pub fn classes(&self) -> usize {
        self.alphabet + 1
    }

    pub fn steps(&self) -> usize {
        2 * self.payload + self.delay
    }
}

pub fn copy_batch<T: Scalar>(cfg: &CopyConfig, rng: &mut RngStream) -> Result<TaskBatch<T>, TaskError> {
    cfg.validate()?;
    let (bsz, steps, recall) = (cfg.batch_size, cfg.steps(), cfg.payload + cfg.delay);
    let payloads: Vec<Vec<usize>> =
        (0..bsz).map(|_| (0..cfg.payload).map(|_| rng.below(cfg.alphabet)).collect()).collect();
    let mut inputs = Vec::with_capacity(steps);
    let mut targets = Vec::with_capacity(steps);
    let mut mask = Vec::with_capacity(steps);
    for t in 0..steps {
        let ids: Vec<usize> = payloads
            .iter()
            .map(|p| match t {
                t if t < cfg.payload => p[t],
                t if t == recall => cfg.marker(),
                _ => cfg.blank(),
            })
            .collect();
        inputs.push(one_hot_rows(&ids, cfg.input_width()));
        if t >= recall {
            targets.push(payloads.iter().map(|p| p[t - recall]).collect());
            mask.push(vec![true; bsz]);
        } else {
            targets.push(vec![cfg.blank(); bsz]);
            mask.push(vec![false; bsz]);
        }
    }
    Ok(TaskBatch {
        inputs,
        targets,
        mask,
        meta: BatchMeta { task: TaskKind::Copy, classes: cfg.classes(), input_width: cfg.input_width() },
    })
}

// ---------------------------------------------------------------------------
// digits

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

static BUNDLED_IMAGES: &[u8] = include_bytes!("../data/digits8x8-images.idx3-ubyte");
static BUNDLED_LABELS: &[u8] = include_bytes!("../data/digits8x8-labels.idx1-ubyte");

/// Square-or-not greyscale images with pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DigitImages {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
}

impl DigitImages {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            pixels: indices.iter().map(|&i| self.pixels[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Average-pools by an integer factor in both directions.
    pub fn downscale(&self, factor: usize) -> Result<Self, TaskError> {
        if factor == 0 || self.rows % factor != 0 || self.cols % factor != 0 {
            return Err(TaskError::InvalidConfig(format!(
                "downscale factor {factor} does not divide {}x{}",
                self.rows, self.cols
            )));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (rows, cols) = (self.rows / factor, self.cols / factor);
        let area = (factor * factor) as f64;
        let pixels = self
            .pixels
            .iter()
            .map(|img| {
                let mut out = vec![0.0; rows * cols];
                for r in 0..self.rows {
                    for c in 0..self.cols {
                        out[(r / factor) * cols + c / factor] += img[r * self.cols + c] / area;
                    }
                }
                out
            })
            .collect();
        Ok(Self { rows, cols, pixels, labels: self.labels.clone() })
    }

    pub fn class_counts(&self) -> [usize; 10] {
        let mut counts = [0; 10];
        for &l in &self.labels {
            counts[l as usize % 10] += 1;
        }
        counts
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32, TaskError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| TaskError::MalformedIdx(format!("truncated header at byte {at}")))
}

/// Parses an unsigned-byte IDX file. Returns the dimensions and raw data.
pub fn parse_idx(bytes: &[u8]) -> Result<(Vec<usize>, &[u8]), TaskError> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(TaskError::MalformedIdx("bad magic number".into()));
    }
    if bytes[2] != 0x08 {
        return Err(TaskError::MalformedIdx(format!("unsupported element type 0x{:02x}", bytes[2])));
    }
    let ndims = bytes[3] as usize;
    if ndims == 0 {
        return Err(TaskError::MalformedIdx("zero dimensions".into()));
    }
    let dims = (0..ndims).map(|d| be_u32(bytes, 4 + 4 * d).map(|v| v as usize)).collect::<Result<Vec<_>, _>>()?;
    let offset = 4 + 4 * ndims;
    let expected = dims.iter().product::<usize>();
    let data = &bytes[offset..];
    if data.len() != expected {
        return Err(TaskError::MalformedIdx(format!("expected {expected} data bytes, found {}", data.len())));
    }
    Ok((dims, data))
}

/// Encodes unsigned-byte data as IDX with the given dimensions.
pub fn write_idx(dims: &[usize], data: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, 0x08, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    out
}

/// Decodes an IDX image/label file pair.
pub fn digits_from_idx(images: &[u8], labels: &[u8]) -> Result<DigitImages, TaskError> {
    if be_u32(images, 0)? != IDX_IMAGES_MAGIC {
        return Err(TaskError::MalformedIdx("image file must hold a 3-D unsigned byte tensor".into()));
    }
    if be_u32(labels, 0)? != IDX_LABELS_MAGIC {
        return Err(TaskError::MalformedIdx("label file must hold a 1-D unsigned byte tensor".into()));
    }
    let (idims, idata) = parse_idx(images)?;
    let (ldims, ldata) = parse_idx(labels)?;
    if idims[0] != ldims[0] {
        return Err(TaskError::CountMismatch { images: idims[0], labels: ldims[0] });
    }
    let (rows, cols) = (idims[1], idims[2]);
    if let Some(&bad) = ldata.iter().find(|&&l| l > 9) {
        return Err(TaskError::MalformedIdx(format!("label {bad} outside 0..=9")));
    }
    let pixels = idata.chunks(rows * cols).map(|c| c.iter().map(|&p| p as f64 / 255.0).collect()).collect();
    Ok(DigitImages { rows, cols, pixels, labels: ldata.to_vec() })
}

/// Where digit images come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DigitSource {
    /// The 1797-image 8x8 set shipped with the crate.
    Bundled,
    Idx { images: PathBuf, labels: PathBuf },
}

fn read(path: &Path) -> Result<Vec<u8>, TaskError> {
    std::fs::read(path).map_err(|source| TaskError::Io { path: path.to_path_buf(), source })
}

impl DigitSource {
    pub fn load(&self) -> Result<DigitImages, TaskError> {
        match self {
            DigitSource::Bundled => digits_from_idx(BUNDLED_IMAGES, BUNDLED_LABELS),
            DigitSource::Idx { images, labels } => digits_from_idx(&read(images)?, &read(labels)?),
        }
    }
}

/// Images fed one pixel per step in a fixed pixel order.
#[derive(Debug, Clone, PartialEq)]
pub struct DigitDataset {
    pub images: DigitImages,
    /// `permutation[t]` is the pixel read at step `t`.
    pub permutation: Vec<usize>,
}

pub const DIGIT_CLASSES: usize = 10;

impl DigitDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.permutation.len()
    }

    /// Pixel sequence of image `i` in reading order.
    pub fn sequence(&self, i: usize) -> Vec<f64> {
        self.permutation.iter().map(|&p| self.images.pixels[i][p]).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self { images: self.images.subset(indices), permutation: self.permutation.clone() }
    }

    /// Batch of the given images; the label is scored at the final step.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> TaskBatch<T> {
        let steps = self.steps();
        let seqs: Vec<Vec<f64>> = indices.iter().map(|&i| self.sequence(i)).collect();
        let bsz = indices.len();
        let inputs = (0..steps)
            .map(|t| Matrix::from_vec(bsz, 1, seqs.iter().map(|s| T::lit(s[t])).collect()).expect("b x 1"))
            .collect();
        let mut targets = vec![vec![0; bsz]; steps];
        let mut mask = vec![vec![false; bsz]; steps];
        if steps > 0 {
            targets[steps - 1] = indices.iter().map(|&i| self.images.labels[i] as usize).collect();
            mask[steps - 1] = vec![true; bsz];
        }
        TaskBatch {
            inputs,
            targets,
            mask,
            meta: BatchMeta { task: TaskKind::Digits, classes: DIGIT_CLASSES, input_width: 1 },
        }
    }
}

/// Loads digits, downscales them and fixes the pixel order. `None` as the
/// permutation seed keeps raster order.
pub fn load_digits(source: &DigitSource, downscale: usize, permutation_seed: Option<u64>) -> Result<DigitDataset, TaskError> {
    let images = source.load()?.downscale(downscale)?;
    Ok(with_permutation(images, permutation_seed))
}

pub fn with_permutation(images: DigitImages, permutation_seed: Option<u64>) -> DigitDataset {
    let p = images.rows * images.cols;
    let permutation = match permutation_seed {
        Some(seed) => RngStream::new(seed, crate::rng::streams::PERMUTATION).permutation(p),
        None => (0..p).collect(),
    };
    DigitDataset { images, permutation }
}

/// Per-class shuffled split. Each class contributes `round(count * test_fraction)`
/// images to the test side.
pub fn stratified_split(labels: &[u8], test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = RngStream::new(seed, crate::rng::streams::SPLIT);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for class in 0..DIGIT_CLASSES as u8 {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        rng.shuffle(&mut idx);
        let n_test = (idx.len() as f64 * test_fraction).round() as usize;
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Trig value with round-off near `0, +-1` removed, so quarter turns are
/// exact index remaps.
fn snapped(v: f64) -> f64 {
    for target in [-1.0, 0.0, 1.0] {
        if (v - target).abs() < 1e-12 {
            return target;
        }
    }
    v
}

/// Rotates a square image anticlockwise by `degrees` about its centre with
/// bilinear interpolation; samples outside the frame read as 0.
pub fn rotate_image(pixels: &[f64], rows: usize, cols: usize, degrees: f64) -> Result<Vec<f64>, TaskError> {
    if rows != cols {
        return Err(TaskError::NonSquare { rows, cols });
    }
    let side = rows;
    let theta = degrees.to_radians();
    let (sin, cos) = (snapped(theta.sin()), snapped(theta.cos()));
    let c = (side as f64 - 1.0) / 2.0;
    let at = |r: isize, q: isize| -> f64 {
        if r < 0 || q < 0 || r >= side as isize || q >= side as isize {
            0.0
        } else {
            pixels[r as usize * side + q as usize]
        }
    };
    let mut out = vec![0.0; side * side];
    for r in 0..side {
        for q in 0..side {
            // output position in centred, y-up coordinates
            let (xo, yo) = (q as f64 - c, c - r as f64);
            // inverse rotation gives the source position
            let xs = cos * xo + sin * yo;
            let ys = -sin * xo + cos * yo;
            let (src_col, src_row) = (xs + c, c - ys);
            let (r0, q0) = (src_row.floor(), src_col.floor());
            let (fr, fq) = (src_row - r0, src_col - q0);
            let (r0, q0) = (r0 as isize, q0 as isize);
            let mut v = (1.0 - fr) * (1.0 - fq) * at(r0, q0);
            if fq > 0.0 {
                v += (1.0 - fr) * fq * at(r0, q0 + 1);
            }
            if fr > 0.0 {
                v += fr * (1.0 - fq) * at(r0 + 1, q0);
                if fq > 0.0 {
                    v += fr * fq * at(r0 + 1, q0 + 1);
                }
            }
            out[r * side + q] = v.clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Rotates every image of `dataset` and splits the result into two halves
/// with per-class counts differing by at most one. Both halves keep the
/// original pixel order.
pub fn rotate_digits(dataset: &DigitDataset, degrees: f64, split_seed: u64) -> Result<(DigitDataset, DigitDataset), TaskError> {
    let src = &dataset.images;
    let pixels = src
        .pixels
        .iter()
        .map(|p| rotate_image(p, src.rows, src.cols, degrees))
        .collect::<Result<Vec<_>, _>>()?;
    let rotated = DigitImages { rows: src.rows, cols: src.cols, pixels, labels: src.labels.clone() };

    let mut rng = RngStream::new(split_seed, crate::rng::streams::SPLIT);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    // alternate the side that gets the odd item so totals stay balanced too
    let mut odd_to_train = true;
    for class in 0..DIGIT_CLASSES as u8 {
        let mut idx: Vec<usize> = (0..rotated.len()).filter(|&i| rotated.labels[i] == class).collect();
        rng.shuffle(&mut idx);
        for (k, &i) in idx.iter().enumerate() {
            let to_train = if k % 2 == 0 { odd_to_train } else { !odd_to_train };
            if to_train { train.push(i) } else { test.push(i) }
        }
        if idx.len() % 2 == 1 {
            odd_to_train = !odd_to_train;
        }
    }
    train.sort_unstable();
    test.sort_unstable();
    let rotated = DigitDataset { images: rotated, permutation: dataset.permutation.clone() };
    Ok((rotated.subset(&train), rotated.subset(&test)))
}

// ---------------------------------------------------------------------------
// character-level language modelling

/// Character vocabulary and contiguous train/valid/test id streams.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusSplit {
    /// Sorted, deduplicated.
    pub vocab: Vec<char>,
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
    /// Truncated-BPTT window in steps.
    pub chunk: usize,
}

impl CorpusSplit {
    /// Splits `text` into contiguous train/valid/test ranges of the given
    /// fractions (the test part takes the remainder).
    pub fn from_text(text: &str, chunk: usize, train_fraction: f64, valid_fraction: f64) -> Result<Self, TaskError> {
        let chars: Vec<char> = text.chars().collect();
        if chars.is_empty() {
            return Err(TaskError::EmptyCorpus);
        }
        if chunk < 2 {
            return Err(TaskError::InvalidConfig(format!("chunk length must be >= 2, got {chunk}")));
        }
        if !(train_fraction > 0.0 && valid_fraction >= 0.0 && train_fraction + valid_fraction < 1.0) {
            return Err(TaskError::InvalidConfig("split fractions must leave room for a test part".into()));
        }
        let mut vocab = chars.clone();
        vocab.sort_unstable();
        vocab.dedup();
        let ids: Vec<usize> = chars.iter().map(|c| vocab.binary_search(c).expect("in vocab")).collect();
        let n = ids.len();
        let n_train = (n as f64 * train_fraction).round() as usize;
        let n_valid = (n as f64 * valid_fraction).round() as usize;
        if n_train < 2 || n - n_train - n_valid < 2 || (valid_fraction > 0.0 && n_valid < 2) {
            return Err(TaskError::InvalidConfig(format!("corpus of {n} characters is too short to split")));
        }
        Ok(Self {
            vocab,
            train: ids[..n_train].to_vec(),
            valid: ids[n_train..n_train + n_valid].to_vec(),
            test: ids[n_train + n_valid..].to_vec(),
            chunk,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn encode(&self, text: &str) -> Option<Vec<usize>> {
        text.chars().map(|c| self.vocab.binary_search(&c).ok()).collect()
    }
}

/// Cuts `ids` into `batch` contiguous columns and yields consecutive chunks
/// of at most `chunk` steps. The hidden state of chunk `k` continues in
/// chunk `k + 1` for the same column.
pub fn charlm_batches<T: Scalar>(ids: &[usize], vocab: usize, batch: usize, chunk: usize) -> Result<Vec<TaskBatch<T>>, TaskError> {
    if ids.is_empty() {
        return Err(TaskError::EmptyCorpus);
    }
    if chunk < 2 || batch == 0 {
        return Err(TaskError::InvalidConfig(format!("need chunk >= 2 and batch >= 1, got {chunk}, {batch}")));
    }
    let col_len = ids.len() / batch;
    if col_len < 2 {
        return Err(TaskError::InvalidConfig(format!("{} characters cannot fill {batch} columns", ids.len())));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
        return Err(TaskError::InvalidConfig(format!("id {bad} outside vocabulary of {vocab}")));
    }
    let columns: Vec<&[usize]> = (0..batch).map(|b| &ids[b * col_len..(b + 1) * col_len]).collect();
    let mut out = Vec::new();
    let mut start = 0;
    while start < col_len - 1 {
        let steps = chunk.min(col_len - 1 - start);
        let mut inputs = Vec::with_capacity(steps);
        let mut targets = Vec::with_capacity(steps);
        for t in start..start + steps {
            let cur: Vec<usize> = columns.iter().map(|c| c[t]).collect();
            inputs.push(one_hot_rows(&cur, vocab));
            targets.push(columns.iter().map(|c| c[t + 1]).collect());
        }
        out.push(TaskBatch {
            inputs,
            targets,
            mask: vec![vec![true; batch]; steps],
            meta: BatchMeta { task: TaskKind::CharLm, classes: vocab, input_width: vocab },
        });
        start += steps;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// metrics

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// Mean cross-entropy in nats.
    pub loss: f64,
    pub bpc: f64,
    pub count: usize,
}

/// Running sums for metrics over several batches.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MetricSums {
    pub correct: usize,
    pub count: usize,
    pub nats: f64,
}

impl MetricSums {
    pub fn add<T: Scalar>(&mut self, outputs: &[Matrix<T>], batch: &TaskBatch<T>) -> Result<(), TaskError> {
        if outputs.len() != batch.steps() {
            return Err(TaskError::Shape(format!("{} output steps for {} input steps", outputs.len(), batch.steps())));
        }
        for (t, logits) in outputs.iter().enumerate() {
            for (b, &scored) in batch.mask[t].iter().enumerate() {
                if !scored {
                    continue;
                }
                if b >= logits.rows() {
                    return Err(TaskError::Shape(format!("no logits for scored position (step {t}, sequence {b})")));
                }
                let row = logits.row(b);
                let target = batch.targets[t][b];
                if target >= row.len() {
                    return Err(TaskError::Shape(format!("target {target} outside {} classes", row.len())));
                }
                let argmax = row
                    .iter()
                    .enumerate()
                    .fold((0, T::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0;
                self.correct += usize::from(argmax == target);
                self.count += 1;
                self.nats += (log_sum_exp(row) - row[target]).as_f64();
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<Metrics, TaskError> {
        if self.count == 0 {
            return Err(TaskError::EmptyMask);
        }
        let loss = self.nats / self.count as f64;
        Ok(Metrics {
            accuracy: self.correct as f64 / self.count as f64,
            loss,
            bpc: loss / std::f64::consts::LN_2,
            count: self.count,
        })
    }
}

/// Accuracy and bits-per-character over the scored positions of one batch.
pub fn metrics<T: Scalar>(outputs: &[Matrix<T>], batch: &TaskBatch<T>) -> Result<Metrics, TaskError> {
    let mut sums = MetricSums::default();
    sums.add(outputs, batch)?;
    sums.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copy_batch_layout() {
        let cfg = CopyConfig { alphabet: 8, payload: 10, delay: 200, batch_size: 4 };
        let b: TaskBatch<f64> = copy_batch(&cfg, &mut RngStream::new(1, 2)).unwrap();
        assert_eq!(b.steps(), 220);
        assert_eq!(b.meta.input_width, 10);
        for s in 0..4 {
            let scored = (0..220).filter(|&t| b.mask[t][s]).count();
            assert_eq!(scored, 10);
        }
        for s in 0..4 {
            let x = b.sequence(s);
            for t in 0..220 {
                let hot: Vec<usize> = (0..10).filter(|&c| x[(t, c)] == 1.0).collect();
                assert_eq!(hot.len(), 1);
                let id = hot[0];
                match t {
                    t if t < 10 => {
                        assert!(id < 8);
                        assert_eq!(b.targets[210 + t][s], id, "recall mirrors payload");
                    }
                    210 => assert_eq!(id, cfg.marker()),
                    _ => assert_eq!(id, cfg.blank()),
                }
                if !b.mask[t][s] {
                    assert_eq!(b.targets[t][s], cfg.blank());
                }
            }
        }
    }

    #[test]
    fn copy_zero_delay() {
        let cfg = CopyConfig { alphabet: 3, payload: 4, delay: 0, batch_size: 2 };
        let b: TaskBatch<f64> = copy_batch(&cfg, &mut RngStream::new(0, 0)).unwrap();
        assert_eq!(b.steps(), 8);
        assert!((4..8).all(|t| b.scores_step(t)) && (0..4).all(|t| !b.scores_step(t)));
        assert!(copy_batch::<f64>(&CopyConfig { alphabet: 1, ..cfg }, &mut RngStream::new(0, 0)).is_err());
    }

    #[test]
    fn copy_generation_is_pure() {
        let cfg = CopyConfig::default();
        let a: TaskBatch<f64> = copy_batch(&cfg, &mut RngStream::new(9, 2)).unwrap();
        let b: TaskBatch<f64> = copy_batch(&cfg, &mut RngStream::new(9, 2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn idx_round_trip_and_errors() {
        let imgs = write_idx(&[2, 2, 2], &[0, 255, 0, 0, 10, 20, 30, 40]);
        let labels = write_idx(&[2], &[3, 7]);
        let d = digits_from_idx(&imgs, &labels).unwrap();
        assert_eq!((d.rows, d.cols, d.labels.clone()), (2, 2, vec![3, 7]));
        assert_eq!(d.pixels[0], vec![0.0, 1.0, 0.0, 0.0]);

        let short_labels = write_idx(&[3], &[1, 2, 3]);
        assert!(matches!(digits_from_idx(&imgs, &short_labels), Err(TaskError::CountMismatch { images: 2, labels: 3 })));
        let mut bad = imgs.clone();
        bad[2] = 0x0D;
        assert!(matches!(digits_from_idx(&bad, &labels), Err(TaskError::MalformedIdx(_))));
        assert!(matches!(parse_idx(&imgs[..9]), Err(TaskError::MalformedIdx(_))));
    }

    #[test]
    fn bundled_digits_load() {
        let d = load_digits(&DigitSource::Bundled, 1, Some(0)).unwrap();
        assert_eq!(d.len(), 1797);
        assert_eq!(d.steps(), 64);
        assert!(d.images.pixels.iter().flatten().all(|&p| (0.0..=1.0).contains(&p)));
        let mut p = d.permutation.clone();
        p.sort_unstable();
        assert_eq!(p, (0..64).collect::<Vec<_>>());
        let half = load_digits(&DigitSource::Bundled, 2, None).unwrap();
        assert_eq!(half.steps(), 16);
    }

    #[test]
    fn identity_permutation_zero_image() {
        let images = DigitImages { rows: 2, cols: 2, pixels: vec![vec![0.0; 4]], labels: vec![4] };
        let d = with_permutation(images, None);
        assert_eq!(d.permutation, vec![0, 1, 2, 3]);
        let b: TaskBatch<f64> = d.batch(&[0]);
        assert!(b.inputs.iter().all(|x| x[(0, 0)] == 0.0));
        assert_eq!(b.targets[3][0], 4);
        assert_eq!(b.scored_count(), 1);
    }

    #[test]
    fn rotation_quarter_turns_are_exact() {
        let img: Vec<f64> = (0..25).map(|v| (v as f64 * 0.37).fract()).collect();
        let mut cur = img.clone();
        for _ in 0..4 {
            cur = rotate_image(&cur, 5, 5, 90.0).unwrap();
        }
        assert_eq!(cur, img);
        assert_eq!(rotate_image(&img, 5, 5, 0.0).unwrap(), img);
        let full = rotate_image(&img, 5, 5, 360.0).unwrap();
        assert!(full.iter().zip(&img).all(|(a, b)| (a - b).abs() < 1e-6));
        assert!(matches!(rotate_image(&img[..20], 4, 5, 45.0), Err(TaskError::NonSquare { .. })));
    }

    #[test]
    fn rotation_is_anticlockwise() {
        // a single lit pixel right of centre moves above centre
        let mut img = vec![0.0; 9];
        img[5] = 1.0;
        let r = rotate_image(&img, 3, 3, 90.0).unwrap();
        assert_eq!(r[1], 1.0);
        assert_eq!(r.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn rotated_split_is_balanced() {
        let d = load_digits(&DigitSource::Bundled, 1, Some(3)).unwrap();
        let (train, test) = rotate_digits(&d, 45.0, 0).unwrap();
        assert_eq!(train.len() + test.len(), d.len());
        let (a, b) = (train.images.class_counts(), test.images.class_counts());
        for c in 0..10 {
            assert!(a[c].abs_diff(b[c]) <= 1, "class {c}: {} vs {}", a[c], b[c]);
        }
        assert_eq!(train.permutation, d.permutation);
    }

    #[test]
    fn corpus_split_and_chunks() {
        let text = "the quick brown fox jumps over the lazy dog, again and again.";
        let c = CorpusSplit::from_text(text, 4, 0.8, 0.1).unwrap();
        assert!(c.vocab.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(c.train.len() + c.valid.len() + c.test.len(), text.chars().count());
        let batches: Vec<TaskBatch<f64>> = charlm_batches(&c.train, c.vocab_size(), 1, 4).unwrap();
        let targets: Vec<usize> = batches.iter().flat_map(|b| b.targets.iter().map(|t| t[0])).collect();
        assert_eq!(targets, c.train[1..].to_vec());
        assert!(batches.iter().all(|b| b.steps() <= 4 && b.scored_count() == b.steps()));

        assert!(matches!(CorpusSplit::from_text("", 4, 0.8, 0.1), Err(TaskError::EmptyCorpus)));
        assert!(charlm_batches::<f64>(&[], 3, 1, 4).is_err());
        assert!(charlm_batches::<f64>(&c.train, c.vocab_size(), 1, 1).is_err());
    }

    #[test]
    fn chunked_columns_continue() {
        let ids: Vec<usize> = (0..21).map(|i| i % 3).collect();
        let batches: Vec<TaskBatch<f64>> = charlm_batches(&ids, 3, 2, 4).unwrap();
        // 2 columns of 10 ids, 9 prediction steps each: chunks of 4, 4, 1
        assert_eq!(batches.iter().map(|b| b.steps()).collect::<Vec<_>>(), vec![4, 4, 1]);
        let col1: Vec<usize> = batches.iter().flat_map(|b| b.targets.iter().map(|t| t[1])).collect();
        assert_eq!(col1, ids[11..20].to_vec());
    }

    #[test]
    fn metric_examples() {
        let cfg = CopyConfig { alphabet: 4, payload: 3, delay: 2, batch_size: 5 };
        let batch: TaskBatch<f64> = copy_batch(&cfg, &mut RngStream::new(2, 2)).unwrap();
        let classes = cfg.classes();
        let perfect: Vec<Matrix<f64>> = (0..batch.steps())
            .map(|t| Matrix::from_fn(5, classes, |b, c| if c == batch.targets[t][b] { 10.0 } else { 0.0 }))
            .collect();
        assert_eq!(metrics(&perfect, &batch).unwrap().accuracy, 1.0);

        let uniform: Vec<Matrix<f64>> = (0..batch.steps()).map(|_| Matrix::zeros(5, classes)).collect();
        let m = metrics(&uniform, &batch).unwrap();
        assert!((m.bpc - (classes as f64).log2()).abs() < 1e-12);

        let blank: Vec<Matrix<f64>> = (0..batch.steps())
            .map(|_| Matrix::from_fn(5, classes, |_, c| if c == cfg.blank() { 1.0 } else { 0.0 }))
            .collect();
        assert_eq!(metrics(&blank, &batch).unwrap().accuracy, 0.0);

        let mut empty = batch.clone();
        empty.mask.iter_mut().flatten().for_each(|m| *m = false);
        assert!(matches!(metrics(&uniform, &empty), Err(TaskError::EmptyMask)));
    }

    #[test]
    fn alternating_corpus_perfect_predictor() {
        let text: String = "ab".repeat(50);
        let c = CorpusSplit::from_text(&text, 10, 0.8, 0.1).unwrap();
        let batches: Vec<TaskBatch<f64>> = charlm_batches(&c.train, 2, 1, 10).unwrap();
        let mut sums = MetricSums::default();
        for b in &batches {
            let outs: Vec<Matrix<f64>> = (0..b.steps())
                .map(|t| Matrix::from_fn(1, 2, |_, k| if k == b.targets[t][0] { 40.0 } else { -40.0 }))
                .collect();
            sums.add(&outs, b).unwrap();
        }
        let m = sums.finish().unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert!(m.bpc < 1e-30);
    }
}
