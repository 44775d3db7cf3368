//! Signal-propagation measurements: mean Jacobian norm, Lyapunov spectrum by
//! repeated QR, a kNN mutual-information estimator for discrete/continuous
//! mixtures, and the (gain, saturation) grid scanner.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::digamma;
use thiserror::Error;

use crate::activation::{Scenario, ShapeParams};
use crate::linalg::{matmul, qr_pos_with_tol, spectral_norm, LinalgError, Matrix};
use crate::rng::{streams, RngStream};
use crate::rnn::{Dims, InitConfig, RnnError, RnnModel};
use crate::scalar::Scalar;
use crate::tasks::DigitDataset;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiagnosticsError {
    #[error("rank collapse at step {step}: R[{index}][{index}] = {value:e}")]
    RankCollapse { step: usize, index: usize, value: f64 },
    #[error("trajectory became non-finite at step {step}")]
    NonFinite { step: usize },
    #[error("need more than k = {k} samples, got {samples}")]
    TooFewSamples { k: usize, samples: usize },
    #[error("{variable} coordinate {coordinate} has zero variance")]
    ZeroVariance { variable: &'static str, coordinate: usize },
    #[error("invalid diagnostic request: {0}")]
    Invalid(String),
    #[error("{0}")]
    Model(String),
}

impl From<RnnError> for DiagnosticsError {
    fn from(e: RnnError) -> Self {
        DiagnosticsError::Model(e.to_string())
    }
}

/// A smooth map `h -> F(h)` on `R^N` with its Jacobian.
pub trait StepMap<T: Scalar> {
    fn dim(&self) -> usize;
    fn step(&self, h: &[T]) -> Result<Vec<T>, DiagnosticsError>;
    fn jacobian(&self, h: &[T]) -> Result<Matrix<T>, DiagnosticsError>;
}

/// Zero-input recurrence of a model.
impl<T: Scalar> StepMap<T> for RnnModel<T> {
    fn dim(&self) -> usize {
        self.w_rec.rows()
    }

    fn step(&self, h: &[T]) -> Result<Vec<T>, DiagnosticsError> {
        Ok(self.step_autonomous(h)?)
    }

    fn jacobian(&self, h: &[T]) -> Result<Matrix<T>, DiagnosticsError> {
        Ok(self.jacobian_at(h)?)
    }
}

/// `h -> A h`, the recurrence with the activation replaced by the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap<T> {
    pub a: Matrix<T>,
}

impl<T: Scalar> StepMap<T> for LinearMap<T> {
    fn dim(&self) -> usize {
        self.a.rows()
    }

    fn step(&self, h: &[T]) -> Result<Vec<T>, DiagnosticsError> {
        self.a.matvec(h).map_err(|e| DiagnosticsError::Invalid(e.to_string()))
    }

    fn jacobian(&self, _h: &[T]) -> Result<Matrix<T>, DiagnosticsError> {
        Ok(self.a.clone())
    }
}

// ---------------------------------------------------------------------------
// Jacobian norm

pub const POWER_ITERATIONS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianNorm {
    #[default]
    Operator,
    Frobenius,
}

/// Mean norm of the one-step Jacobian over `samples` states drawn from
/// `Uniform(-5, 5)^N`.
pub fn mean_jacobian_norm<T: Scalar, M: StepMap<T>>(
    map: &M,
    samples: usize,
    norm: JacobianNorm,
    rng: &mut RngStream,
) -> Result<f64, DiagnosticsError> {
    if samples == 0 {
        return Err(DiagnosticsError::Invalid("need at least one sample".into()));
    }
    let n = map.dim();
    let mut total = 0.0;
    for _ in 0..samples {
        let h: Vec<T> = (0..n).map(|_| rng.uniform_in(-5.0, 5.0)).collect();
        let j = map.jacobian(&h)?;
        total += match norm {
            JacobianNorm::Operator => spectral_norm(&j, POWER_ITERATIONS),
            JacobianNorm::Frobenius => j.frobenius_norm(),
        }
        .as_f64();
    }
    Ok(total / samples as f64)
}

// ---------------------------------------------------------------------------
// Lyapunov spectrum

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LyapunovConfig {
    pub burn_in: usize,
    pub steps: usize,
    /// Number of leading exponents; `None` means all `N`.
    pub count: Option<usize>,
    /// Allowed gap between the last-quarter mean and the full mean.
    pub convergence_tol: f64,
}

impl Default for LyapunovConfig {
    fn default() -> Self {
        Self { burn_in: 100, steps: 1000, count: None, convergence_tol: 1e-2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovSpectrum {
    /// Nats per step, sorted descending.
    pub exponents: Vec<f64>,
    pub steps: usize,
    pub burn_in: usize,
    /// `partial_sums[t][i]`: sum of `ln R_ii` over the first `t + 1`
    /// averaging steps, columns ordered like `exponents`.
    pub partial_sums: Vec<Vec<f64>>,
    pub converged: bool,
}

impl LyapunovSpectrum {
    pub fn max_exponent(&self) -> f64 {
        self.exponents[0]
    }
}

/// Lyapunov spectrum of the zero-input recurrence, starting from the first
/// `count` standard basis vectors as the orthonormal frame.
pub fn lyapunov_spectrum<T: Scalar, M: StepMap<T>>(
    map: &M,
    h0: &[T],
    cfg: &LyapunovConfig,
) -> Result<LyapunovSpectrum, DiagnosticsError> {
    let n = map.dim();
    let count = cfg.count.unwrap_or(n);
    if count == 0 || count > n {
        return Err(DiagnosticsError::Invalid(format!("exponent count {count} must be in 1..={n}")));
    }
    let frame = Matrix::from_fn(n, count, |i, j| if i == j { T::one() } else { T::zero() });
    lyapunov_spectrum_from_frame(map, h0, frame, cfg)
}

/// [`lyapunov_spectrum`] with an explicit initial frame (`N x count`,
/// orthonormal columns).
pub fn lyapunov_spectrum_from_frame<T: Scalar, M: StepMap<T>>(
    map: &M,
    h0: &[T],
    frame: Matrix<T>,
    cfg: &LyapunovConfig,
) -> Result<LyapunovSpectrum, DiagnosticsError> {
    let n = map.dim();
    let count = frame.cols();
    if h0.len() != n || frame.rows() != n || count == 0 || count > n {
        return Err(DiagnosticsError::Invalid(format!(
            "state of length {} and {:?} frame for a map on R^{n}",
            h0.len(),
            frame.shape()
        )));
    }
    if cfg.steps == 0 {
        return Err(DiagnosticsError::Invalid("steps must be at least 1".into()));
    }
    let mut h = h0.to_vec();
    let mut q = frame;
    let mut sums = vec![0.0; count];
    let mut partial_sums = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.burn_in + cfg.steps {
        let j = map.jacobian(&h)?;
        let z = matmul(&j, &q).map_err(|e| DiagnosticsError::Invalid(e.to_string()))?;
        if !z.is_finite() {
            return Err(DiagnosticsError::NonFinite { step });
        }
        // Only an exactly vanishing direction is a collapse: tiny but positive
        // diagonals are legitimate strongly contracting steps.
        let (q_next, r) = qr_pos_with_tol(&z, T::zero()).map_err(|e| match e {
            LinalgError::Singular { index, value } => DiagnosticsError::RankCollapse { step, index, value },
            other => DiagnosticsError::Invalid(other.to_string()),
        })?;
        q = q_next;
        if step >= cfg.burn_in {
            for (i, s) in sums.iter_mut().enumerate() {
                *s += r[(i, i)].as_f64().ln();
            }
            partial_sums.push(sums.clone());
        }
        h = map.step(&h)?;
        if !h.iter().all(|v| v.is_finite()) {
            return Err(DiagnosticsError::NonFinite { step });
        }
    }

    let steps = cfg.steps;
    let raw: Vec<f64> = sums.iter().map(|s| s / steps as f64).collect();
    let mut order: Vec<usize> = (0..count).collect();
    order.sort_by(|&a, &b| raw[b].total_cmp(&raw[a]));
    let exponents: Vec<f64> = order.iter().map(|&i| raw[i]).collect();
    let partial_sums: Vec<Vec<f64>> = partial_sums.iter().map(|row| order.iter().map(|&i| row[i]).collect()).collect();

    let quarter = (steps / 4).max(1);
    let before = if steps > quarter { Some(&partial_sums[steps - quarter - 1]) } else { None };
    let last = &partial_sums[steps - 1];
    let converged = (0..count).all(|i| {
        let tail = (last[i] - before.map_or(0.0, |b| b[i])) / quarter as f64;
        (tail - exponents[i]).abs() < cfg.convergence_tol
    });
    Ok(LyapunovSpectrum { exponents, steps, burn_in: cfg.burn_in, partial_sums, converged })
}

// ---------------------------------------------------------------------------
// mutual information

/// One observation of the conditioning variable.
#[derive(Debug, Clone, PartialEq)]
pub enum MiSample {
    /// Categorical id: distance 0 to equal ids, infinite otherwise.
    Discrete(i64),
    /// Real vector compared with the max norm.
    Continuous(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiEstimate {
    /// Nats, clamped at zero.
    pub value: f64,
    /// Unclamped estimator output.
    pub raw: f64,
    pub k: usize,
    pub samples: usize,
}

fn zero_variance_check(rows: &[&[f64]], variable: &'static str) -> Result<(), DiagnosticsError> {
    let dim = rows.first().map_or(0, |r| r.len());
    for c in 0..dim {
        let first = rows[0][c];
        if rows.iter().all(|r| r[c] == first) {
            return Err(DiagnosticsError::ZeroVariance { variable, coordinate: c });
        }
    }
    Ok(())
}

fn max_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| f64::max(m, (x - y).abs()))
}

/// Mixed kNN mutual information between `xs` and `hs` in nats.
///
/// For each point the joint max-norm distance `rho` to its `k`-th neighbour
/// is found. If `rho > 0` the marginal counts use points strictly closer than
/// `rho`; if `rho = 0` the point sits on an atom and `k` is replaced by the
/// number of exact joint ties. Counts include the point itself, and the
/// per-point term is `psi(k) + ln M - psi(n_x) - psi(n_h)`.
pub fn mi_mixture(xs: &[MiSample], hs: &[Vec<f64>], k: usize) -> Result<MiEstimate, DiagnosticsError> {
    let m = xs.len();
    if k == 0 {
        return Err(DiagnosticsError::Invalid("k must be at least 1".into()));
    }
    if hs.len() != m {
        return Err(DiagnosticsError::Invalid(format!("{m} x samples but {} h samples", hs.len())));
    }
    if m <= k {
        return Err(DiagnosticsError::TooFewSamples { k, samples: m });
    }
    let h_dim = hs[0].len();
    if h_dim == 0 || hs.iter().any(|h| h.len() != h_dim) {
        return Err(DiagnosticsError::Invalid("h samples must share a positive dimension".into()));
    }
    let discrete: Option<Vec<i64>> = xs
        .iter()
        .map(|x| match x {
            MiSample::Discrete(id) => Some(*id),
            MiSample::Continuous(_) => None,
        })
        .collect();
    let continuous: Option<Vec<&[f64]>> = match discrete {
        Some(_) => None,
        None => xs
            .iter()
            .map(|x| match x {
                MiSample::Continuous(v) => Some(v.as_slice()),
                MiSample::Discrete(_) => None,
            })
            .collect::<Option<Vec<_>>>()
            .map(Some)
            .ok_or_else(|| DiagnosticsError::Invalid("x samples mix discrete and continuous kinds".into()))?,
    };
    if let Some(c) = &continuous {
        let d = c[0].len();
        if d == 0 || c.iter().any(|v| v.len() != d) {
            return Err(DiagnosticsError::Invalid("x vectors must share a positive dimension".into()));
        }
        zero_variance_check(c, "x")?;
    }
    let h_rows: Vec<&[f64]> = hs.iter().map(Vec::as_slice).collect();
    zero_variance_check(&h_rows, "h")?;

    let x_dist = |i: usize, j: usize| -> f64 {
        match (&discrete, &continuous) {
            (Some(d), _) => {
                if d[i] == d[j] {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            (None, Some(c)) => max_dist(c[i], c[j]),
            (None, None) => unreachable!(),
        }
    };

    let terms: Vec<f64> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut dx = vec![0.0; m];
            let mut dh = vec![0.0; m];
            let mut joint = Vec::with_capacity(m - 1);
            for j in 0..m {
                dx[j] = x_dist(i, j);
                dh[j] = max_dist(&hs[i], &hs[j]);
                if j != i {
                    joint.push(dx[j].max(dh[j]));
                }
            }
            let (_, &mut rho, _) = joint.select_nth_unstable_by(k - 1, f64::total_cmp);
            let (k_eff, nx, nh) = if rho == 0.0 {
                let ties = (0..m).filter(|&j| dx[j] == 0.0 && dh[j] == 0.0).count();
                let nx = dx.iter().filter(|&&d| d == 0.0).count();
                let nh = dh.iter().filter(|&&d| d == 0.0).count();
                (ties, nx, nh)
            } else {
                let nx = dx.iter().filter(|&&d| d < rho).count();
                let nh = dh.iter().filter(|&&d| d < rho).count();
                (k, nx, nh)
            };
            digamma(k_eff as f64) + (m as f64).ln() - digamma(nx as f64) - digamma(nh as f64)
        })
        .collect();
    let raw = terms.iter().sum::<f64>() / m as f64;
    Ok(MiEstimate { value: raw.max(0.0), raw, k, samples: m })
}

// ---------------------------------------------------------------------------
// grids

/// Axes of a (gain, saturation) scan and the seeds evaluated per cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub gains: Vec<f64>,
    pub saturations: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl GridSpec {
    /// `{1.0} U {1.25 k : k = 1..16}` by `{0, 0.25, 0.5, 0.75, 1}`.
    pub fn paper(seeds: Vec<u64>) -> Self {
        let mut gains = vec![1.0];
        gains.extend((1..=16).map(|k| 1.25 * k as f64));
        Self { gains, saturations: vec![0.0, 0.25, 0.5, 0.75, 1.0], seeds }
    }

    pub fn validate(&self) -> Result<(), DiagnosticsError> {
        if self.gains.is_empty() || self.saturations.is_empty() || self.seeds.is_empty() {
            return Err(DiagnosticsError::Invalid("grid axes and seed list must be nonempty".into()));
        }
        if let Some(g) = self.gains.iter().find(|g| !(**g > 0.0) || !g.is_finite()) {
            return Err(DiagnosticsError::Invalid(format!("gain {g} is not positive")));
        }
        if self.saturations.iter().any(|s| !s.is_finite()) {
            return Err(DiagnosticsError::Invalid("saturations must be finite".into()));
        }
        Ok(())
    }

    pub fn cells(&self) -> Vec<GridCell> {
        let mut out = Vec::with_capacity(self.gains.len() * self.saturations.len());
        for &gain in &self.gains {
            for &saturation in &self.saturations {
                out.push(GridCell { index: out.len(), gain, saturation });
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridCell {
    pub index: usize,
    pub gain: f64,
    pub saturation: f64,
}

/// Per-(cell, seed) value; `Err` rows are flagged failures.
#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub cell: usize,
    pub gain: f64,
    pub saturation: f64,
    pub seed: u64,
    pub value: Result<f64, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub gain: f64,
    pub saturation: f64,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub ok: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridTable {
    /// Ordered by cell, then by seed position in the spec.
    pub rows: Vec<GridRow>,
}

impl GridTable {
    pub fn aggregate(&self) -> Vec<AggregateRow> {
        let mut out: Vec<AggregateRow> = Vec::new();
        let mut start = 0;
        while start < self.rows.len() {
            let cell = self.rows[start].cell;
            let end = start + self.rows[start..].iter().take_while(|r| r.cell == cell).count();
            let group = &self.rows[start..end];
            let vals: Vec<f64> = group.iter().filter_map(|r| r.value.as_ref().ok().copied()).collect();
            let n = vals.len();
            let mean = if n == 0 { f64::NAN } else { vals.iter().sum::<f64>() / n as f64 };
            let std = if n < 2 {
                if n == 0 { f64::NAN } else { 0.0 }
            } else {
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            };
            out.push(AggregateRow {
                gain: group[0].gain,
                saturation: group[0].saturation,
                mean,
                std,
                ok: n,
                failed: group.len() - n,
            });
            start = end;
        }
        out
    }

    /// Mean over seeds at the cell with exactly these coordinates.
    pub fn mean_at(&self, gain: f64, saturation: f64) -> Option<f64> {
        self.aggregate().into_iter().find(|r| r.gain == gain && r.saturation == saturation).map(|r| r.mean)
    }
}

/// Evaluates `job` for every (cell, seed) on the current rayon pool. Results
/// are merged in cell order, so the table does not depend on scheduling.
pub fn run_grid<F>(spec: &GridSpec, job: F) -> Result<GridTable, DiagnosticsError>
where
    F: Fn(GridCell, u64) -> Result<f64, String> + Sync,
{
    spec.validate()?;
    let jobs: Vec<(GridCell, u64)> =
        spec.cells().into_iter().flat_map(|c| spec.seeds.iter().map(move |&s| (c, s))).collect();
    let rows = jobs
        .into_par_iter()
        .map(|(cell, seed)| {
            let value = match job(cell, seed) {
                Ok(v) if v.is_nan() => Err("NaN result".to_string()),
                other => other,
            };
            GridRow { cell: cell.index, gain: cell.gain, saturation: cell.saturation, seed, value }
        })
        .collect();
    Ok(GridTable { rows })
}

/// Fresh model for a grid cell: orthogonal recurrent weights, zero biases,
/// fixed `(gain, saturation)`.
pub fn grid_model<T: Scalar>(cell: GridCell, seed: u64, dims: Dims) -> Result<RnnModel<T>, DiagnosticsError> {
    let shape = ShapeParams::for_scenario(Scenario::Static, dims.hidden, T::lit(cell.gain), T::lit(cell.saturation))
        .map_err(|e| DiagnosticsError::Model(e.to_string()))?;
    let mut rng = RngStream::for_cell(seed, streams::INIT, cell.index as u64);
    Ok(RnnModel::init(dims, shape, &InitConfig::default(), &mut rng)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StabilityMeasure {
    JacobianNorm { samples: usize, norm: JacobianNorm },
    /// Largest Lyapunov exponent from `h0 ~ Uniform(-1, 1)^N`.
    MaxLyapunov { burn_in: usize, steps: usize },
}

impl StabilityMeasure {
    pub fn jn_default() -> Self {
        StabilityMeasure::JacobianNorm { samples: 100, norm: JacobianNorm::Operator }
    }

    pub fn mle_default() -> Self {
        let c = LyapunovConfig::default();
        StabilityMeasure::MaxLyapunov { burn_in: c.burn_in, steps: c.steps }
    }

    fn evaluate<T: Scalar>(&self, model: &RnnModel<T>, cell: GridCell, seed: u64) -> Result<f64, DiagnosticsError> {
        let mut rng = RngStream::for_cell(seed, streams::DIAGNOSTIC, cell.index as u64);
        match *self {
            StabilityMeasure::JacobianNorm { samples, norm } => mean_jacobian_norm(model, samples, norm, &mut rng),
            StabilityMeasure::MaxLyapunov { burn_in, steps } => {
                let h0: Vec<T> = (0..model.dim()).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
                let cfg = LyapunovConfig { burn_in, steps, count: Some(1), ..Default::default() };
                Ok(lyapunov_spectrum(model, &h0, &cfg)?.max_exponent())
            }
        }
    }
}

/// JN or MLE for every cell of `spec`, on fresh `hidden`-unit models.
pub fn stability_grid<T: Scalar>(spec: &GridSpec, hidden: usize, measure: StabilityMeasure) -> Result<GridTable, DiagnosticsError> {
    stability_grid_with::<T, _>(spec, hidden, measure, |_| {})
}

/// [`stability_grid`] with a hook that may edit each model before measuring.
pub fn stability_grid_with<T: Scalar, H>(
    spec: &GridSpec,
    hidden: usize,
    measure: StabilityMeasure,
    hook: H,
) -> Result<GridTable, DiagnosticsError>
where
    H: Fn(&mut RnnModel<T>) + Sync,
{
    let dims = Dims { input: 1, hidden, output: 1 };
    run_grid(spec, |cell, seed| {
        let mut model = grid_model::<T>(cell, seed, dims).map_err(|e| e.to_string())?;
        hook(&mut model);
        measure.evaluate(&model, cell, seed).map_err(|e| e.to_string())
    })
}

/// Input stream driving the network for the MI landscape.
#[derive(Debug, Clone)]
pub enum MiSource {
    /// i.i.d. uniform copy-task symbols, one-hot over `alphabet + 2` inputs.
    CopySymbols { alphabet: usize },
    /// Pixel streams of randomly chosen images, concatenated.
    Digits(Arc<DigitDataset>),
    /// The same scalar input at every step.
    Constant(f64),
}

impl MiSource {
    fn input_width(&self) -> usize {
        match self {
            MiSource::CopySymbols { alphabet } => alphabet + 2,
            MiSource::Digits(_) | MiSource::Constant(_) => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiConfig {
    pub hidden: usize,
    pub samples: usize,
    pub k: usize,
    /// 1 pairs `h_t` with `x_t`; 2 with `(x_{t-1}, x_t)`.
    pub window: usize,
    /// Steps run before pairs are collected.
    pub washout: usize,
}

impl Default for MiConfig {
    fn default() -> Self {
        Self { hidden: 64, samples: 1000, k: 3, window: 1, washout: 100 }
    }
}

enum Symbol {
    Id(usize),
    Value(f64),
}

fn draw_stream(source: &MiSource, len: usize, rng: &mut RngStream) -> Vec<Symbol> {
    match source {
        MiSource::CopySymbols { alphabet } => (0..len).map(|_| Symbol::Id(rng.below(*alphabet))).collect(),
        MiSource::Constant(c) => (0..len).map(|_| Symbol::Value(*c)).collect(),
        MiSource::Digits(ds) => {
            let mut out = Vec::with_capacity(len);
            while out.len() < len {
                let img = rng.below(ds.len());
                out.extend(ds.sequence(img).into_iter().map(Symbol::Value));
            }
            out.truncate(len);
            out
        }
    }
}

/// MI between the input window and the hidden state of one random model.
pub fn mi_for_model<T: Scalar>(
    model: &RnnModel<T>,
    source: &MiSource,
    cfg: &MiConfig,
    rng: &mut RngStream,
) -> Result<MiEstimate, DiagnosticsError> {
    if cfg.window == 0 || cfg.window > 2 {
        return Err(DiagnosticsError::Invalid(format!("MI window must be 1 or 2, got {}", cfg.window)));
    }
    let width = source.input_width();
    if model.dims().input != width {
        return Err(DiagnosticsError::Invalid(format!("model takes {} inputs, source emits {width}", model.dims().input)));
    }
    let washout = cfg.washout.max(cfg.window - 1);
    let total = washout + cfg.samples;
    let stream = draw_stream(source, total, rng);
    let inputs = Matrix::from_fn(total, width, |t, c| match stream[t] {
        Symbol::Id(id) => {
            if c == id {
                T::one()
            } else {
                T::zero()
            }
        }
        Symbol::Value(v) => T::lit(v),
    });
    let trace = model.forward(&inputs, None)?;
    let mut xs = Vec::with_capacity(cfg.samples);
    let mut hs = Vec::with_capacity(cfg.samples);
    for t in washout..total {
        let x = match (&stream[t], cfg.window) {
            (Symbol::Id(id), 1) => MiSample::Discrete(*id as i64),
            (Symbol::Id(id), _) => match stream[t - 1] {
                Symbol::Id(prev) => MiSample::Discrete((prev * width + id) as i64),
                Symbol::Value(_) => unreachable!(),
            },
            (Symbol::Value(v), 1) => MiSample::Continuous(vec![*v]),
            (Symbol::Value(v), _) => match stream[t - 1] {
                Symbol::Value(prev) => MiSample::Continuous(vec![prev, *v]),
                Symbol::Id(_) => unreachable!(),
            },
        };
        xs.push(x);
        hs.push(trace.hidden_states.row(t + 1).iter().map(|v| v.as_f64()).collect::<Vec<f64>>());
    }
    mi_without_constants(&xs, &hs, cfg.k)
}

/// Drops constant coordinates before estimating. A constant variable carries
/// no information, so if either side is constant altogether the MI is 0.
fn mi_without_constants(xs: &[MiSample], hs: &[Vec<f64>], k: usize) -> Result<MiEstimate, DiagnosticsError> {
    let varying = |rows: &[&[f64]]| -> Vec<usize> {
        let dim = rows.first().map_or(0, |r| r.len());
        (0..dim).filter(|&c| rows.iter().any(|r| r[c] != rows[0][c])).collect()
    };
    let zero = MiEstimate { value: 0.0, raw: 0.0, k, samples: xs.len() };
    let h_rows: Vec<&[f64]> = hs.iter().map(Vec::as_slice).collect();
    let keep_h = varying(&h_rows);
    if keep_h.is_empty() {
        return Ok(zero);
    }
    let hs: Vec<Vec<f64>> = hs.iter().map(|h| keep_h.iter().map(|&c| h[c]).collect()).collect();
    let xs: Vec<MiSample> = match xs.first() {
        Some(MiSample::Continuous(_)) => {
            let rows: Vec<&[f64]> = xs
                .iter()
                .map(|x| match x {
                    MiSample::Continuous(v) => v.as_slice(),
                    MiSample::Discrete(_) => &[][..],
                })
                .collect();
            let keep = varying(&rows);
            if keep.is_empty() {
                return Ok(zero);
            }
            rows.iter().map(|r| MiSample::Continuous(keep.iter().map(|&c| r[c]).collect())).collect()
        }
        _ => {
            if xs.windows(2).all(|w| w[0] == w[1]) {
                return Ok(zero);
            }
            xs.to_vec()
        }
    };
    mi_mixture(&xs, &hs, k)
}

/// MI landscape over `spec`: one random model per (cell, seed), driven by
/// `source`, no training.
pub fn mi_landscape<T: Scalar>(spec: &GridSpec, source: &MiSource, cfg: &MiConfig) -> Result<GridTable, DiagnosticsError> {
    let dims = Dims { input: source.input_width(), hidden: cfg.hidden, output: 1 };
    run_grid(spec, |cell, seed| {
        let model = grid_model::<T>(cell, seed, dims).map_err(|e| e.to_string())?;
        let mut rng = RngStream::for_cell(seed, streams::DATA, cell.index as u64);
        mi_for_model(&model, source, cfg, &mut rng).map(|e| e.value).map_err(|e| e.to_string())
    })
}
