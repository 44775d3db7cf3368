//! Vanilla RNN with an adaptive activation and a linear readout.
//!
//! ```text
//! h_t = gamma(W_rec h_{t-1} + W_in x_t + b; n, s)
//! y_t = W_out h_t + b_out
//! ```
//!
//! Gradients are assembled by hand: the backward pass chains the activation
//! partials (`dx`, `dn`, `ds`) recorded during the forward pass.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::activation::{self, ActivationError, Scenario, ShapeParams};
use crate::linalg::{gemm_into, init_gaussian, init_orthogonal_with, GaussianScheme, LinalgError, Matrix, Op, OrthogonalScheme};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tasks::TaskBatch;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RnnError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite hidden state at step {step}")]
    NonFinite { step: usize },
    #[error("batch has no scored positions")]
    EmptyMask,
    #[error("loss is not finite ({0})")]
    NonFiniteLoss(f64),
    #[error("target class {target} out of range for {classes} outputs")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error(transparent)]
    Activation(#[from] ActivationError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

/// Initialisation schemes for the three weight matrices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    pub recurrent: OrthogonalScheme,
    pub input: GaussianScheme,
    /// Standard deviation of the readout weights. Small values keep the
    /// untrained model close to a uniform predictor.
    pub readout_std: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self { recurrent: OrthogonalScheme::QrGaussian, input: GaussianScheme::GlorotNormal, readout_std: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RnnModel<T> {
    /// `N x N`
    pub w_rec: Matrix<T>,
    /// `N x N_in`
    pub w_in: Matrix<T>,
    /// `N_out x N`
    pub w_out: Matrix<T>,
    pub b: Vec<T>,
    pub b_out: Vec<T>,
    pub shape: ShapeParams<T>,
}

/// Which parameters a tensor belongs to, for optimiser gating.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Weights,
    Shape,
}

pub const TENSOR_NAMES: [&str; 7] = ["w_rec", "w_in", "w_out", "b", "b_out", "gain", "saturation"];

/// Mutable view of one trainable tensor.
pub struct TensorMut<'a, T> {
    pub name: &'static str,
    pub group: ParamGroup,
    pub data: &'a mut [T],
}

impl<T: Scalar> RnnModel<T> {
    /// Orthogonal recurrent weights, Gaussian input weights, small Gaussian
    /// readout, zero biases.
    pub fn init(dims: Dims, shape: ShapeParams<T>, init: &InitConfig, rng: &mut RngStream) -> Result<Self, RnnError> {
        if dims.input == 0 || dims.hidden == 0 || dims.output == 0 {
            return Err(RnnError::Dimension(format!("all dimensions must be positive, got {dims:?}")));
        }
        shape.check_layer(dims.hidden)?;
        let w_rec = init_orthogonal_with(dims.hidden, init.recurrent, rng);
        let w_in = init_gaussian(dims.hidden, dims.input, init.input, rng);
        let std = T::lit(init.readout_std);
        let w_out = Matrix::from_fn(dims.output, dims.hidden, |_, _| rng.normal::<T>() * std);
        Ok(Self {
            w_rec,
            w_in,
            w_out,
            b: vec![T::zero(); dims.hidden],
            b_out: vec![T::zero(); dims.output],
            shape,
        })
    }

    /// All-zero weights and biases.
    pub fn zeros(dims: Dims, shape: ShapeParams<T>) -> Result<Self, RnnError> {
        shape.check_layer(dims.hidden)?;
        Ok(Self {
            w_rec: Matrix::zeros(dims.hidden, dims.hidden),
            w_in: Matrix::zeros(dims.hidden, dims.input),
            w_out: Matrix::zeros(dims.output, dims.hidden),
            b: vec![T::zero(); dims.hidden],
            b_out: vec![T::zero(); dims.output],
            shape,
        })
    }

    pub fn dims(&self) -> Dims {
        Dims { input: self.w_in.cols(), hidden: self.w_rec.rows(), output: self.w_out.rows() }
    }

    pub fn scenario(&self) -> Scenario {
        self.shape.scenario()
    }

    /// Checks dimensional consistency, finiteness and gain positivity.
    pub fn validate(&self) -> Result<(), RnnError> {
        let n = self.w_rec.rows();
        let dims_ok = self.w_rec.cols() == n
            && self.w_in.rows() == n
            && self.w_out.cols() == n
            && self.b.len() == n
            && self.b_out.len() == self.w_out.rows();
        if !dims_ok {
            return Err(RnnError::Dimension(format!(
                "inconsistent model: w_rec {:?}, w_in {:?}, w_out {:?}, b {}, b_out {}",
                self.w_rec.shape(),
                self.w_in.shape(),
                self.w_out.shape(),
                self.b.len(),
                self.b_out.len()
            )));
        }
        self.shape.check_layer(n)?;
        let finite = self.w_rec.is_finite()
            && self.w_in.is_finite()
            && self.w_out.is_finite()
            && self.b.iter().chain(&self.b_out).chain(self.shape.saturation()).all(|v| v.is_finite());
        if !finite {
            return Err(RnnError::Dimension("model contains non-finite entries".into()));
        }
        if let Some(&g) = self.shape.gain().iter().find(|g| !(**g > T::zero())) {
            return Err(ActivationError::NonPositiveGain(g.as_f64()).into());
        }
        Ok(())
    }

    /// Trainable tensors in [`TENSOR_NAMES`] order. Shape tensors are listed
    /// only for adaptive scenarios.
    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_, T>> {
        let adaptive = self.shape.scenario().is_adaptive();
        let (gain, sat) = self.shape.params_mut();
        let mut out = vec![
            TensorMut { name: "w_rec", group: ParamGroup::Weights, data: self.w_rec.as_mut_slice() },
            TensorMut { name: "w_in", group: ParamGroup::Weights, data: self.w_in.as_mut_slice() },
            TensorMut { name: "w_out", group: ParamGroup::Weights, data: self.w_out.as_mut_slice() },
            TensorMut { name: "b", group: ParamGroup::Weights, data: &mut self.b },
            TensorMut { name: "b_out", group: ParamGroup::Weights, data: &mut self.b_out },
        ];
        if adaptive {
            out.push(TensorMut { name: "gain", group: ParamGroup::Shape, data: gain });
            out.push(TensorMut { name: "saturation", group: ParamGroup::Shape, data: sat });
        }
        out
    }

    /// Pre-activation `W_rec h + W_in x + b` for one sequence step.
    fn pre_activation(&self, h: &[T], x: Option<&[T]>) -> Vec<T> {
        let mut a = self.w_rec.matvec(h).expect("checked dims");
        if let Some(x) = x {
            let u = self.w_in.matvec(x).expect("checked dims");
            for (ai, ui) in a.iter_mut().zip(u) {
                *ai += ui;
            }
        }
        for (ai, &bi) in a.iter_mut().zip(&self.b) {
            *ai += bi;
        }
        a
    }

    /// Autonomous one-step map `h -> gamma(W_rec h + b)` (zero input).
    pub fn step_autonomous(&self, h: &[T]) -> Result<Vec<T>, RnnError> {
        self.check_hidden(h)?;
        let a = self.pre_activation(h, None);
        Ok(a.iter()
            .enumerate()
            .map(|(i, &ai)| activation::value_unchecked(ai, self.shape.gain_at(i), self.shape.saturation_at(i)))
            .collect())
    }

    /// Jacobian of the zero-input step map: `diag(gamma'(W_rec h + b)) W_rec`.
    pub fn jacobian_at(&self, h: &[T]) -> Result<Matrix<T>, RnnError> {
        self.check_hidden(h)?;
        let a = self.pre_activation(h, None);
        let d: Vec<T> = a
            .iter()
            .enumerate()
            .map(|(i, &ai)| activation::dx_unchecked(ai, self.shape.gain_at(i), self.shape.saturation_at(i)))
            .collect();
        let mut j = self.w_rec.clone();
        j.scale_rows(&d);
        Ok(j)
    }

    fn check_hidden(&self, h: &[T]) -> Result<(), RnnError> {
        if h.len() != self.w_rec.rows() {
            return Err(RnnError::Dimension(format!(
                "hidden state has length {}, model has {} units",
                h.len(),
                self.w_rec.rows()
            )));
        }
        Ok(())
    }

    /// Runs one sequence (`T x N_in` inputs) from `h0` (zero if `None`).
    pub fn forward(&self, inputs: &Matrix<T>, h0: Option<&[T]>) -> Result<ForwardTrace<T>, RnnError> {
        self.validate()?;
        let Dims { input, hidden, output } = self.dims();
        if inputs.cols() != input && inputs.rows() > 0 {
            return Err(RnnError::Dimension(format!("inputs have width {}, model expects {input}", inputs.cols())));
        }
        let steps = inputs.rows();
        let mut h = match h0 {
            Some(h0) => {
                self.check_hidden(h0)?;
                h0.to_vec()
            }
            None => vec![T::zero(); hidden],
        };
        let mut pre = Matrix::zeros(steps, hidden);
        let mut states = Matrix::zeros(steps + 1, hidden);
        let mut outputs = Matrix::zeros(steps, output);
        states.row_mut(0).copy_from_slice(&h);
        for t in 0..steps {
            let a = self.pre_activation(&h, Some(inputs.row(t)));
            for (i, &ai) in a.iter().enumerate() {
                h[i] = activation::value_unchecked(ai, self.shape.gain_at(i), self.shape.saturation_at(i));
            }
            if h.iter().any(|v| !v.is_finite()) {
                return Err(RnnError::NonFinite { step: t + 1 });
            }
            pre.row_mut(t).copy_from_slice(&a);
            states.row_mut(t + 1).copy_from_slice(&h);
            let y = self.w_out.matvec(&h)?;
            for (o, (yi, &bi)) in outputs.row_mut(t).iter_mut().zip(y.into_iter().zip(&self.b_out)) {
                *o = yi + bi;
            }
        }
        Ok(ForwardTrace { pre_activations: pre, hidden_states: states, outputs })
    }

    /// Batched forward pass. Logits are produced only at steps where the
    /// batch scores at least one position (other steps hold a `0 x N_out`
    /// placeholder). With `keep_terms` the activation partials are recorded
    /// for a backward pass.
    pub fn forward_batch(
        &self,
        batch: &TaskBatch<T>,
        h0: Option<&Matrix<T>>,
        keep_terms: bool,
    ) -> Result<BatchTrace<T>, RnnError> {
        self.validate()?;
        let Dims { input, hidden, output } = self.dims();
        let bsz = batch.batch_size();
        let steps = batch.steps();
        let adaptive = self.shape.scenario().is_adaptive();
        let mut h = match h0 {
            Some(m) => {
                if m.shape() != (bsz, hidden) {
                    return Err(RnnError::Dimension(format!(
                        "initial state {:?} does not match batch {bsz} x hidden {hidden}",
                        m.shape()
                    )));
                }
                m.clone()
            }
            None => Matrix::zeros(bsz, hidden),
        };
        let mut trace = BatchTrace {
            hidden: Vec::with_capacity(steps + 1),
            dx: Vec::new(),
            dn: Vec::new(),
            ds: Vec::new(),
            logits: Vec::with_capacity(steps),
        };
        trace.hidden.push(h.clone());
        let gains: Vec<T> = (0..hidden).map(|i| self.shape.gain_at(i)).collect();
        let sats: Vec<T> = (0..hidden).map(|i| self.shape.saturation_at(i)).collect();

        for t in 0..steps {
            let x = &batch.inputs[t];
            if x.shape() != (bsz, input) {
                return Err(RnnError::Dimension(format!(
                    "step {t} input is {:?}, expected {bsz} x {input}",
                    x.shape()
                )));
            }
            let mut a = Matrix::zeros(bsz, hidden);
            for r in 0..bsz {
                a.row_mut(r).copy_from_slice(&self.b);
            }
            gemm_into(T::one(), x, Op::N, &self.w_in, Op::T, T::one(), &mut a)?;
            gemm_into(T::one(), &h, Op::N, &self.w_rec, Op::T, T::one(), &mut a)?;

            let mut dx = if keep_terms { Matrix::zeros(bsz, hidden) } else { Matrix::zeros(0, 0) };
            let mut dn = if keep_terms && adaptive { Matrix::zeros(bsz, hidden) } else { Matrix::zeros(0, 0) };
            let mut ds = if keep_terms && adaptive { Matrix::zeros(bsz, hidden) } else { Matrix::zeros(0, 0) };
            {
                let hs = h.as_mut_slice();
                let av = a.as_slice();
                for r in 0..bsz {
                    for j in 0..hidden {
                        let k = r * hidden + j;
                        if keep_terms {
                            let tm = activation::terms(av[k], gains[j], sats[j]);
                            hs[k] = tm.value;
                            dx.as_mut_slice()[k] = tm.dx;
                            if adaptive {
                                dn.as_mut_slice()[k] = tm.dn;
                                ds.as_mut_slice()[k] = tm.ds;
                            }
                        } else {
                            hs[k] = activation::value_unchecked(av[k], gains[j], sats[j]);
                        }
                    }
                }
            }
            if !h.is_finite() {
                return Err(RnnError::NonFinite { step: t + 1 });
            }
            if batch.scores_step(t) {
                let mut y = Matrix::zeros(bsz, output);
                for r in 0..bsz {
                    y.row_mut(r).copy_from_slice(&self.b_out);
                }
                gemm_into(T::one(), &h, Op::N, &self.w_out, Op::T, T::one(), &mut y)?;
                trace.logits.push(y);
            } else {
                trace.logits.push(Matrix::zeros(0, output));
            }
            if keep_terms {
                trace.dx.push(dx);
                if adaptive {
                    trace.dn.push(dn);
                    trace.ds.push(ds);
                }
            }
            trace.hidden.push(h.clone());
        }
        Ok(trace)
    }

    /// Mean masked cross-entropy and its exact gradient.
    pub fn loss_and_grads(&self, batch: &TaskBatch<T>) -> Result<(T, Gradients<T>), RnnError> {
        let out = self.loss_and_grads_from(batch, None)?;
        Ok((out.loss, out.grads))
    }

    /// As [`loss_and_grads`](Self::loss_and_grads) from an explicit initial
    /// state, also returning the final hidden state for stateful truncation.
    pub fn loss_and_grads_from(&self, batch: &TaskBatch<T>, h0: Option<&Matrix<T>>) -> Result<StepResult<T>, RnnError> {
        let trace = self.forward_batch(batch, h0, true)?;
        let Dims { input, hidden, output } = self.dims();
        let bsz = batch.batch_size();
        let steps = batch.steps();
        let scenario = self.shape.scenario();
        let adaptive = scenario.is_adaptive();
        let count = batch.scored_count();
        if count == 0 {
            return Err(RnnError::EmptyMask);
        }
        let inv_count = T::one() / T::lit(count as f64);

        let mut g = Gradients::zeros(self.dims(), &self.shape);
        let mut g_gain = vec![T::zero(); hidden];
        let mut g_sat = vec![T::zero(); hidden];
        let mut loss = T::zero();
        let mut dh = Matrix::zeros(bsz, hidden);

        for t in (0..steps).rev() {
            if batch.scores_step(t) {
                let mut dy = Matrix::zeros(bsz, output);
                let logits = &trace.logits[t];
                for r in 0..bsz {
                    if !batch.mask[t][r] {
                        continue;
                    }
                    let target = batch.targets[t][r];
                    if target >= output {
                        return Err(RnnError::TargetOutOfRange { target, classes: output });
                    }
                    let (lse, row) = (log_sum_exp(logits.row(r)), dy.row_mut(r));
                    loss += lse - logits[(r, target)];
                    for (c, d) in row.iter_mut().enumerate() {
                        *d = (logits[(r, c)] - lse).exp() * inv_count;
                    }
                    row[target] -= inv_count;
                }
                let h_t = &trace.hidden[t + 1];
                gemm_into(T::one(), &dy, Op::T, h_t, Op::N, T::one(), &mut g.w_out)?;
                for r in 0..bsz {
                    for (gb, &d) in g.b_out.iter_mut().zip(dy.row(r)) {
                        *gb += d;
                    }
                }
                gemm_into(T::one(), &dy, Op::N, &self.w_out, Op::N, T::one(), &mut dh)?;
            }

            if adaptive {
                let (dn, ds, dhs) = (trace.dn[t].as_slice(), trace.ds[t].as_slice(), dh.as_slice());
                for r in 0..bsz {
                    for j in 0..hidden {
                        let k = r * hidden + j;
                        g_gain[j] += dhs[k] * dn[k];
                        g_sat[j] += dhs[k] * ds[k];
                    }
                }
            }
            // dA = dH * gamma'(A). Deltas that decay into the subnormal range
            // are flushed to zero; subnormal GEMM operands are very slow.
            let tiny = T::min_positive_value();
            for (d, &s) in dh.as_mut_slice().iter_mut().zip(trace.dx[t].as_slice()) {
                *d *= s;
                if d.abs() < tiny {
                    *d = T::zero();
                }
            }
            let da = dh;
            gemm_into(T::one(), &da, Op::T, &trace.hidden[t], Op::N, T::one(), &mut g.w_rec)?;
            debug_assert_eq!(batch.inputs[t].cols(), input);
            gemm_into(T::one(), &da, Op::T, &batch.inputs[t], Op::N, T::one(), &mut g.w_in)?;
            for r in 0..bsz {
                for (gb, &d) in g.b.iter_mut().zip(da.row(r)) {
                    *gb += d;
                }
            }
            let mut next = Matrix::zeros(bsz, hidden);
            if t > 0 {
                gemm_into(T::one(), &da, Op::N, &self.w_rec, Op::N, T::zero(), &mut next)?;
            }
            dh = next;
        }

        let loss = loss * inv_count;
        if !loss.is_finite() {
            return Err(RnnError::NonFiniteLoss(loss.as_f64()));
        }
        match scenario {
            Scenario::Static => {}
            Scenario::Homogeneous => {
                g.d_gain = Some(vec![g_gain.iter().copied().sum()]);
                g.d_saturation = Some(vec![g_sat.iter().copied().sum()]);
            }
            Scenario::Heterogeneous => {
                g.d_gain = Some(g_gain);
                g.d_saturation = Some(g_sat);
            }
        }
        let last = trace.hidden.last().cloned().unwrap_or_else(|| Matrix::zeros(bsz, hidden));
        Ok(StepResult { loss, grads: g, final_state: last })
    }

    /// Mean masked cross-entropy and logits, no gradient.
    pub fn evaluate(&self, batch: &TaskBatch<T>, h0: Option<&Matrix<T>>) -> Result<Evaluation<T>, RnnError> {
        let trace = self.forward_batch(batch, h0, false)?;
        let count = batch.scored_count();
        if count == 0 {
            return Err(RnnError::EmptyMask);
        }
        let mut loss = T::zero();
        let classes = self.dims().output;
        for (t, logits) in trace.logits.iter().enumerate() {
            if !batch.scores_step(t) {
                continue;
            }
            for r in 0..batch.batch_size() {
                if batch.mask[t][r] {
                    let target = batch.targets[t][r];
                    if target >= classes {
                        return Err(RnnError::TargetOutOfRange { target, classes });
                    }
                    loss += log_sum_exp(logits.row(r)) - logits[(r, target)];
                }
            }
        }
        let loss = loss / T::lit(count as f64);
        let final_state = trace.hidden.last().cloned().expect("trace holds h0");
        Ok(Evaluation { loss, logits: trace.logits, final_state })
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}

/// Single-sequence trace: `hidden_states[t + 1] = gamma(pre_activations[t])`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<T> {
    /// `T x N`
    pub pre_activations: Matrix<T>,
    /// `(T + 1) x N`, row 0 is `h_0`
    pub hidden_states: Matrix<T>,
    /// `T x N_out`
    pub outputs: Matrix<T>,
}

/// Batched trace, one `B x N` matrix per step.
#[derive(Debug, Clone)]
pub struct BatchTrace<T> {
    /// `T + 1` entries, the first being the initial state.
    pub hidden: Vec<Matrix<T>>,
    pub dx: Vec<Matrix<T>>,
    pub dn: Vec<Matrix<T>>,
    pub ds: Vec<Matrix<T>>,
    pub logits: Vec<Matrix<T>>,
}

#[derive(Debug, Clone)]
pub struct StepResult<T> {
    pub loss: T,
    pub grads: Gradients<T>,
    pub final_state: Matrix<T>,
}

#[derive(Debug, Clone)]
pub struct Evaluation<T> {
    pub loss: T,
    pub logits: Vec<Matrix<T>>,
    pub final_state: Matrix<T>,
}

/// Loss gradient laid out like [`RnnModel`]. Shape gradients are absent in
/// the static scenario, scalar for homogeneous and per-neuron for
/// heterogeneous adaptation.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub w_rec: Matrix<T>,
    pub w_in: Matrix<T>,
    pub w_out: Matrix<T>,
    pub b: Vec<T>,
    pub b_out: Vec<T>,
    pub d_gain: Option<Vec<T>>,
    pub d_saturation: Option<Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros(dims: Dims, shape: &ShapeParams<T>) -> Self {
        let shape_grad = shape.scenario().is_adaptive().then(|| vec![T::zero(); shape.len()]);
        Self {
            w_rec: Matrix::zeros(dims.hidden, dims.hidden),
            w_in: Matrix::zeros(dims.hidden, dims.input),
            w_out: Matrix::zeros(dims.output, dims.hidden),
            b: vec![T::zero(); dims.hidden],
            b_out: vec![T::zero(); dims.output],
            d_gain: shape_grad.clone(),
            d_saturation: shape_grad,
        }
    }

    /// Tensors in [`TENSOR_NAMES`] order, mirroring [`RnnModel::tensors_mut`].
    pub fn tensors(&self) -> Vec<(&'static str, &[T])> {
        let mut out = vec![
            ("w_rec", self.w_rec.as_slice()),
            ("w_in", self.w_in.as_slice()),
            ("w_out", self.w_out.as_slice()),
            ("b", self.b.as_slice()),
            ("b_out", self.b_out.as_slice()),
        ];
        if let (Some(g), Some(s)) = (&self.d_gain, &self.d_saturation) {
            out.push(("gain", g.as_slice()));
            out.push(("saturation", s.as_slice()));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [T])> {
        let mut out = vec![
            ("w_rec", self.w_rec.as_mut_slice()),
            ("w_in", self.w_in.as_mut_slice()),
            ("w_out", self.w_out.as_mut_slice()),
            ("b", self.b.as_mut_slice()),
            ("b_out", self.b_out.as_mut_slice()),
        ];
        if let (Some(g), Some(s)) = (&mut self.d_gain, &mut self.d_saturation) {
            out.push(("gain", g.as_mut_slice()));
            out.push(("saturation", s.as_mut_slice()));
        }
        out
    }

    pub fn global_norm(&self) -> T {
        self.tensors().iter().flat_map(|(_, t)| t.iter()).map(|&v| v * v).sum::<T>().sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`. Returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: T) -> T {
        let norm = self.global_norm();
        if norm > max_norm && norm > T::zero() {
            let k = max_norm / norm;
            for (_, t) in self.tensors_mut() {
                for v in t.iter_mut() {
                    *v *= k;
                }
            }
        }
        norm
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}
