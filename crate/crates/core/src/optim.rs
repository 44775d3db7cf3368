//! Adam with scenario gating, and a reduce-on-plateau learning-rate schedule.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::activation::GAIN_FLOOR;
use crate::rnn::{Gradients, ParamGroup, RnnModel};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimError {
    #[error("gradient for `{tensor}` is not finite; step refused")]
    NonFiniteGradient { tensor: &'static str },
    #[error("shape mismatch for `{tensor}`: parameter has {expected} entries, {what} has {got}")]
    ShapeMismatch { tensor: &'static str, what: &'static str, expected: usize, got: usize },
    #[error("tensor lists differ: model {model:?}, other {other:?}")]
    TensorSet { model: Vec<&'static str>, other: Vec<&'static str> },
    #[error("invalid optimiser setting: {0}")]
    InvalidConfig(String),
    #[error("monitored metric is NaN")]
    NanMetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(OptimError::InvalidConfig(format!("{self:?}")))
        }
    }
}

/// Which parameter groups an update may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trainable {
    pub weights: bool,
    pub shape: bool,
}

impl Trainable {
    /// Weights always; shape parameters only in adaptive scenarios.
    pub fn for_model<T: Scalar>(model: &RnnModel<T>) -> Self {
        Self { weights: true, shape: model.scenario().is_adaptive() }
    }

    /// Shape parameters only, weights and biases frozen.
    pub fn shape_only() -> Self {
        Self { weights: false, shape: true }
    }

    fn allows(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Weights => self.weights,
            ParamGroup::Shape => self.shape,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub names: Vec<&'static str>,
    /// First moments, one vector per tensor in `names` order.
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, model: &mut RnnModel<T>) -> Result<Self, OptimError> {
        config.validate()?;
        let tensors = model.tensors_mut();
        Ok(Self {
            config,
            step: 0,
            names: tensors.iter().map(|t| t.name).collect(),
            m: tensors.iter().map(|t| vec![T::zero(); t.data.len()]).collect(),
            v: tensors.iter().map(|t| vec![T::zero(); t.data.len()]).collect(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn is_finite(&self) -> bool {
        self.m.iter().chain(&self.v).flatten().all(|x| x.is_finite())
    }
}

/// One bias-corrected Adam step on every tensor `trainable` allows, followed
/// by the gain clamp. Nothing is modified when an error is returned.
pub fn adam_step<T: Scalar>(
    model: &mut RnnModel<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    trainable: Trainable,
) -> Result<(), OptimError> {
    let grad_tensors = grads.tensors();
    {
        let params = model.tensors_mut();
        let model_names: Vec<&'static str> = params.iter().map(|t| t.name).collect();
        let grad_names: Vec<&'static str> = grad_tensors.iter().map(|t| t.0).collect();
        if model_names != grad_names {
            return Err(OptimError::TensorSet { model: model_names, other: grad_names });
        }
        if model_names != state.names {
            return Err(OptimError::TensorSet { model: model_names, other: state.names.clone() });
        }
        for (i, p) in params.iter().enumerate() {
            let (name, g) = grad_tensors[i];
            for (what, got) in [("gradient", g.len()), ("first moment", state.m[i].len()), ("second moment", state.v[i].len())] {
                if got != p.data.len() {
                    return Err(OptimError::ShapeMismatch { tensor: name, what, expected: p.data.len(), got });
                }
            }
            if trainable.allows(p.group) && !g.iter().all(|v| v.is_finite()) {
                return Err(OptimError::NonFiniteGradient { tensor: name });
            }
        }
    }

    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
    let corr1 = T::one() - T::lit(c.beta1.powi(t));
    let corr2 = T::one() - T::lit(c.beta2.powi(t));
    let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));

    for (i, p) in model.tensors_mut().into_iter().enumerate() {
        if !trainable.allows(p.group) {
            continue;
        }
        let g = grad_tensors[i].1;
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.data.len() {
            m[j] = b1 * m[j] + one_b1 * g[j];
            v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
            let m_hat = m[j] / corr1;
            let v_hat = v[j] / corr2;
            p.data[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    if trainable.shape {
        model.shape.clamp_gain(T::lit(GAIN_FLOOR));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauConfig {
    pub patience: usize,
    pub factor: f64,
    /// Relative improvement needed to reset the patience counter.
    pub threshold: f64,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self { patience: 3, factor: 0.5, threshold: 1e-3, min_lr: 1e-7 }
    }
}

/// Multiplies the learning rate by `factor` once the monitored metric (lower
/// is better) has failed to improve for `patience` consecutive epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub config: PlateauConfig,
    pub lr: f64,
    pub best: Option<f64>,
    pub bad_epochs: usize,
    pub history: Vec<f64>,
}

impl PlateauScheduler {
    pub fn new(config: PlateauConfig, lr: f64) -> Result<Self, OptimError> {
        if !(config.factor > 0.0 && config.factor < 1.0) || config.min_lr < 0.0 || !(lr > 0.0) {
            return Err(OptimError::InvalidConfig(format!("plateau {config:?} with lr {lr}")));
        }
        Ok(Self { config, lr: lr.max(config.min_lr), best: None, bad_epochs: 0, history: Vec::new() })
    }

    /// Records one epoch's metric and returns the learning rate to use next.
    pub fn update(&mut self, metric: f64) -> Result<f64, OptimError> {
        if metric.is_nan() {
            return Err(OptimError::NanMetric);
        }
        self.history.push(metric);
        let improved = match self.best {
            None => true,
            Some(best) => metric < best - best.abs() * self.config.threshold,
        };
        if improved {
            self.best = Some(metric);
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.config.patience {
                self.lr = (self.lr * self.config.factor).max(self.config.min_lr);
                self.bad_epochs = 0;
            }
        }
        Ok(self.lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::{Scenario, ShapeParams};
    use crate::rnn::Dims;

    fn model(scenario: Scenario) -> RnnModel<f64> {
        let dims = Dims { input: 2, hidden: 3, output: 2 };
        let shape = ShapeParams::for_scenario(scenario, 3, 1.0, 0.5).unwrap();
        let mut m = RnnModel::zeros(dims, shape).unwrap();
        m.w_rec.as_mut_slice().iter_mut().enumerate().for_each(|(i, w)| *w = i as f64 * 0.1);
        m
    }

    fn constant_grads(m: &RnnModel<f64>, g: f64) -> Gradients<f64> {
        let mut grads = Gradients::zeros(m.dims(), &m.shape);
        for (_, t) in grads.tensors_mut() {
            t.iter_mut().for_each(|v| *v = g);
        }
        grads
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut m = model(Scenario::Heterogeneous);
        let before = m.clone();
        let mut st = AdamState::new(AdamConfig { lr: 1e-3, ..Default::default() }, &mut m).unwrap();
        let g = constant_grads(&m, 0.7);
        { let tr = Trainable::for_model(&m); adam_step(&mut m, &g, &mut st, tr) }.unwrap();
        for (a, b) in m.w_rec.as_slice().iter().zip(before.w_rec.as_slice()) {
            assert!((b - a - 1e-3).abs() < 1e-9);
        }
        assert!((before.shape.saturation()[0] - m.shape.saturation()[0] - 1e-3).abs() < 1e-9);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut m = model(Scenario::Homogeneous);
        let before = m.clone();
        let mut st = AdamState::new(AdamConfig::default(), &mut m).unwrap();
        { let (g, tr) = (constant_grads(&m, 0.0), Trainable::for_model(&m)); adam_step(&mut m, &g, &mut st, tr) }.unwrap();
        assert_eq!(m, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn static_shape_untouched() {
        let mut m = model(Scenario::Static);
        let shape = m.shape.clone();
        let mut st = AdamState::new(AdamConfig { lr: 0.1, ..Default::default() }, &mut m).unwrap();
        for _ in 0..10 {
            { let (g, tr) = (constant_grads(&m, 1.0), Trainable::for_model(&m)); adam_step(&mut m, &g, &mut st, tr) }.unwrap();
        }
        assert_eq!(m.shape, shape);
    }

    #[test]
    fn shape_only_freezes_weights_and_clamps_gain() {
        let mut m = model(Scenario::Heterogeneous);
        let before = m.clone();
        let mut st = AdamState::new(AdamConfig { lr: 0.5, ..Default::default() }, &mut m).unwrap();
        for _ in 0..10 {
            { let g = constant_grads(&m, 1.0); adam_step(&mut m, &g, &mut st, Trainable::shape_only()) }.unwrap();
        }
        assert_eq!(m.w_rec, before.w_rec);
        assert_eq!(m.b_out, before.b_out);
        assert!(m.shape.gain().iter().all(|&g| g == GAIN_FLOOR));
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let mut m = model(Scenario::Heterogeneous);
        let before = m.clone();
        let mut st = AdamState::new(AdamConfig::default(), &mut m).unwrap();
        let mut g = constant_grads(&m, 0.1);
        g.b[1] = f64::NAN;
        let err = { let tr = Trainable::for_model(&m); adam_step(&mut m, &g, &mut st, tr) }.unwrap_err();
        assert_eq!(err, OptimError::NonFiniteGradient { tensor: "b" });
        assert_eq!(m, before);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn mismatched_gradients_rejected() {
        let mut m = model(Scenario::Heterogeneous);
        let mut st = AdamState::new(AdamConfig::default(), &mut m).unwrap();
        let other = model(Scenario::Static);
        let g = constant_grads(&other, 0.1);
        assert!(matches!({ let tr = Trainable::for_model(&m); adam_step(&mut m, &g, &mut st, tr) }, Err(OptimError::TensorSet { .. })));
    }

    #[test]
    fn plateau_constant_metric() {
        let mut s = PlateauScheduler::new(PlateauConfig::default(), 1e-4).unwrap();
        let lrs: Vec<f64> = (0..4).map(|_| s.update(2.0).unwrap()).collect();
        assert_eq!(lrs[..3], [1e-4; 3]);
        assert!((lrs[3] - 5e-5).abs() < 1e-18);
    }

    #[test]
    fn plateau_decreasing_and_floor() {
        let mut s = PlateauScheduler::new(PlateauConfig::default(), 1e-3).unwrap();
        for k in 0..20 {
            assert_eq!(s.update(10.0 - k as f64).unwrap(), 1e-3);
        }
        let mut f = PlateauScheduler::new(PlateauConfig::default(), 1e-7).unwrap();
        for _ in 0..20 {
            assert_eq!(f.update(1.0).unwrap(), 1e-7);
        }
        assert_eq!(f.update(f64::NAN), Err(OptimError::NanMetric));
    }
}
