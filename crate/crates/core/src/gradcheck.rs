//! Central finite-difference check of the analytic BPTT gradient.

use crate::activation::{Scenario, ShapeParams};
use crate::linalg::Matrix;
use crate::rng::RngStream;
use crate::rnn::{Dims, RnnError, RnnModel};
use crate::scalar::Scalar;
use crate::tasks::{BatchMeta, TaskBatch, TaskKind};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Largest relative error over all coordinates.
    pub max_rel_err: f64,
    /// Tensor name and flat index of the worst coordinate.
    pub worst: (&'static str, usize),
    pub coordinates: usize,
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Five-point central difference `f'(x)` with step `h`; truncation error is
/// `O(h^4)`.
pub fn diff5(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x - 2.0 * h) - 8.0 * f(x - h) + 8.0 * f(x + h) - f(x + 2.0 * h)) / (12.0 * h)
}

/// Compares every gradient coordinate (shape parameters included) with a
/// central difference of step `eps`.
pub fn check_gradients(model: &RnnModel<f64>, batch: &TaskBatch<f64>, eps: f64, floor: f64) -> Result<GradCheck, RnnError> {
    let (_, grads) = model.loss_and_grads(batch)?;
    let analytic: Vec<(&'static str, Vec<f64>)> = grads.tensors().into_iter().map(|(n, t)| (n, t.to_vec())).collect();
    let mut probe = model.clone();
    let mut report = GradCheck { max_rel_err: 0.0, worst: ("", 0), coordinates: 0 };
    for (k, (name, values)) in analytic.iter().enumerate() {
        for (i, &a) in values.iter().enumerate() {
            let original = probe.tensors_mut()[k].data[i];
            probe.tensors_mut()[k].data[i] = original + eps;
            let up = probe.evaluate(batch, None)?.loss;
            probe.tensors_mut()[k].data[i] = original - eps;
            let down = probe.evaluate(batch, None)?.loss;
            probe.tensors_mut()[k].data[i] = original;
            let fd = (up - down) / (2.0 * eps);
            let e = rel_err(a, fd, floor);
            report.coordinates += 1;
            if e > report.max_rel_err || report.worst.0.is_empty() {
                report.max_rel_err = e;
                report.worst = (name, i);
            }
        }
    }
    Ok(report)
}

/// Random model and masked batch for gradient checks: Gaussian weights,
/// gains in `[0.5, 3]`, saturations in `[-0.5, 1.5]`.
pub fn random_problem<T: Scalar>(
    seed: u64,
    scenario: Scenario,
    dims: Dims,
    steps: usize,
    batch: usize,
) -> (RnnModel<T>, TaskBatch<T>) {
    let mut rng = RngStream::new(seed, 0);
    let n = dims.hidden;
    let shape = match scenario {
        Scenario::Heterogeneous => ShapeParams::heterogeneous(
            (0..n).map(|_| rng.uniform_in(0.5, 3.0)).collect(),
            (0..n).map(|_| rng.uniform_in(-0.5, 1.5)).collect(),
        ),
        other => ShapeParams::shared(rng.uniform_in(0.5, 3.0), rng.uniform_in(-0.5, 1.5), other),
    }
    .expect("valid shape");
    let mut normal = |rows: usize, cols: usize, scale: f64| {
        Matrix::from_fn(rows, cols, |_, _| rng.normal::<T>() * T::lit(scale))
    };
    let w_rec = normal(n, n, 0.6);
    let w_in = normal(n, dims.input, 0.8);
    let w_out = normal(dims.output, n, 0.8);
    let b = normal(1, n, 0.3).into_vec();
    let b_out = normal(1, dims.output, 0.3).into_vec();
    let model = RnnModel { w_rec, w_in, w_out, b, b_out, shape };

    let inputs = (0..steps).map(|_| Matrix::from_fn(batch, dims.input, |_, _| rng.normal::<T>())).collect();
    let targets = (0..steps).map(|_| (0..batch).map(|_| rng.below(dims.output)).collect()).collect();
    let mut mask: Vec<Vec<bool>> = (0..steps).map(|_| (0..batch).map(|_| rng.uniform() < 0.5).collect()).collect();
    mask[steps - 1][0] = true;
    let meta = BatchMeta { task: TaskKind::Copy, classes: dims.output, input_width: dims.input };
    (model, TaskBatch { inputs, targets, mask, meta })
}
