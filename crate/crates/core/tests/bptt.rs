use gamma_rnn::gradcheck::{check_gradients, random_problem};
use gamma_rnn::rnn::Dims;
use gamma_rnn::tasks::copy_batch;
use gamma_rnn::{CopyConfig, RngStream, RnnModel, Scenario, ShapeParams};

const DIMS: Dims = Dims { input: 3, hidden: 4, output: 3 };

#[test]
fn bptt_matches_finite_differences() {
    for scenario in [Scenario::Static, Scenario::Homogeneous, Scenario::Heterogeneous] {
        for seed in 0..20 {
            let (model, batch) = random_problem::<f64>(seed, scenario, DIMS, 5, 2);
            let report = check_gradients(&model, &batch, 1e-6, 1e-7).unwrap();
            assert!(report.max_rel_err < 1e-4, "{scenario} seed {seed}: {report:?}");
        }
    }
}

#[test]
fn homogeneous_gradient_is_sum_of_per_neuron() {
    for seed in 0..5 {
        let (model, batch) = random_problem::<f64>(seed, Scenario::Homogeneous, DIMS, 5, 3);
        let (n, s) = (model.shape.gain()[0], model.shape.saturation()[0]);
        let mut het = model.clone();
        het.shape = ShapeParams::heterogeneous_uniform(DIMS.hidden, n, s).unwrap();
        let (l1, g1) = model.loss_and_grads(&batch).unwrap();
        let (l2, g2) = het.loss_and_grads(&batch).unwrap();
        assert_eq!(l1, l2);
        let sum: f64 = g2.d_gain.unwrap().iter().sum();
        assert!((g1.d_gain.unwrap()[0] - sum).abs() < 1e-12);
        let sum: f64 = g2.d_saturation.unwrap().iter().sum();
        assert!((g1.d_saturation.unwrap()[0] - sum).abs() < 1e-12);
    }
}

#[test]
fn batch_forward_matches_single_sequence() {
    let (model, batch) = random_problem::<f64>(3, Scenario::Heterogeneous, DIMS, 6, 3);
    let trace = model.forward_batch(&batch, None, false).unwrap();
    for b in 0..3 {
        let single = model.forward(&batch.sequence(b), None).unwrap();
        for t in 0..6 {
            for j in 0..DIMS.hidden {
                let d = single.hidden_states[(t + 1, j)] - trace.hidden[t + 1][(b, j)];
                assert!(d.abs() < 1e-12);
            }
        }
    }
}

#[test]
fn f32_gradients_track_f64() {
    let (m64, b64) = random_problem::<f64>(8, Scenario::Heterogeneous, DIMS, 5, 2);
    let (m32, b32) = random_problem::<f32>(8, Scenario::Heterogeneous, DIMS, 5, 2);
    let (l64, g64) = m64.loss_and_grads(&b64).unwrap();
    let (l32, g32) = m32.loss_and_grads(&b32).unwrap();
    assert!((l64 - l32 as f64).abs() < 1e-4);
    for ((_, a), (_, b)) in g64.tensors().iter().zip(g32.tensors()) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - *y as f64).abs() < 1e-3 * (1.0 + x.abs()));
        }
    }
}

#[test]
fn copy_task_gradient_check() {
    let cfg = CopyConfig { alphabet: 3, payload: 2, delay: 2, batch_size: 2 };
    let batch = copy_batch::<f64>(&cfg, &mut RngStream::new(5, 2)).unwrap();
    let dims = Dims { input: cfg.input_width(), hidden: 4, output: cfg.classes() };
    let shape = ShapeParams::heterogeneous(vec![1.0, 2.0, 0.7, 4.0], vec![0.0, 0.3, 1.0, -0.2]).unwrap();
    let mut init = gamma_rnn::InitConfig::default();
    init.readout_std = 0.5;
    let model = RnnModel::init(dims, shape, &init, &mut RngStream::new(5, 1)).unwrap();
    let report = check_gradients(&model, &batch, 1e-6, 1e-7).unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}
