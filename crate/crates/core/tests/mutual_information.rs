use gamma_rnn::diagnostics::{mi_mixture, MiSample};
use gamma_rnn::RngStream;

fn gaussian_pairs(rho: f64, n: usize, seed: u64) -> (Vec<MiSample>, Vec<Vec<f64>>) {
    let mut rng = RngStream::new(seed, 0);
    let mut xs = Vec::with_capacity(n);
    let mut hs = Vec::with_capacity(n);
    for _ in 0..n {
        let a: f64 = rng.normal();
        let b: f64 = rng.normal();
        xs.push(MiSample::Continuous(vec![a]));
        hs.push(vec![rho * a + (1.0 - rho * rho).sqrt() * b]);
    }
    (xs, hs)
}

#[test]
fn correlated_gaussians_match_closed_form() {
    for rho in [0.5, 0.9] {
        let (xs, hs) = gaussian_pairs(rho, 5000, 11);
        let est = mi_mixture(&xs, &hs, 3).unwrap();
        let exact = -0.5 * (1.0 - rho * rho).ln();
        assert!((est.value - exact).abs() < 0.1, "rho {rho}: {} vs {exact}", est.value);
    }
}

#[test]
fn independent_variables_give_near_zero() {
    let (xs, hs) = gaussian_pairs(0.0, 5000, 12);
    let est = mi_mixture(&xs, &hs, 3).unwrap();
    assert!(est.raw.abs() < 0.05, "{}", est.raw);
}

#[test]
fn near_deterministic_binary_channel() {
    let mut rng = RngStream::new(13, 0);
    let mut xs = Vec::new();
    let mut hs = Vec::new();
    for _ in 0..5000 {
        let x = rng.below(2);
        let noise: f64 = rng.normal();
        xs.push(MiSample::Discrete(x as i64));
        hs.push(vec![x as f64 + 0.01 * noise]);
    }
    let est = mi_mixture(&xs, &hs, 3).unwrap();
    assert!((est.value - 2f64.ln()).abs() < 0.05, "{}", est.value);
}

#[test]
fn sample_order_does_not_matter() {
    let (xs, hs) = gaussian_pairs(0.7, 800, 14);
    let a = mi_mixture(&xs, &hs, 3).unwrap();
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    RngStream::new(1, 1).shuffle(&mut idx);
    let xs2: Vec<MiSample> = idx.iter().map(|&i| xs[i].clone()).collect();
    let hs2: Vec<Vec<f64>> = idx.iter().map(|&i| hs[i].clone()).collect();
    let b = mi_mixture(&xs2, &hs2, 3).unwrap();
    assert!((a.raw - b.raw).abs() < 1e-12);
}

#[test]
fn continuous_x_with_atoms() {
    // half the x mass sits on an atom at 0, h copies x with small noise
    let mut rng = RngStream::new(15, 0);
    let mut xs = Vec::new();
    let mut hs = Vec::new();
    for _ in 0..3000 {
        let x = if rng.uniform() < 0.5 { 0.0 } else { rng.normal::<f64>() };
        xs.push(MiSample::Continuous(vec![x]));
        hs.push(vec![x + 0.1 * rng.normal::<f64>()]);
    }
    let est = mi_mixture(&xs, &hs, 3).unwrap();
    assert!(est.value.is_finite() && est.value > 0.5, "{}", est.value);
}
