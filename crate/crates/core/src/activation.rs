//! The adaptive activation family
//!
//! ```text
//! gamma(x; n, s) = (1 - s) * softplus(n x) / n + s * sigmoid(n x)
//! ```
//!
//! `n` is the neuronal gain (response sharpness) and `s` the degree of
//! saturation. `s = 0` gives a rescaled softplus, `s = 1` a sigmoid; ReLU and
//! Heaviside are the `n -> inf` limits of those two branches and are not
//! special-cased. Gain must stay strictly positive, saturation is free.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

/// Smallest gain the optimiser is allowed to leave behind.
pub const GAIN_FLOOR: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ActivationError {
    #[error("gain must be strictly positive, got {0}")]
    NonPositiveGain(f64),
    #[error("NaN encountered in activation input")]
    NanInput,
    #[error("shape parameter length {got} does not match input length {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("invalid shape parameters: {0}")]
    InvalidShape(String),
}

/// How the shape parameters take part in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    /// One fixed `(n, s)` pair shared by all neurons.
    Static,
    /// One shared `(n, s)` pair, trained.
    Homogeneous,
    /// A trained `(n_i, s_i)` pair per neuron.
    Heterogeneous,
}

impl Scenario {
    pub fn is_adaptive(self) -> bool {
        !matches!(self, Scenario::Static)
    }

    pub fn tag(self) -> u8 {
        match self {
            Scenario::Static => 0,
            Scenario::Homogeneous => 1,
            Scenario::Heterogeneous => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Scenario::Static),
            1 => Some(Scenario::Homogeneous),
            2 => Some(Scenario::Heterogeneous),
            _ => None,
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scenario::Static => "static",
            Scenario::Homogeneous => "homogeneous",
            Scenario::Heterogeneous => "heterogeneous",
        })
    }
}

impl std::str::FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "static" => Ok(Scenario::Static),
            "homogeneous" | "homog" => Ok(Scenario::Homogeneous),
            "heterogeneous" | "heterog" => Ok(Scenario::Heterogeneous),
            other => Err(format!("unknown scenario `{other}`")),
        }
    }
}

/// Gain/saturation parameters of a layer.
///
/// Shared scenarios store a single pair; the heterogeneous scenario stores
/// one pair per neuron.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeParams<T> {
    gain: Vec<T>,
    saturation: Vec<T>,
    scenario: Scenario,
}

impl<T: Scalar> ShapeParams<T> {
    /// Shared pair for the static or homogeneous scenario.
    pub fn shared(gain: T, saturation: T, scenario: Scenario) -> Result<Self, ActivationError> {
        if scenario == Scenario::Heterogeneous {
            return Err(ActivationError::InvalidShape(
                "heterogeneous parameters need one pair per neuron".into(),
            ));
        }
        check_gain(gain)?;
        check_finite(saturation)?;
        Ok(Self { gain: vec![gain], saturation: vec![saturation], scenario })
    }

    pub fn fixed(gain: T, saturation: T) -> Result<Self, ActivationError> {
        Self::shared(gain, saturation, Scenario::Static)
    }

    pub fn homogeneous(gain: T, saturation: T) -> Result<Self, ActivationError> {
        Self::shared(gain, saturation, Scenario::Homogeneous)
    }

    pub fn heterogeneous(gain: Vec<T>, saturation: Vec<T>) -> Result<Self, ActivationError> {
        if gain.len() != saturation.len() {
            return Err(ActivationError::LengthMismatch { expected: gain.len(), got: saturation.len() });
        }
        if gain.is_empty() {
            return Err(ActivationError::InvalidShape("empty heterogeneous parameters".into()));
        }
        for &g in &gain {
            check_gain(g)?;
        }
        for &s in &saturation {
            check_finite(s)?;
        }
        Ok(Self { gain, saturation, scenario: Scenario::Heterogeneous })
    }

    /// Per-neuron parameters all initialised to the same pair.
    pub fn heterogeneous_uniform(size: usize, gain: T, saturation: T) -> Result<Self, ActivationError> {
        Self::heterogeneous(vec![gain; size], vec![saturation; size])
    }

    /// Builds parameters for `scenario` on a layer of `size` neurons.
    pub fn for_scenario(scenario: Scenario, size: usize, gain: T, saturation: T) -> Result<Self, ActivationError> {
        match scenario {
            Scenario::Heterogeneous => Self::heterogeneous_uniform(size, gain, saturation),
            other => Self::shared(gain, saturation, other),
        }
    }

    pub fn scenario(&self) -> Scenario {
        self.scenario
    }

    pub fn is_shared(&self) -> bool {
        self.scenario != Scenario::Heterogeneous
    }

    /// Number of stored pairs: 1 for shared parameters.
    pub fn len(&self) -> usize {
        self.gain.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gain.is_empty()
    }

    pub fn gain(&self) -> &[T] {
        &self.gain
    }

    pub fn saturation(&self) -> &[T] {
        &self.saturation
    }

    #[inline]
    pub fn gain_at(&self, neuron: usize) -> T {
        if self.is_shared() {
            self.gain[0]
        } else {
            self.gain[neuron]
        }
    }

    #[inline]
    pub fn saturation_at(&self, neuron: usize) -> T {
        if self.is_shared() {
            self.saturation[0]
        } else {
            self.saturation[neuron]
        }
    }

    /// Mutable views, used by optimisers. Callers must restore the gain floor.
    pub fn params_mut(&mut self) -> (&mut [T], &mut [T]) {
        (&mut self.gain, &mut self.saturation)
    }

    /// Raises every gain below `floor` to `floor`.
    pub fn clamp_gain(&mut self, floor: T) {
        for g in &mut self.gain {
            if *g < floor {
                *g = floor;
            }
        }
    }

    /// Checks that the parameters fit a layer of `size` neurons.
    pub fn check_layer(&self, size: usize) -> Result<(), ActivationError> {
        if !self.is_shared() && self.gain.len() != size {
            return Err(ActivationError::LengthMismatch { expected: size, got: self.gain.len() });
        }
        Ok(())
    }

    /// Same values re-tagged with another scenario. Heterogeneous to shared
    /// requires all pairs to be equal.
    pub fn with_scenario(&self, scenario: Scenario, size: usize) -> Result<Self, ActivationError> {
        match (self.is_shared(), scenario) {
            (true, Scenario::Heterogeneous) => Self::heterogeneous_uniform(size, self.gain[0], self.saturation[0]),
            (true, s) => Self::shared(self.gain[0], self.saturation[0], s),
            (false, Scenario::Heterogeneous) => Ok(self.clone()),
            (false, s) => {
                let (g, sat) = (self.gain[0], self.saturation[0]);
                if self.gain.iter().any(|&v| v != g) || self.saturation.iter().any(|&v| v != sat) {
                    return Err(ActivationError::InvalidShape(
                        "per-neuron parameters differ and cannot be tied".into(),
                    ));
                }
                Self::shared(g, sat, s)
            }
        }
    }
}

fn check_gain<T: Scalar>(n: T) -> Result<(), ActivationError> {
    if n.is_nan() {
        return Err(ActivationError::NanInput);
    }
    if n <= T::zero() || !n.is_finite() {
        return Err(ActivationError::NonPositiveGain(n.as_f64()));
    }
    Ok(())
}

fn check_finite<T: Scalar>(v: T) -> Result<(), ActivationError> {
    if v.is_nan() {
        return Err(ActivationError::NanInput);
    }
    if !v.is_finite() {
        return Err(ActivationError::InvalidShape(format!("non-finite saturation {v}")));
    }
    Ok(())
}

fn check_args<T: Scalar>(x: T, n: T, s: T) -> Result<(), ActivationError> {
    if x.is_nan() || s.is_nan() {
        return Err(ActivationError::NanInput);
    }
    check_gain(n)
}

/// `ln(1 + e^z)` without overflow.
#[inline]
pub fn softplus<T: Scalar>(z: T) -> T {
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

/// Logistic sigmoid, evaluated on the branch that cannot overflow.
#[inline]
pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Value and the three partial derivatives at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Terms<T> {
    pub value: T,
    pub dx: T,
    pub dn: T,
    pub ds: T,
}

/// Unchecked evaluation of the value and all partials. Callers validate
/// `n > 0` once per layer.
#[inline]
pub fn terms<T: Scalar>(x: T, n: T, s: T) -> Terms<T> {
    let z = n * x;
    let one = T::one();
    // one exp and one log1p shared by sigmoid, softplus and their products
    let e = (-z.abs()).exp();
    let inv = one / (one + e);
    let (sig, sig_neg) = if z >= T::zero() { (inv, e * inv) } else { (e * inv, inv) };
    let l = e.ln_1p();
    let sp_over_n = (z.max(T::zero()) + l) / n;
    let slope = sig * sig_neg;
    let zs_minus_sp = if z >= T::zero() { -(z * sig_neg + l) } else { z * sig - l };
    Terms {
        value: (one - s) * sp_over_n + s * sig,
        dx: (one - s) * sig + n * s * slope,
        dn: (one - s) * zs_minus_sp / (n * n) + s * x * slope,
        ds: sig - sp_over_n,
    }
}

#[inline]
pub(crate) fn value_unchecked<T: Scalar>(x: T, n: T, s: T) -> T {
    let z = n * x;
    (T::one() - s) * softplus(z) / n + s * sigmoid(z)
}

#[inline]
pub(crate) fn dx_unchecked<T: Scalar>(x: T, n: T, s: T) -> T {
    let z = n * x;
    let sig = sigmoid(z);
    (T::one() - s) * sig + n * s * sig * sigmoid(-z)
}

/// `gamma(x; n, s)`.
pub fn gamma<T: Scalar>(x: T, n: T, s: T) -> Result<T, ActivationError> {
    check_args(x, n, s)?;
    Ok(value_unchecked(x, n, s))
}

/// Partial derivative in the input `x`.
pub fn gamma_dx<T: Scalar>(x: T, n: T, s: T) -> Result<T, ActivationError> {
    check_args(x, n, s)?;
    Ok(dx_unchecked(x, n, s))
}

/// Partial derivative in the gain `n`.
pub fn gamma_dn<T: Scalar>(x: T, n: T, s: T) -> Result<T, ActivationError> {
    check_args(x, n, s)?;
    Ok(terms(x, n, s).dn)
}

/// Partial derivative in the saturation `s`. Independent of `s`.
pub fn gamma_ds<T: Scalar>(x: T, n: T, s: T) -> Result<T, ActivationError> {
    check_args(x, n, s)?;
    Ok(terms(x, n, s).ds)
}

/// Elementwise activation of a vector.
pub fn gamma_vec<T: Scalar>(x: &[T], params: &ShapeParams<T>) -> Result<Vec<T>, ActivationError> {
    params.check_layer(x.len())?;
    x.iter()
        .enumerate()
        .map(|(i, &xi)| gamma(xi, params.gain_at(i), params.saturation_at(i)))
        .collect()
}

/// Elementwise values with the `dx`, `dn` and `ds` vectors needed by BPTT.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTerms<T> {
    pub value: Vec<T>,
    pub dx: Vec<T>,
    pub dn: Vec<T>,
    pub ds: Vec<T>,
}

pub fn gamma_terms<T: Scalar>(x: &[T], params: &ShapeParams<T>) -> Result<ActivationTerms<T>, ActivationError> {
    params.check_layer(x.len())?;
    let mut out = ActivationTerms {
        value: Vec::with_capacity(x.len()),
        dx: Vec::with_capacity(x.len()),
        dn: Vec::with_capacity(x.len()),
        ds: Vec::with_capacity(x.len()),
    };
    for (i, &xi) in x.iter().enumerate() {
        check_args(xi, params.gain_at(i), params.saturation_at(i))?;
        let t = terms(xi, params.gain_at(i), params.saturation_at(i));
        out.value.push(t.value);
        out.dx.push(t.dx);
        out.dn.push(t.dn);
        out.ds.push(t.ds);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn reference_values() {
        assert_eq!(gamma(0.0, 1.0, 1.0).unwrap(), 0.5);
        assert!((gamma(0.0, 1.0, 0.0).unwrap() - LN2).abs() < 1e-15);
        // 0.5 * ln2 / 2 + 0.5 * 0.5
        assert!((gamma(0.0f64, 2.0, 0.5).unwrap() - 0.423_286_795_139_986_2).abs() < 1e-12);
        assert!((gamma(10.0f64, 16.0, 0.0).unwrap() - 10.0).abs() < 1e-6);
    }

    #[test]
    fn derivative_reference_values() {
        assert_eq!(gamma_dx(0.0, 1.0, 0.0).unwrap(), 0.5);
        assert_eq!(gamma_dx(0.0, 1.0, 1.0).unwrap(), 0.25);
        assert_eq!(gamma_dn(0.0, 2.0, 1.0).unwrap(), 0.0);
        assert!((gamma_dn(0.0, 1.0, 0.0).unwrap() + LN2).abs() < 1e-15);
        for s in [-1.5, 0.0, 0.3, 1.0, 2.0] {
            assert!((gamma_ds(0.0, 1.0, s).unwrap() - (0.5 - LN2)).abs() < 1e-15);
        }
        assert!((gamma_ds(50.0f64, 1.0, 0.0).unwrap() + 49.0).abs() < 1e-6);
    }

    #[test]
    fn finite_at_extreme_arguments() {
        for &(x, n) in &[(700.0, 1.0), (-700.0, 1.0), (35.0, 20.0), (-35.0, 20.0), (1e4, 0.07), (-1e4, 0.07)] {
            for s in [-2.0, 0.0, 0.5, 1.0, 2.0] {
                let t: Terms<f64> = terms(x, n, s);
                assert!(t.value.is_finite() && t.dx.is_finite() && t.dn.is_finite() && t.ds.is_finite());
            }
        }
    }

    #[test]
    fn domain_errors() {
        assert_eq!(gamma(1.0, 0.0, 0.5), Err(ActivationError::NonPositiveGain(0.0)));
        assert_eq!(gamma_dn(1.0, -1.0, 0.5), Err(ActivationError::NonPositiveGain(-1.0)));
        assert_eq!(gamma(f64::NAN, 1.0, 0.5), Err(ActivationError::NanInput));
        assert_eq!(gamma_ds(0.0, 1.0, f64::NAN), Err(ActivationError::NanInput));
    }

    #[test]
    fn vector_forms() {
        let het = ShapeParams::heterogeneous(vec![1.0, 1.0], vec![0.0, 1.0]).unwrap();
        let v = gamma_vec(&[0.0, 0.0], &het).unwrap();
        assert!((v[0] - LN2).abs() < 1e-15 && v[1] == 0.5);

        let shared = ShapeParams::fixed(1.0, 0.0).unwrap();
        let v: Vec<f64> = gamma_vec(&[0.0, 10.0], &shared).unwrap();
        assert!((v[0] - 0.693_147_180_559_945_3).abs() < 1e-12);
        assert!((v[1] - 10.000_045_398_899_218).abs() < 1e-9);

        assert!(gamma_vec::<f64>(&[], &shared).unwrap().is_empty());
        assert_eq!(
            gamma_vec(&[0.0, 1.0, 2.0], &het),
            Err(ActivationError::LengthMismatch { expected: 3, got: 2 })
        );
    }

    #[test]
    fn terms_agree_with_scalar_functions() {
        let p = ShapeParams::heterogeneous(vec![0.5, 3.0, 12.0], vec![-0.5, 0.4, 1.3]).unwrap();
        let x = [0.3, -1.2, 0.05];
        let t = gamma_terms(&x, &p).unwrap();
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-15 * (1.0 + b.abs());
        for i in 0..3 {
            let (n, s) = (p.gain_at(i), p.saturation_at(i));
            assert!(close(t.value[i], gamma(x[i], n, s).unwrap()));
            assert!(close(t.dx[i], gamma_dx(x[i], n, s).unwrap()));
            assert!(close(t.dn[i], gamma_dn(x[i], n, s).unwrap()));
            assert!(close(t.ds[i], gamma_ds(x[i], n, s).unwrap()));
        }
    }

    #[test]
    fn shape_params_validation() {
        assert!(ShapeParams::fixed(0.0, 0.0).is_err());
        assert!(ShapeParams::<f64>::heterogeneous(vec![], vec![]).is_err());
        assert!(ShapeParams::shared(1.0, 0.0, Scenario::Heterogeneous).is_err());
        // saturation outside [0, 1] is legal
        assert!(ShapeParams::homogeneous(2.0, -3.0).is_ok());

        let mut p = ShapeParams::heterogeneous(vec![1.0, 0.001], vec![0.0, 0.0]).unwrap();
        p.clamp_gain(GAIN_FLOOR);
        assert_eq!(p.gain(), &[1.0, GAIN_FLOOR]);

        let tied = ShapeParams::heterogeneous_uniform(4, 2.0, 0.3).unwrap();
        let homog = tied.with_scenario(Scenario::Homogeneous, 4).unwrap();
        assert_eq!(homog.gain(), &[2.0]);
        assert!(p.with_scenario(Scenario::Homogeneous, 2).is_err());
    }

    #[test]
    fn f32_evaluation() {
        let v: f32 = gamma(0.0f32, 1.0, 0.0).unwrap();
        assert!((v - std::f32::consts::LN_2).abs() < 1e-7);
        assert!(terms(80.0f32, 10.0, 0.5).value.is_finite());
    }
}
