//! Binary checkpoints.
//!
//! Layout (all integers and reals little-endian, reals stored as f64):
//!
//! ```text
//! magic "GRNNCKPT" | version u32 | scenario u8
//! input u64 | hidden u64 | output u64 | epoch u64 | iteration u64
//! seed count u32, then per seed: name (u16 length + UTF-8), seed u64, stream u64, word position u128
//! gain (u64 length + f64s) | saturation (u64 length + f64s)
//! w_rec | w_in | w_out | b | b_out          (f64s, row-major, lengths implied by dims)
//! adam flag u8; if 1: step u64, lr, beta1, beta2, eps, tensor count u32,
//!     per tensor: name, length u64, first moments, second moments
//! config (u64 length + UTF-8 JSON)
//! ```

use std::path::Path;

use thiserror::Error;

use crate::activation::{Scenario, ShapeParams};
use crate::linalg::Matrix;
use crate::optim::{AdamConfig, AdamState};
use crate::rnn::{RnnModel, TENSOR_NAMES};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"GRNNCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint version {0} is not supported (expected {VERSION})")]
    UnsupportedVersion(u32),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("invalid checkpoint: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// A named RNG stream and how far it has advanced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedRecord {
    pub name: String,
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: RnnModel<T>,
    pub epoch: u64,
    pub iteration: u64,
    pub seeds: Vec<SeedRecord>,
    pub adam: Option<AdamState<T>>,
    /// Run configuration as JSON, empty if unknown.
    pub config: String,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn reals<T: Scalar>(&mut self, v: &[T]) {
        for x in v {
            self.f64(x.as_f64());
        }
    }
    fn name(&mut self, s: &str) {
        self.u16(s.len() as u16);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.at.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let out = self.bytes.get(self.at..end).ok_or(CheckpointError::Truncated)?;
        self.at = end;
        Ok(out)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn len(&mut self) -> Result<usize, CheckpointError> {
        let n = self.u64()?;
        // every length counts at least one byte of payload
        if n > (self.bytes.len() - self.at) as u64 {
            return Err(CheckpointError::Truncated);
        }
        Ok(n as usize)
    }
    fn u128(&mut self) -> Result<u128, CheckpointError> {
        Ok(u128::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn reals<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>, CheckpointError> {
        if n.saturating_mul(8) > self.bytes.len() - self.at {
            return Err(CheckpointError::Truncated);
        }
        (0..n).map(|_| self.f64().map(T::lit)).collect()
    }
    fn string(&mut self, n: usize) -> Result<String, CheckpointError> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Invalid("string is not UTF-8".into()))
    }
    fn name(&mut self) -> Result<String, CheckpointError> {
        let n = self.u16()? as usize;
        self.string(n)
    }
}

fn dim(v: u64) -> Result<usize, CheckpointError> {
    usize::try_from(v).ok().filter(|&d| d > 0 && d < 1 << 32).ok_or_else(|| CheckpointError::Invalid(format!("dimension {v}")))
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(model: RnnModel<T>) -> Self {
        Self { model, epoch: 0, iteration: 0, seeds: Vec::new(), adam: None, config: String::new() }
    }

    pub fn seed(&self, name: &str) -> Option<&SeedRecord> {
        self.seeds.iter().find(|s| s.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        let m = &self.model;
        let dims = m.dims();
        w.u8(m.scenario().tag());
        for v in [dims.input, dims.hidden, dims.output] {
            w.u64(v as u64);
        }
        w.u64(self.epoch);
        w.u64(self.iteration);
        w.u32(self.seeds.len() as u32);
        for s in &self.seeds {
            w.name(&s.name);
            w.u64(s.seed);
            w.u64(s.stream);
            w.u128(s.word_pos);
        }
        for p in [m.shape.gain(), m.shape.saturation()] {
            w.u64(p.len() as u64);
            w.reals(p);
        }
        w.reals(m.w_rec.as_slice());
        w.reals(m.w_in.as_slice());
        w.reals(m.w_out.as_slice());
        w.reals(&m.b);
        w.reals(&m.b_out);
        match &self.adam {
            None => w.u8(0),
            Some(a) => {
                w.u8(1);
                w.u64(a.step);
                for v in [a.config.lr, a.config.beta1, a.config.beta2, a.config.eps] {
                    w.f64(v);
                }
                w.u32(a.names.len() as u32);
                for (i, name) in a.names.iter().enumerate() {
                    w.name(name);
                    w.u64(a.m[i].len() as u64);
                    w.reals(&a.m[i]);
                    w.reals(&a.v[i]);
                }
            }
        }
        w.u64(self.config.len() as u64);
        w.0.extend_from_slice(self.config.as_bytes());
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(8).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let tag = r.u8()?;
        let scenario = Scenario::from_tag(tag).ok_or_else(|| CheckpointError::Invalid(format!("scenario tag {tag}")))?;
        let (input, hidden, output) = (dim(r.u64()?)?, dim(r.u64()?)?, dim(r.u64()?)?);
        let epoch = r.u64()?;
        let iteration = r.u64()?;
        let n_seeds = r.u32()?;
        let mut seeds = Vec::new();
        for _ in 0..n_seeds {
            seeds.push(SeedRecord { name: r.name()?, seed: r.u64()?, stream: r.u64()?, word_pos: r.u128()? });
        }
        let n_gain = r.len()?;
        let gain: Vec<T> = r.reals(n_gain)?;
        let n_sat = r.len()?;
        let saturation: Vec<T> = r.reals(n_sat)?;
        let shape = match scenario {
            Scenario::Heterogeneous => ShapeParams::heterogeneous(gain, saturation),
            other if gain.len() == 1 && saturation.len() == 1 => ShapeParams::shared(gain[0], saturation[0], other),
            _ => return Err(CheckpointError::Invalid("shared scenario with per-neuron parameters".into())),
        }
        .map_err(|e| CheckpointError::Invalid(e.to_string()))?;

        let mat = |r: &mut Reader, rows: usize, cols: usize| -> Result<Matrix<T>, CheckpointError> {
            let data = r.reals(rows * cols)?;
            Ok(Matrix::from_vec(rows, cols, data).expect("sized"))
        };
        let w_rec = mat(&mut r, hidden, hidden)?;
        let w_in = mat(&mut r, hidden, input)?;
        let w_out = mat(&mut r, output, hidden)?;
        let b = r.reals(hidden)?;
        let b_out = r.reals(output)?;
        let model = RnnModel { w_rec, w_in, w_out, b, b_out, shape };
        model.validate().map_err(|e| CheckpointError::Invalid(e.to_string()))?;

        let adam = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let config = AdamConfig { lr: r.f64()?, beta1: r.f64()?, beta2: r.f64()?, eps: r.f64()? };
                let count = r.u32()? as usize;
                if count > TENSOR_NAMES.len() {
                    return Err(CheckpointError::Invalid(format!("{count} optimiser tensors")));
                }
                let (mut names, mut m, mut v) = (Vec::new(), Vec::new(), Vec::new());
                for _ in 0..count {
                    let name = r.name()?;
                    let known = TENSOR_NAMES
                        .iter()
                        .find(|n| **n == name)
                        .ok_or_else(|| CheckpointError::Invalid(format!("unknown tensor `{name}`")))?;
                    let len = r.len()?;
                    names.push(*known);
                    m.push(r.reals(len)?);
                    v.push(r.reals(len)?);
                }
                Some(AdamState { config, step, names, m, v })
            }
            f => return Err(CheckpointError::Invalid(format!("optimiser flag {f}"))),
        };
        let n_cfg = r.len()?;
        let config = r.string(n_cfg)?;
        if r.at != bytes.len() {
            return Err(CheckpointError::Invalid(format!("{} trailing bytes", bytes.len() - r.at)));
        }
        Ok(Self { model, epoch, iteration, seeds, adam, config })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use crate::rnn::{Dims, InitConfig};

    fn sample(scenario: Scenario) -> Checkpoint<f64> {
        let dims = Dims { input: 3, hidden: 4, output: 2 };
        let shape = ShapeParams::for_scenario(scenario, 4, 1.5, 0.25).unwrap();
        let mut model = RnnModel::init(dims, shape, &InitConfig::default(), &mut RngStream::new(1, 1)).unwrap();
        let mut adam = AdamState::new(AdamConfig::default(), &mut model).unwrap();
        adam.step = 17;
        adam.m[0][3] = 0.125;
        adam.v[2][1] = 3.5e-9;
        Checkpoint {
            model,
            epoch: 3,
            iteration: 1234,
            seeds: vec![SeedRecord { name: "data".into(), seed: 9, stream: 2, word_pos: 1 << 70 }],
            adam: Some(adam),
            config: "{\"task\":\"copy\"}".into(),
        }
    }

    #[test]
    fn round_trip_all_scenarios() {
        for sc in [Scenario::Static, Scenario::Homogeneous, Scenario::Heterogeneous] {
            let c = sample(sc);
            let bytes = c.to_bytes();
            assert_eq!(Checkpoint::<f64>::from_bytes(&bytes).unwrap(), c);
        }
    }

    #[test]
    fn f32_round_trip() {
        let dims = Dims { input: 2, hidden: 3, output: 2 };
        let m = RnnModel::<f32>::init(dims, ShapeParams::fixed(1.0, 0.0).unwrap(), &InitConfig::default(), &mut RngStream::new(0, 1)).unwrap();
        let c = Checkpoint::new(m);
        assert_eq!(Checkpoint::<f32>::from_bytes(&c.to_bytes()).unwrap(), c);
    }

    #[test]
    fn header_layout() {
        let bytes = sample(Scenario::Heterogeneous).to_bytes();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), VERSION);
        assert_eq!(bytes[12], 2);
        assert_eq!(u64::from_le_bytes(bytes[21..29].try_into().unwrap()), 4);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = sample(Scenario::Static).to_bytes();
        assert!(matches!(Checkpoint::<f64>::from_bytes(b"nope"), Err(CheckpointError::BadMagic)));
        let mut v = bytes.clone();
        v[8] = 9;
        assert!(matches!(Checkpoint::<f64>::from_bytes(&v), Err(CheckpointError::UnsupportedVersion(9))));
        for cut in [13, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(Checkpoint::<f64>::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::<f64>::from_bytes(&extra).is_err());
    }
}
