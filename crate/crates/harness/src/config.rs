//! Run configuration: JSON on disk, CLI flags on top.

use std::path::{Path, PathBuf};

use gamma_rnn::diagnostics::{JacobianNorm, MiConfig};
use gamma_rnn::tasks::DigitSource;
use gamma_rnn::{AdamConfig, GridSpec, InitConfig, PlateauConfig, Scenario};
use serde::{Deserialize, Serialize};

use crate::HarnessError;

/// Environment variable naming the default data directory.
pub const DATA_DIR_ENV: &str = "GAMMA_RNN_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskConfig {
    Copy {
        alphabet: usize,
        payload: usize,
        delay: usize,
        /// Fixed held-out sequences scored at every evaluation.
        eval_sequences: usize,
    },
    Digits {
        source: DigitSource,
        downscale: usize,
        /// `None` keeps raster order.
        permutation_seed: Option<u64>,
        test_fraction: f64,
        split_seed: u64,
    },
    CharLm {
        corpus: PathBuf,
        chunk: usize,
        train_fraction: f64,
        valid_fraction: f64,
    },
}

impl TaskConfig {
    pub fn name(&self) -> &'static str {
        match self {
            TaskConfig::Copy { .. } => "copy",
            TaskConfig::Digits { .. } => "digits",
            TaskConfig::CharLm { .. } => "char_lm",
        }
    }

    pub fn desk(name: &str) -> Result<Self, HarnessError> {
        Ok(match name {
            "copy" => TaskConfig::Copy { alphabet: 8, payload: 10, delay: 50, eval_sequences: 1000 },
            "digits" => TaskConfig::Digits {
                source: DigitSource::Bundled,
                downscale: 1,
                permutation_seed: Some(0),
                test_fraction: 0.2,
                split_seed: 0,
            },
            "char_lm" | "charlm" => TaskConfig::CharLm {
                corpus: PathBuf::from("corpus.txt"),
                chunk: 100,
                train_fraction: 0.9,
                valid_fraction: 0.05,
            },
            other => return Err(HarnessError::Config(format!("unknown task `{other}` (copy, digits, char_lm)"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskConfig,
    pub scenario: Scenario,
    /// Initial gain and saturation.
    pub gain: f64,
    pub saturation: f64,
    pub hidden: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Training iterations (copy task).
    pub iterations: usize,
    /// Iterations between evaluation rows (copy task).
    pub eval_every: usize,
    /// Passes over the training data (digits, character LM).
    pub epochs: usize,
    /// Reduce the learning rate on a validation plateau.
    pub scheduler: bool,
    pub plateau: PlateauConfig,
    pub adam: AdamSettings,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub precision: Precision,
    pub init: InitConfig,
    /// Compute a maximal Lyapunov exponent every this many rows.
    pub mle_every: Option<usize>,
    pub output_dir: Option<PathBuf>,
}

/// Adam settings other than the learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        let a = AdamConfig::default();
        Self { beta1: a.beta1, beta2: a.beta2, eps: a.eps }
    }
}

impl RunConfig {
    /// Laptop-sized defaults for a task.
    pub fn desk(task: &str) -> Result<Self, HarnessError> {
        let task = TaskConfig::desk(task)?;
        let (hidden, epochs, batch_size) = match task {
            TaskConfig::Copy { .. } => (128, 0, 64),
            TaskConfig::Digits { .. } => (128, 100, 16),
            TaskConfig::CharLm { .. } => (256, 20, 64),
        };
        let scheduler = matches!(task, TaskConfig::CharLm { .. });
        Ok(Self {
            task,
            scenario: Scenario::Static,
            gain: 1.0,
            saturation: 0.0,
            hidden,
            lr: 1e-4,
            batch_size,
            iterations: 20_000,
            eval_every: 500,
            epochs,
            scheduler,
            plateau: PlateauConfig::default(),
            adam: AdamSettings::default(),
            clip_norm: None,
            seed: 0,
            precision: Precision::F64,
            init: InitConfig::default(),
            mle_every: None,
            output_dir: None,
        })
    }

    /// Full-size settings: copy delay 200 for 100k iterations, 28x28
    /// permuted digits with 400 units for 100 epochs, 600-unit character LM
    /// for 100 epochs with the plateau schedule.
    pub fn paper(task: &str) -> Result<Self, HarnessError> {
        let mut c = Self::desk(task)?;
        match &mut c.task {
            TaskConfig::Copy { delay, .. } => {
                *delay = 200;
                c.hidden = 128;
                c.iterations = 100_000;
                c.eval_every = 1000;
            }
            TaskConfig::Digits { source, .. } => {
                let dir = std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data"));
                *source = DigitSource::Idx {
                    images: dir.join("train-images-idx3-ubyte"),
                    labels: dir.join("train-labels-idx1-ubyte"),
                };
                c.hidden = 400;
                c.epochs = 100;
                c.batch_size = 64;
            }
            TaskConfig::CharLm { .. } => {
                c.hidden = 600;
                c.epochs = 100;
                c.scheduler = true;
            }
        }
        Ok(c)
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.adam.beta1, beta2: self.adam.beta2, eps: self.adam.eps }
    }

    /// Checks everything that can be checked before any compute starts.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.hidden == 0 {
            return bad("hidden size must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be a finite positive number, got {}", self.lr));
        }
        if !(self.gain > 0.0 && self.gain.is_finite()) {
            return bad(format!("gain must be positive, got {}", self.gain));
        }
        if !self.saturation.is_finite() {
            return bad("saturation must be finite".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip norm must be positive, got {c}"));
            }
        }
        if self.mle_every == Some(0) {
            return bad("mle_every must be at least 1".into());
        }
        self.adam_config().validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.scheduler {
            gamma_rnn::PlateauScheduler::new(self.plateau, self.lr)
                .map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        match &self.task {
            TaskConfig::Copy { alphabet, payload, eval_sequences, .. } => {
                if *alphabet < 2 || *payload < 1 {
                    return bad(format!("copy task needs alphabet >= 2 and payload >= 1, got {alphabet}, {payload}"));
                }
                if *eval_sequences == 0 || self.eval_every == 0 {
                    return bad("copy task needs eval_sequences >= 1 and eval_every >= 1".into());
                }
            }
            TaskConfig::Digits { downscale, test_fraction, .. } => {
                if *downscale == 0 {
                    return bad("downscale factor must be at least 1".into());
                }
                if !(*test_fraction > 0.0 && *test_fraction < 1.0) {
                    return bad(format!("test fraction must lie in (0, 1), got {test_fraction}"));
                }
            }
            TaskConfig::CharLm { chunk, train_fraction, valid_fraction, .. } => {
                if *chunk < 2 {
                    return bad(format!("chunk length must be >= 2, got {chunk}"));
                }
                if !(*train_fraction > 0.0 && *valid_fraction > 0.0 && train_fraction + valid_fraction < 1.0) {
                    return bad("character LM fractions must leave nonempty train, valid and test parts".into());
                }
            }
        }
        Ok(())
    }

    /// Canonical JSON: fixed field order, pretty-printed, trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serialises");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Resolves relative data paths that do not exist against `dir`
    /// (by default `$GAMMA_RNN_DATA_DIR`).
    pub fn resolve_data_paths(&mut self, dir: Option<&Path>) {
        let env = std::env::var_os(DATA_DIR_ENV).map(PathBuf::from);
        let Some(dir) = dir.map(Path::to_path_buf).or(env) else { return };
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !p.exists() {
                *p = dir.join(&*p);
            }
        };
        match &mut self.task {
            TaskConfig::Digits { source: DigitSource::Idx { images, labels }, .. } => {
                fix(images);
                fix(labels);
            }
            TaskConfig::CharLm { corpus, .. } => fix(corpus),
            _ => {}
        }
    }
}

/// Settings for `grid` runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub grid: GridSpec,
    pub hidden: usize,
    pub jn_samples: usize,
    pub jn_norm: JacobianNorm,
    pub mle_burn_in: usize,
    pub mle_steps: usize,
    pub mi: MiConfig,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::paper(vec![0, 1, 2]),
            hidden: 64,
            jn_samples: 100,
            jn_norm: JacobianNorm::Operator,
            mle_burn_in: 100,
            mle_steps: 1000,
            mi: MiConfig::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_round_trip() {
        for task in ["copy", "digits", "char_lm"] {
            for c in [RunConfig::desk(task).unwrap(), RunConfig::paper(task).unwrap()] {
                let text = c.to_json();
                let back = RunConfig::from_json(&text).unwrap();
                assert_eq!(back, c);
                assert_eq!(back.to_json(), text);
            }
        }
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut c = RunConfig::desk("copy").unwrap();
        c.hidden = 0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::desk("digits").unwrap();
        c.lr = f64::NAN;
        assert!(c.validate().is_err());
        let mut c = RunConfig::desk("char_lm").unwrap();
        c.task = TaskConfig::CharLm { corpus: "x".into(), chunk: 1, train_fraction: 0.9, valid_fraction: 0.05 };
        assert!(c.validate().is_err());
        assert!(RunConfig::desk("mnist").is_err());
    }

    #[test]
    fn unknown_fields_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&RunConfig::desk("copy").unwrap().to_json()).unwrap();
        v["hiden"] = 3.into();
        assert!(RunConfig::from_json(&v.to_string()).is_err());
    }
}
