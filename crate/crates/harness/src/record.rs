//! Per-run logs and their CSV/JSON renderings.

use std::fmt::Write as _;
use std::path::Path;

use gamma_rnn::diagnostics::{AggregateRow, GridTable};
use serde::{Deserialize, Serialize};

use crate::HarnessError;

/// Bumped whenever a CSV layout changes.
pub const CSV_SCHEMA_VERSION: u32 = 1;

pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordRow {
    pub epoch: usize,
    pub iteration: u64,
    /// Mean training loss since the previous row; the epoch-0 row holds the
    /// loss on the evaluation set.
    pub train_loss: f64,
    pub eval_accuracy: f64,
    pub eval_bpc: f64,
    pub lr: f64,
    pub gain: Vec<f64>,
    pub saturation: Vec<f64>,
    pub mle: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub task: String,
    pub scenario: String,
    pub seed: u64,
    pub rows: Vec<RecordRow>,
    /// Set when the run stopped early on a numerical failure.
    pub failure: Option<String>,
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl RunRecord {
    pub fn last(&self) -> Option<&RecordRow> {
        self.rows.last()
    }

    /// One line per row; shape parameters summarised by mean and population
    /// standard deviation.
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from(
            "epoch,iteration,train_loss,eval_accuracy,eval_bpc,lr,gain_mean,gain_std,saturation_mean,saturation_std,mle\n",
        );
        for r in &self.rows {
            let (gm, gs) = mean_std(&r.gain);
            let (sm, ss) = mean_std(&r.saturation);
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.epoch,
                r.iteration,
                r.train_loss,
                r.eval_accuracy,
                r.eval_bpc,
                r.lr,
                gm,
                gs,
                sm,
                ss,
                opt(r.mle)
            )
            .unwrap();
        }
        if let Some(f) = &self.failure {
            writeln!(s, "# failed: {}", f.replace('\n', " ")).unwrap();
        }
        s
    }

    /// Long format: one line per (row, neuron). Shared parameters appear as
    /// neuron 0.
    pub fn shapes_csv(&self) -> String {
        let mut s = String::from("epoch,neuron,gain,saturation\n");
        for r in &self.rows {
            for (i, (g, sat)) in r.gain.iter().zip(&r.saturation).enumerate() {
                writeln!(s, "{},{i},{g},{sat}", r.epoch).unwrap();
            }
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("record serialises") + "\n"
    }
}

pub fn grid_csv(table: &GridTable) -> String {
    let mut s = String::from("gain,saturation,seed,value\n");
    for r in &table.rows {
        match &r.value {
            Ok(v) => writeln!(s, "{},{},{},{}", r.gain, r.saturation, r.seed, v).unwrap(),
            Err(e) => writeln!(s, "{},{},{},NaN # failed: {}", r.gain, r.saturation, r.seed, e.replace('\n', " ")).unwrap(),
        }
    }
    s
}

pub fn aggregate_csv(rows: &[AggregateRow]) -> String {
    let mut s = String::from("gain,saturation,mean,std\n");
    for r in rows {
        writeln!(s, "{},{},{},{}", r.gain, r.saturation, r.mean, r.std).unwrap();
    }
    s
}

pub fn write(path: &Path, contents: &str) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::Io(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, contents).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))
}

/// Run-directory manifest: enough to reproduce the record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub code_version: String,
    pub csv_schema_version: u32,
    pub command: String,
    pub rng: String,
    pub seeds: Vec<(String, u64)>,
    pub status: String,
}

impl Manifest {
    pub fn new(command: &str, seeds: Vec<(String, u64)>, status: &str) -> Self {
        Self {
            code_version: CODE_VERSION.to_string(),
            csv_schema_version: CSV_SCHEMA_VERSION,
            command: command.to_string(),
            rng: gamma_rnn::rng::ALGORITHM_ID.to_string(),
            seeds,
            status: status.to_string(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialises") + "\n"
    }
}
