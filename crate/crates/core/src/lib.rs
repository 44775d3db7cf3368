//! Vanilla recurrent networks with a trainable activation
//! `gamma(x; n, s) = (1 - s) softplus(n x) / n + s sigmoid(n x)`, hand-written
//! backpropagation through time, and the stability and information
//! diagnostics used to study them.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision.

pub mod activation;
pub mod checkpoint;
pub mod diagnostics;
pub mod gradcheck;
pub mod linalg;
pub mod optim;
pub mod rng;
pub mod rnn;
pub mod scalar;
pub mod tasks;

pub use activation::{gamma, gamma_ds, gamma_dn, gamma_dx, ActivationError, Scenario, ShapeParams, GAIN_FLOOR};
pub use checkpoint::{Checkpoint, CheckpointError, SeedRecord};
pub use diagnostics::{
    lyapunov_spectrum, mean_jacobian_norm, mi_landscape, mi_mixture, stability_grid, DiagnosticsError, GridSpec,
    GridTable, JacobianNorm, LyapunovConfig, LyapunovSpectrum, MiEstimate, MiSample, StabilityMeasure,
};
pub use linalg::{qr_pos, LinalgError, Matrix};
pub use optim::{adam_step, AdamConfig, AdamState, OptimError, PlateauConfig, PlateauScheduler, Trainable};
pub use rng::RngStream;
pub use rnn::{Dims, Gradients, InitConfig, RnnError, RnnModel};
pub use scalar::Scalar;
pub use tasks::{CopyConfig, CorpusSplit, DigitDataset, DigitSource, Metrics, TaskBatch, TaskError, TaskKind};

pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type RnnModel64 = RnnModel<f64>;
pub type RnnModel32 = RnnModel<f32>;
pub type Gradients64 = Gradients<f64>;
pub type Gradients32 = Gradients<f32>;
pub type ShapeParams64 = ShapeParams<f64>;
pub type ShapeParams32 = ShapeParams<f32>;
pub type AdamState64 = AdamState<f64>;
pub type AdamState32 = AdamState<f32>;
pub type TaskBatch64 = TaskBatch<f64>;
pub type TaskBatch32 = TaskBatch<f32>;
pub type Checkpoint64 = Checkpoint<f64>;
pub type Checkpoint32 = Checkpoint<f32>;
