//! Progressive stochastic-gate training of low-rank adapters, with merging,
//! pruning, Shapley attribution and a numerical check of the subnetwork
//! ensemble bound.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix it to `f64`, which every experiment pipeline uses.

pub mod error;
pub mod game;
pub mod merge;
pub mod model;
pub mod numerics;
pub mod prune;
pub mod report;
pub mod rng;
pub mod scalar;
pub mod schedule;
pub mod tasks;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{AdapterPair, Architecture, GateVector, GatedModel, Nonlinearity, Predictor};
pub use numerics::{LossKind, Mat};
pub use scalar::Scalar;
pub use schedule::{binomial_weights, sample_gates, SamplerMode, ScheduleShape, ScheduleSpec};
pub use tasks::{Dataset, Split, TeacherTask};
pub use trainer::{evaluate, train, CheckpointBundle, EvalMetrics, MetricsLog, Trainer, TrainingConfig};

pub type Matrix = Mat<f64>;
pub type Model = GatedModel<f64>;
pub type Adapter = AdapterPair<f64>;
pub type Data = Dataset<f64>;
pub type Checkpoint = CheckpointBundle<f64>;
