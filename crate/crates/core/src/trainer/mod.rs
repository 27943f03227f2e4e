//! Stochastic-gate adapter training, evaluation, checkpoints and metrics.

pub mod checkpoint;
pub mod distance;
pub mod metrics;
pub mod optim;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{AdapterDropout, GateVector, GatedModel, Predictor};
use crate::numerics::{ops, row_losses, Graph, LossKind, Mat, Target};
use crate::rng::{self, Purpose};
use crate::scalar::Scalar;
use crate::schedule::{sample_gates, SamplerMode, ScheduleSpec};
use crate::tasks::Dataset;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointBundle, CheckpointError};
pub use distance::{adapter_distance, weight_distance_report, DistanceTable};
pub use metrics::{EvalRecord, MetricsLog, StepRecord};
pub use optim::{OptimizerKind, OptimizerState};

fn default_eval_every() -> u64 {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub sampler: SamplerMode,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// Cosine-anneal the learning rate from its initial value to 0 over `T`.
    #[serde(default)]
    pub cosine_decay: bool,
    pub batch_size: usize,
    #[serde(default)]
    pub loss: LossKind,
    pub seed: u64,
    /// Dropout rate on each active adapter's rank-`r` activation.
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
}

impl TrainingConfig {
    pub fn new(schedule: ScheduleSpec, learning_rate: f64, batch_size: usize, seed: u64) -> Self {
        Self {
            schedule,
            sampler: SamplerMode::Uniform,
            optimizer: OptimizerKind::Adam,
            learning_rate,
            cosine_decay: false,
            batch_size,
            loss: LossKind::SoftmaxCrossEntropy,
            seed,
            dropout: 0.0,
            eval_every: default_eval_every(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every must be at least 1"));
        }
        AdapterDropout::new(self.dropout)?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serialises")))
    }

    /// Learning rate used at step `t` (1-based).
    pub fn lr_at(&self, t: u64) -> f64 {
        if !self.cosine_decay {
            return self.learning_rate;
        }
        let u = (t - 1) as f64 / self.schedule.total_steps as f64;
        self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * u).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: f64,
}

/// Mean loss and accuracy with dropout off; all gates on unless given.
pub fn evaluate<T: Scalar, P: Predictor<T> + ?Sized>(
    model: &P,
    data: &Dataset<T>,
    gates: Option<&GateVector>,
    kind: LossKind,
) -> Result<EvalMetrics> {
    evaluate_chunked(model, data, gates, kind, data.len())
}

/// As [`evaluate`], processing `chunk` rows at a time. Rows are reduced in
/// order, so the result does not depend on `chunk`.
pub fn evaluate_chunked<T: Scalar, P: Predictor<T> + ?Sized>(
    model: &P,
    data: &Dataset<T>,
    gates: Option<&GateVector>,
    kind: LossKind,
    chunk: usize,
) -> Result<EvalMetrics> {
    let ones;
    let gates = match gates {
        Some(g) => g,
        None => {
            ones = GateVector::ones(model.depth());
            &ones
        }
    };
    let chunk = chunk.max(1);
    let (mut total, mut correct) = (0.0, 0usize);
    let mut start = 0;
    while start < data.len() {
        let end = (start + chunk).min(data.len());
        let idx: Vec<usize> = (start..end).collect();
        let x = data.inputs.select_rows(&idx);
        let labels = &data.labels[start..end];
        let pred = model.predict(&x, gates)?;
        for l in row_losses(kind, &pred, Target::Labels(labels))? {
            total += l.as_f64();
        }
        correct += ops::argmax_rows(&pred)
            .iter()
            .zip(labels)
            .filter(|(p, y)| p == y)
            .count();
        start = end;
    }
    let n = data.len() as f64;
    Ok(EvalMetrics {
        loss: total / n,
        accuracy: correct as f64 / n,
    })
}

/// Sequential training driver; one instance owns one model.
pub struct Trainer<'a, T: Scalar> {
    config: TrainingConfig,
    train: &'a Dataset<T>,
    eval: Option<&'a Dataset<T>>,
    model: GatedModel<T>,
    optimizer: OptimizerState<T>,
    dropout: AdapterDropout,
    step: u64,
    metrics: MetricsLog,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(
        model: GatedModel<T>,
        train: &'a Dataset<T>,
        eval: Option<&'a Dataset<T>>,
        config: TrainingConfig,
    ) -> Result<Self> {
        let optimizer = OptimizerState::new(config.optimizer, model.adapters());
        let metrics = MetricsLog::new(model.depth());
        Self::assemble(model, optimizer, 0, metrics, train, eval, config)
    }

    /// Continues a run from a checkpoint taken by a trainer with `config`.
    pub fn resume(
        bundle: CheckpointBundle<T>,
        train: &'a Dataset<T>,
        eval: Option<&'a Dataset<T>>,
        config: TrainingConfig,
    ) -> Result<Self> {
        let stored = bundle
            .config
            .ok_or_else(|| CheckpointError::Resume("checkpoint carries no training config".into()))?;
        if stored.digest() != config.digest() {
            return Err(CheckpointError::Resume("config digest differs from the checkpoint's".into()).into());
        }
        let optimizer = bundle
            .optimizer
            .ok_or_else(|| CheckpointError::Resume("checkpoint carries no optimizer state".into()))?;
        if optimizer.kind != config.optimizer || optimizer.slots.len() != bundle.model.depth() {
            return Err(CheckpointError::Resume("optimizer state does not fit the model".into()).into());
        }
        Self::assemble(bundle.model, optimizer, bundle.step, bundle.metrics, train, eval, config)
    }

    fn assemble(
        model: GatedModel<T>,
        optimizer: OptimizerState<T>,
        step: u64,
        metrics: MetricsLog,
        train: &'a Dataset<T>,
        eval: Option<&'a Dataset<T>>,
        config: TrainingConfig,
    ) -> Result<Self> {
        config.validate()?;
        for d in std::iter::once(train).chain(eval) {
            if d.dim() != model.input_dim() {
                return Err(Error::Architecture(format!(
                    "dataset has {} features, model expects {}",
                    d.dim(),
                    model.input_dim()
                )));
            }
            if d.classes > model.output_dim() {
                return Err(Error::Architecture(format!(
                    "dataset has {} classes, model has {} outputs",
                    d.classes,
                    model.output_dim()
                )));
            }
        }
        if step > config.schedule.total_steps {
            return Err(CheckpointError::Resume(format!(
                "checkpoint step {step} beyond total steps {}",
                config.schedule.total_steps
            ))
            .into());
        }
        let dropout = AdapterDropout::new(config.dropout)?;
        Ok(Self {
            config,
            train,
            eval,
            model,
            optimizer,
            dropout,
            step,
            metrics,
        })
    }

    pub fn model(&self) -> &GatedModel<T> {
        &self.model
    }

    pub fn metrics(&self) -> &MetricsLog {
        &self.metrics
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.config
    }

    /// Completed steps.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.schedule.total_steps
    }

    pub fn snapshot(&self) -> CheckpointBundle<T> {
        CheckpointBundle {
            model: self.model.clone(),
            optimizer: Some(self.optimizer.clone()),
            step: self.step,
            config: Some(self.config.clone()),
            metrics: self.metrics.clone(),
        }
    }

    fn diverged(&self, step: u64, reason: impl Into<String>) -> Error {
        Error::Diverged {
            step,
            reason: reason.into(),
            diagnostic: Some(checkpoint::to_bytes(&self.snapshot())),
        }
    }

    fn batch_indices(&self, t: u64) -> Vec<usize> {
        let n = self.train.len();
        if self.config.batch_size >= n {
            return (0..n).collect();
        }
        let mut rng = rng::stream(self.config.seed, t, Purpose::Batch);
        rand::seq::index::sample(&mut rng, n, self.config.batch_size).into_vec()
    }

    /// Performs step `t = step_count() + 1`. On divergence the trainer keeps
    /// its pre-step state and the error carries a checkpoint of it.
    pub fn step(&mut self) -> Result<()> {
        if self.is_done() {
            return Err(Error::contract("training already finished"));
        }
        let t = self.step + 1;
        let cfg = &self.config;
        let layers = self.model.depth();
        let p = cfg.schedule.activation_prob(t)?;
        let gates = sample_gates(p, layers, cfg.sampler, cfg.seed, t);

        let idx = self.batch_indices(t);
        let x = self.train.inputs.select_rows(&idx);
        let labels: Vec<usize> = idx.iter().map(|&i| self.train.labels[i]).collect();
        let mut drop_rng = rng::stream(cfg.seed, t, Purpose::Dropout);
        let masks: Vec<Option<Mat<T>>> = (0..layers)
            .map(|i| {
                if gates.is_active(i) {
                    self.dropout
                        .sample_mask(idx.len(), self.model.adapters()[i].rank(), &mut drop_rng)
                } else {
                    None
                }
            })
            .collect();

        let mut g = Graph::new();
        let xv = g.constant(x);
        let (out, vars) = self.model.forward_graph(&mut g, xv, &gates, &masks)?;
        let loss = match g.loss_labels(cfg.loss, out, &labels) {
            Ok(l) => l,
            Err(Error::NonFinite(_)) => return Err(self.diverged(t, "non-finite prediction")),
            Err(e) => return Err(e),
        };
        let loss_value = g.scalar(loss).as_f64();
        if !loss_value.is_finite() {
            return Err(self.diverged(t, format!("loss is {loss_value}")));
        }
        let grads = g.backward(loss)?;
        let mut updates = Vec::new();
        for (i, v) in vars.iter().enumerate() {
            if let Some((a, b)) = *v {
                let (ga, gb) = (grads.wrt(&g, a), grads.wrt(&g, b));
                if !(ga.is_finite() && gb.is_finite()) {
                    return Err(self.diverged(t, format!("non-finite gradient for adapter {}", i + 1)));
                }
                updates.push((i, ga, gb));
            }
        }

        let lr = T::of(cfg.lr_at(t));
        let saved = (self.model.adapters().to_vec(), self.optimizer.clone());
        for (i, ga, gb) in &updates {
            self.optimizer
                .update(*i, &mut self.model.adapters_mut()[*i], ga, gb, lr);
        }
        if let Some(&(i, _, _)) = updates.iter().find(|(i, _, _)| {
            let ad = &self.model.adapters()[*i];
            !(ad.a.is_finite() && ad.b.is_finite())
        }) {
            self.model.adapters_mut().clone_from_slice(&saved.0);
            self.optimizer = saved.1;
            return Err(self.diverged(t, format!("adapter {} left the finite range", i + 1)));
        }

        self.metrics.push_step(
            StepRecord {
                step: t,
                p,
                train_loss: loss_value,
                active_count: gates.active_count(),
            },
            gates.as_slice(),
        )?;
        self.step = t;
        if let Some(eval) = self.eval {
            if t % self.config.eval_every == 0 || self.is_done() {
                let m = evaluate(&self.model, eval, None, self.config.loss)?;
                self.metrics.push_eval(EvalRecord {
                    step: t,
                    eval_loss: m.loss,
                    eval_accuracy: m.accuracy,
                })?;
            }
        }
        Ok(())
    }

    /// Runs until `step_count() == t` (clamped to the schedule length).
    pub fn run_until(&mut self, t: u64) -> Result<()> {
        let t = t.min(self.config.schedule.total_steps);
        while self.step < t {
            self.step()?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<(CheckpointBundle<T>, MetricsLog)> {
        self.run_until(self.config.schedule.total_steps)?;
        let metrics = self.metrics.clone();
        Ok((self.snapshot(), metrics))
    }
}

/// Trains adapters for the full schedule.
pub fn train<T: Scalar>(
    model: GatedModel<T>,
    train_set: &Dataset<T>,
    eval_set: Option<&Dataset<T>>,
    config: TrainingConfig,
) -> Result<(CheckpointBundle<T>, MetricsLog)> {
    Trainer::new(model, train_set, eval_set, config)?.finish()
}
