//! Run configuration documents.

use std::path::{Path, PathBuf};

use coto_core::rng::{self, Purpose};
use coto_core::tasks::{load_csv, CsvSchema};
use coto_core::trainer::OptimizerKind;
use coto_core::{
    Architecture, Data, LossKind, Model, Nonlinearity, SamplerMode, ScheduleSpec, Split, TeacherTask, TrainingConfig,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Where the rows come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TaskConfig {
    Teacher {
        seed: u64,
        n: usize,
        dim: usize,
        classes: usize,
        teacher_depth: usize,
    },
    Csv {
        train: PathBuf,
        eval: PathBuf,
        #[serde(default)]
        classes: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub widths: Vec<usize>,
    pub rank: usize,
    pub alpha: f64,
    #[serde(default)]
    pub activation: Nonlinearity,
    /// Seed of the frozen base network, shared by every run on the task.
    pub base_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default)]
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub cosine_decay: bool,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
}

fn default_eval_every() -> u64 {
    100
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub sampler: SamplerMode,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub loss: LossKind,
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

pub const REFERENCE_JSON: &str = include_str!("../../../configs/reference.json");

impl RunConfig {
    /// The pinned reference experiment.
    pub fn reference() -> Self {
        let t = TeacherTask::REFERENCE;
        Self {
            task: TaskConfig::Teacher {
                seed: t.seed,
                n: t.n,
                dim: t.dim,
                classes: t.classes,
                teacher_depth: t.teacher_depth,
            },
            model: ModelConfig {
                layers: 6,
                widths: vec![16; 6],
                rank: 2,
                alpha: 1.0,
                activation: Nonlinearity::Tanh,
                base_seed: 1,
            },
            schedule: ScheduleSpec::linear(0.75, 10_000),
            sampler: SamplerMode::Uniform,
            optimizer: OptimizerConfig {
                kind: OptimizerKind::Adam,
                learning_rate: 1e-2,
                batch_size: 64,
                cosine_decay: false,
                dropout: 0.0,
                eval_every: 500,
            },
            loss: LossKind::SoftmaxCrossEntropy,
            seed: 100,
            output_dir: default_output_dir(),
        }
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| CliError::Config {
            path: format!("{origin}: {}", e.path()),
            msg: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::file(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let field = |path: &str, msg: String| CliError::Config {
            path: path.into(),
            msg,
        };
        if self.model.widths.len() != self.model.layers {
            return Err(field(
                "model.widths",
                format!("{} widths for {} layers", self.model.widths.len(), self.model.layers),
            ));
        }
        self.training_config()
            .validate()
            .map_err(|e| field("schedule/optimizer", e.to_string()))?;
        if let TaskConfig::Teacher { n, classes, .. } = self.task {
            if classes < 2 || n < 10 * classes {
                return Err(field("task", format!("n = {n} with {classes} classes is infeasible")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises") + "\n"
    }

    /// SHA-256 of the compact JSON form.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn with_phase1_fraction(&self, rho: f64) -> Self {
        let mut c = self.clone();
        c.schedule.phase1_fraction = rho;
        c
    }

    pub fn training_config(&self) -> TrainingConfig {
        let o = &self.optimizer;
        TrainingConfig {
            schedule: self.schedule,
            sampler: self.sampler,
            optimizer: o.kind,
            learning_rate: o.learning_rate,
            cosine_decay: o.cosine_decay,
            batch_size: o.batch_size,
            loss: self.loss,
            seed: self.seed,
            dropout: o.dropout,
            eval_every: o.eval_every,
        }
    }

    /// `(train, eval)`; relative CSV paths resolve against `base`.
    pub fn datasets(&self, base: &Path) -> Result<(Data, Data), CliError> {
        match &self.task {
            &TaskConfig::Teacher {
                seed,
                n,
                dim,
                classes,
                teacher_depth,
            } => Ok(TeacherTask {
                seed,
                n,
                dim,
                classes,
                teacher_depth,
            }
            .generate()?),
            TaskConfig::Csv { train, eval, classes } => {
                let schema = CsvSchema {
                    features: None,
                    classes: *classes,
                };
                let tr = load_csv(&base.join(train), schema, Split::Train)?;
                let ev = load_csv(
                    &base.join(eval),
                    CsvSchema {
                        features: Some(tr.dim()),
                        classes: Some(tr.classes),
                    },
                    Split::Eval,
                )?;
                Ok((tr, ev))
            }
        }
    }

    pub fn architecture(&self, data: &Data) -> Architecture {
        Architecture {
            input_dim: data.dim(),
            widths: self.model.widths.clone(),
            outputs: data.classes,
            rank: self.model.rank,
            alpha: self.model.alpha,
            activation: self.model.activation,
        }
    }

    /// Frozen base from `base_seed`, adapters from the run seed.
    pub fn initial_model(&self, data: &Data) -> Result<Model, CliError> {
        let mut base = rng::stream(self.model.base_seed, 1, Purpose::Init);
        let mut adapters = rng::stream(self.seed, 2, Purpose::Init);
        Ok(Model::from_seeds(&self.architecture(data), &mut base, &mut adapters)?)
    }
}
