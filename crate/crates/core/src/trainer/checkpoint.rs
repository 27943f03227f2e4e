//! Binary checkpoint format.
//!
//! Layout: magic `COTOCKPT`, `u32` LE version, `u64` LE manifest length, JSON
//! manifest, then little-endian `f64` tensors at the offsets the manifest lists
//! (relative to the start of the payload).

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::metrics::MetricsLog;
use super::optim::{AdapterSlot, OptimizerKind, OptimizerState};
use super::TrainingConfig;
use crate::error::{Error, Result};
use crate::model::{AdapterPair, Architecture, BaseLayer, GatedModel, Nonlinearity};
use crate::numerics::Mat;
use crate::report::write_atomic;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"COTOCKPT";
pub const VERSION: u32 = 1;
const PREFIX: usize = 8 + 4 + 8;

#[derive(Debug, Error, PartialEq)]
pub enum CheckpointError {
    #[error("not a checkpoint file: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (this build reads version {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("payload digest mismatch: manifest records {expected}, payload hashes to {actual}")]
    Digest { expected: String, actual: String },
    #[error("malformed checkpoint manifest: {0}")]
    Manifest(String),
    #[error("cannot resume: {0}")]
    Resume(String),
}

/// Everything needed to evaluate a model or continue its training run.
#[derive(Debug, Clone)]
pub struct CheckpointBundle<T> {
    pub model: GatedModel<T>,
    pub optimizer: Option<OptimizerState<T>>,
    /// Number of completed optimisation steps.
    pub step: u64,
    pub config: Option<TrainingConfig>,
    pub metrics: MetricsLog,
}

impl<T: Scalar> CheckpointBundle<T> {
    /// A bare model with no training lineage.
    pub fn from_model(model: GatedModel<T>) -> Self {
        let layers = model.adapters().len();
        Self {
            model,
            optimizer: None,
            step: 0,
            config: None,
            metrics: MetricsLog::new(layers),
        }
    }

    pub fn config_digest(&self) -> Option<String> {
        self.config.as_ref().map(TrainingConfig::digest)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub architecture: Architecture,
    pub activations: Vec<Nonlinearity>,
    pub alphas: Vec<f64>,
    pub dtype: String,
    pub step: u64,
    pub seed: Option<u64>,
    /// Next step index to draw from the counter-addressed streams.
    pub rng_position: u64,
    pub config: Option<TrainingConfig>,
    pub config_digest: Option<String>,
    pub optimizer: Option<OptimizerKind>,
    pub optimizer_steps: Vec<u64>,
    pub metrics: MetricsLog,
    pub invocations: Vec<u64>,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: u64,
    pub payload_sha256: String,
}

struct PayloadWriter {
    bytes: Vec<u8>,
    entries: Vec<TensorEntry>,
}

impl PayloadWriter {
    fn push<T: Scalar>(&mut self, name: String, m: &Mat<T>) {
        let offset = self.bytes.len() as u64;
        for &v in m.data() {
            self.bytes.extend_from_slice(&v.as_f64().to_le_bytes());
        }
        self.entries.push(TensorEntry {
            name,
            shape: [m.rows(), m.cols()],
            offset,
            length: self.bytes.len() as u64 - offset,
        });
    }
}

pub fn to_bytes<T: Scalar>(bundle: &CheckpointBundle<T>) -> Vec<u8> {
    let model = &bundle.model;
    let mut w = PayloadWriter {
        bytes: Vec::new(),
        entries: Vec::new(),
    };
    for (i, (layer, ad)) in model.layers().iter().zip(model.adapters()).enumerate() {
        w.push(format!("layer.{i}.weight"), layer.weight());
        w.push(format!("adapter.{i}.a"), &ad.a);
        w.push(format!("adapter.{i}.b"), &ad.b);
    }
    w.push("head".into(), model.head());
    if let Some(opt) = &bundle.optimizer {
        for (i, s) in opt.slots.iter().enumerate() {
            w.push(format!("optim.{i}.m_a"), &s.m_a);
            w.push(format!("optim.{i}.v_a"), &s.v_a);
            w.push(format!("optim.{i}.m_b"), &s.m_b);
            w.push(format!("optim.{i}.v_b"), &s.v_b);
        }
    }
    let manifest = Manifest {
        architecture: model.architecture(),
        activations: model.layers().iter().map(BaseLayer::activation).collect(),
        alphas: model.adapters().iter().map(|a| a.alpha.as_f64()).collect(),
        dtype: "f64-le".into(),
        step: bundle.step,
        seed: bundle.config.as_ref().map(|c| c.seed),
        rng_position: bundle.step + 1,
        config: bundle.config.clone(),
        config_digest: bundle.config_digest(),
        optimizer: bundle.optimizer.as_ref().map(|o| o.kind),
        optimizer_steps: bundle
            .optimizer
            .as_ref()
            .map(|o| o.slots.iter().map(|s| s.steps).collect())
            .unwrap_or_default(),
        metrics: bundle.metrics.clone(),
        invocations: model.invocation_counts(),
        tensors: w.entries,
        payload_bytes: w.bytes.len() as u64,
        payload_sha256: hex::encode(Sha256::digest(&w.bytes)),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serialises");
    let mut out = Vec::with_capacity(PREFIX + json.len() + w.bytes.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&w.bytes);
    out
}

/// Parses the fixed prefix and manifest, verifying the payload digest.
pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8]), CheckpointError> {
    if bytes.len() < MAGIC.len() {
        return Err(CheckpointError::Truncated(format!("{} bytes, no magic", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < PREFIX {
        return Err(CheckpointError::Truncated("header cut short".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: VERSION,
        });
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let rest = &bytes[PREFIX..];
    if (rest.len() as u64) < mlen {
        return Err(CheckpointError::Truncated(format!(
            "manifest needs {mlen} bytes, {} present",
            rest.len()
        )));
    }
    let (json, payload) = rest.split_at(mlen as usize);
    let manifest: Manifest = serde_json::from_slice(json).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    if (payload.len() as u64) < manifest.payload_bytes {
        return Err(CheckpointError::Truncated(format!(
            "payload needs {} bytes, {} present",
            manifest.payload_bytes,
            payload.len()
        )));
    }
    if payload.len() as u64 > manifest.payload_bytes {
        return Err(CheckpointError::Manifest(format!(
            "{} unexpected trailing bytes",
            payload.len() as u64 - manifest.payload_bytes
        )));
    }
    let actual = hex::encode(Sha256::digest(payload));
    if actual != manifest.payload_sha256 {
        return Err(CheckpointError::Digest {
            expected: manifest.payload_sha256,
            actual,
        });
    }
    Ok((manifest, payload))
}

struct PayloadReader<'a> {
    payload: &'a [u8],
    entries: std::collections::HashMap<&'a str, &'a TensorEntry>,
}

impl PayloadReader<'_> {
    fn take<T: Scalar>(&self, name: &str) -> Result<Mat<T>> {
        let e = self
            .entries
            .get(name)
            .ok_or_else(|| CheckpointError::Manifest(format!("missing tensor {name}")))?;
        let [rows, cols] = e.shape;
        if e.length != (rows * cols * 8) as u64 {
            return Err(CheckpointError::Manifest(format!("tensor {name}: length does not match shape")).into());
        }
        let end = e.offset.checked_add(e.length).filter(|&end| end <= self.payload.len() as u64);
        let Some(end) = end else {
            return Err(CheckpointError::Manifest(format!("tensor {name} lies outside the payload")).into());
        };
        let data = self.payload[e.offset as usize..end as usize]
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        Mat::new(rows, cols, data)
    }
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<CheckpointBundle<T>> {
    let (manifest, payload) = read_manifest(bytes)?;
    let depth = manifest.architecture.depth();
    if manifest.activations.len() != depth || manifest.alphas.len() != depth {
        return Err(CheckpointError::Manifest("per-layer lists disagree with depth".into()).into());
    }
    let reader = PayloadReader {
        payload,
        entries: manifest.tensors.iter().map(|e| (e.name.as_str(), e)).collect(),
    };
    let mut layers = Vec::with_capacity(depth);
    let mut adapters = Vec::with_capacity(depth);
    for i in 0..depth {
        layers.push(BaseLayer::new(
            reader.take(&format!("layer.{i}.weight"))?,
            manifest.activations[i],
        ));
        adapters.push(AdapterPair::new(
            reader.take(&format!("adapter.{i}.a"))?,
            reader.take(&format!("adapter.{i}.b"))?,
            T::of(manifest.alphas[i]),
        )?);
    }
    let model = GatedModel::new(layers, adapters, reader.take("head")?)?;
    if model.architecture() != manifest.architecture {
        return Err(CheckpointError::Manifest("tensor shapes disagree with the architecture".into()).into());
    }
    if manifest.invocations.len() != depth {
        return Err(CheckpointError::Manifest("invocation counts disagree with depth".into()).into());
    }
    model.set_invocation_counts(&manifest.invocations);
    let optimizer = match manifest.optimizer {
        None => None,
        Some(kind) => {
            if manifest.optimizer_steps.len() != depth {
                return Err(CheckpointError::Manifest("optimizer step counts disagree with depth".into()).into());
            }
            let slots = (0..depth)
                .map(|i| {
                    Ok(AdapterSlot {
                        m_a: reader.take(&format!("optim.{i}.m_a"))?,
                        v_a: reader.take(&format!("optim.{i}.v_a"))?,
                        m_b: reader.take(&format!("optim.{i}.m_b"))?,
                        v_b: reader.take(&format!("optim.{i}.v_b"))?,
                        steps: manifest.optimizer_steps[i],
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Some(OptimizerState { kind, slots })
        }
    };
    if let (Some(cfg), Some(d)) = (&manifest.config, &manifest.config_digest) {
        if &cfg.digest() != d {
            return Err(CheckpointError::Manifest("config digest does not match the stored config".into()).into());
        }
    }
    Ok(CheckpointBundle {
        model,
        optimizer,
        step: manifest.step,
        config: manifest.config,
        metrics: manifest.metrics,
    })
}

pub fn save_checkpoint<T: Scalar>(bundle: &CheckpointBundle<T>, path: &Path) -> Result<()> {
    write_atomic(path, &to_bytes(bundle))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<CheckpointBundle<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
