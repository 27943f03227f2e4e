//! Provenance headers and atomic artifact writers.

use std::fs;
use std::path::{Path, PathBuf};

use coto_core::report::{write_atomic, CsvTable};
use coto_core::trainer::checkpoint::{from_bytes, to_bytes};
use coto_core::Checkpoint;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;

pub const TOOL: &str = concat!("coto-lab ", env!("CARGO_PKG_VERSION"));

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Comment lines identifying what produced an artifact. Nothing time- or
/// host-dependent goes in, so reruns reproduce the same bytes.
#[derive(Debug, Clone, Default)]
pub struct Provenance {
    lines: Vec<String>,
}

impl Provenance {
    pub fn new(command: &str) -> Self {
        Self {
            lines: vec![TOOL.to_string(), format!("command: {command}")],
        }
    }

    pub fn config(mut self, cfg: &RunConfig) -> Self {
        self.lines.push(format!("config_sha256: {}", cfg.digest()));
        self
    }

    pub fn checkpoint(mut self, label: &str, ckpt: &LoadedCheckpoint) -> Self {
        let name = ckpt.path.file_name().unwrap_or(ckpt.path.as_os_str());
        self.lines
            .push(format!("{label}: {} sha256 {}", name.to_string_lossy(), ckpt.sha256));
        self
    }

    pub fn note(mut self, line: impl Into<String>) -> Self {
        self.lines.push(line.into());
        self
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::file(dir, e))
}

pub fn write_table(dir: &Path, name: &str, table: CsvTable, prov: &Provenance) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    table.with_provenance(prov.lines().to_vec()).write(&path)?;
    Ok(path)
}

/// Pretty JSON with the provenance lines under a `provenance` key.
pub fn write_json<S: Serialize>(dir: &Path, name: &str, value: &S, prov: &Provenance) -> Result<PathBuf, CliError> {
    let mut v = serde_json::to_value(value).expect("artifact serialises");
    if let serde_json::Value::Object(map) = &mut v {
        map.insert("provenance".into(), prov.lines().into());
    }
    let path = dir.join(name);
    let text = serde_json::to_string_pretty(&v).expect("artifact serialises") + "\n";
    write_atomic(&path, text.as_bytes())?;
    Ok(path)
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    Ok(write_atomic(path, text.as_bytes())?)
}

/// Writes a checkpoint and returns the SHA-256 of its bytes.
pub fn save(bundle: &Checkpoint, path: &Path) -> Result<String, CliError> {
    let bytes = to_bytes(bundle);
    write_atomic(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub path: PathBuf,
    pub sha256: String,
    pub bundle: Checkpoint,
}

impl LoadedCheckpoint {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::file(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            sha256: sha256_hex(&bytes),
            bundle: from_bytes(&bytes)?,
        })
    }
}

/// The run config for a checkpoint: `explicit` if given, otherwise the
/// `config.json` written next to it by `train`.
pub fn config_for(ckpt: &Path, explicit: Option<&Path>) -> Result<(RunConfig, PathBuf), CliError> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => ckpt.parent().unwrap_or(Path::new(".")).join("config.json"),
    };
    let cfg = RunConfig::load(&path)?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    Ok((cfg, base))
}
