//! Run manifests: what a subcommand read, wrote and with which settings.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use occrec::io::write_atomic;
use occrec::PipelineConfig;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Debug, Serialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Stage {
    pub name: String,
    pub seconds: f64,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub seed: u64,
    pub threads: Option<usize>,
    pub config: PipelineConfig,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub stages: Vec<Stage>,
    /// Free-form per-command facts (losses, counts, check results).
    pub extra: serde_json::Map<String, serde_json::Value>,
}

pub fn sha256_file(path: &Path) -> Result<Artifact, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::data(format!("cannot hash {}: {e}", path.display())))?;
    Ok(Artifact {
        path: path.to_path_buf(),
        sha256: hex::encode(Sha256::digest(&bytes)),
        bytes: bytes.len() as u64,
    })
}

impl RunManifest {
    pub fn new(command: &str, config: &PipelineConfig, threads: Option<usize>) -> Self {
        Self {
            tool: "occrec".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            argv: std::env::args().collect(),
            seed: config.seed,
            threads,
            config: config.clone(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            stages: Vec::new(),
            extra: Default::default(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        self.inputs.push(sha256_file(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<(), CliError> {
        self.outputs.push(sha256_file(path)?);
        Ok(())
    }

    pub fn note(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).unwrap_or(serde_json::Value::Null);
        self.extra.insert(key.into(), v);
    }

    /// Times `f` as a named stage.
    pub fn stage<T>(&mut self, name: &str, f: impl FnOnce() -> T) -> T {
        let t0 = Instant::now();
        let out = f();
        self.stages.push(Stage {
            name: name.into(),
            seconds: t0.elapsed().as_secs_f64(),
        });
        tracing::info!(stage = name, seconds = t0.elapsed().as_secs_f64(), "done");
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::data(e.to_string()))?;
        write_atomic(path, text.as_bytes()).map_err(CliError::from)
    }
}
