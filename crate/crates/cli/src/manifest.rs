//! Output directory handling and the per-run manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use rem_core::{Error, Result};

use crate::config::RunConfig;

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

pub fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Record of one command invocation, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config_path: Option<PathBuf>,
    pub seed: u64,
    pub args: Vec<String>,
    /// Input path to SHA-256 of its contents.
    pub inputs: BTreeMap<PathBuf, String>,
    /// Output path to SHA-256 of its contents.
    pub outputs: BTreeMap<PathBuf, String>,
    pub config: RunConfig,
}

/// Tracks the inputs and outputs of a run and keeps outputs under `dir`.
pub struct Run {
    pub dir: PathBuf,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Run {
    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        Ok(Run {
            dir: dir.to_path_buf(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    /// Registers an input file, failing early with a clear message if it is missing.
    pub fn input(&mut self, path: &Path) -> Result<PathBuf> {
        if !path.is_file() {
            return Err(io_err(path, std::io::Error::new(std::io::ErrorKind::NotFound, "input file not found")));
        }
        self.inputs.push(path.to_path_buf());
        Ok(path.to_path_buf())
    }

    /// Path for an output file; refuses to overwrite any registered input.
    pub fn output(&mut self, name: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        let canon = |p: &Path| std::fs::canonicalize(p).ok();
        if let Some(target) = canon(&path) {
            if self.inputs.iter().any(|i| canon(i).as_ref() == Some(&target)) {
                return Err(Error::Validation(format!(
                    "output {} would overwrite an input; choose another --out",
                    path.display()
                )));
            }
        }
        self.outputs.push(path.clone());
        Ok(path)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.output(name)?;
        std::fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
        Ok(path)
    }

    pub fn finish(self, command: &str, config_path: Option<&Path>, config: &RunConfig) -> Result<PathBuf> {
        let digests = |paths: &[PathBuf]| -> Result<BTreeMap<PathBuf, String>> {
            paths.iter().map(|p| Ok((p.clone(), sha256_file(p)?))).collect()
        };
        let manifest = RunManifest {
            command: command.to_string(),
            tool_version: crate::config::version().to_string(),
            config_path: config_path.map(Path::to_path_buf),
            seed: config.seed,
            args: std::env::args().skip(1).collect(),
            inputs: digests(&self.inputs)?,
            outputs: digests(&self.outputs)?,
            config: config.clone(),
        };
        let path = self.dir.join(format!("{command}.manifest.json"));
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, text).map_err(|e| io_err(&path, e))?;
        Ok(path)
    }
}
