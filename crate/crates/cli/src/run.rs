use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use eyedeg::{Error, Result};
use serde::Serialize;

/// Record of one command invocation, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub seeds: BTreeMap<String, u64>,
    pub tool_version: String,
    pub duration_ms: u64,
}

pub struct Run {
    command: String,
    started: Instant,
    outputs: Vec<PathBuf>,
    inputs: BTreeMap<String, String>,
    seeds: BTreeMap<String, u64>,
}

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn refuse_existing(path: &Path) -> Result<()> {
    if path.exists() {
        return Err(io(
            path,
            std::io::Error::new(
                std::io::ErrorKind::AlreadyExists,
                "refusing to overwrite an existing output",
            ),
        ));
    }
    Ok(())
}

/// `prefix` with `suffix` appended to its file name.
pub fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

impl Run {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            started: Instant::now(),
            outputs: Vec::new(),
            inputs: BTreeMap::new(),
            seeds: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) {
        self.inputs.insert(name.to_string(), path.display().to_string());
    }

    pub fn seed(&mut self, name: &str, seed: u64) {
        self.seeds.insert(name.to_string(), seed);
    }

    /// Claims output paths up front; any that already exists aborts the run
    /// before anything is written.
    pub fn claim(&mut self, paths: &[PathBuf]) -> Result<()> {
        for p in paths {
            refuse_existing(p)?;
        }
        self.outputs.extend(paths.iter().cloned());
        Ok(())
    }

    pub fn write(&self, path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
        debug_assert!(
            self.outputs.iter().any(|p| p == path),
            "unclaimed output {}",
            path.display()
        );
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        }
        fs::write(path, contents).map_err(|e| io(path, e))
    }

    /// Writes the manifest to `path` (claimed here as well).
    pub fn finish(mut self, path: &Path, config: impl Serialize) -> Result<()> {
        refuse_existing(path)?;
        if !self.outputs.iter().any(|p| p == path) {
            self.outputs.push(path.to_path_buf());
        }
        let manifest = RunManifest {
            command: self.command,
            config: serde_json::to_value(config).map_err(|e| Error::Config(format!("config snapshot: {e}")))?,
            inputs: self.inputs,
            outputs: self.outputs.iter().map(|p| p.display().to_string()).collect(),
            seeds: self.seeds,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            duration_ms: self.started.elapsed().as_millis() as u64,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| io(path, e))
    }
}
