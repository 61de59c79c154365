//! Timestamped run folders and their manifests.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::CliError;

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Config,
    pub seed: u64,
    pub workers: usize,
    /// Absolute paths of everything read.
    pub inputs: Vec<FileDigest>,
    /// Paths relative to the run folder.
    pub outputs: Vec<FileDigest>,
    pub started: DateTime<Utc>,
    pub duration_secs: f64,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Creates `{parent}/{command}-{timestamp}`, adding a counter when the name
/// is taken so an existing folder is never reused.
fn create_unique(parent: &Path, command: &str, started: DateTime<Utc>) -> Result<PathBuf, CliError> {
    fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    let stem = format!("{command}-{}", started.format("%Y%m%dT%H%M%S%.3fZ"));
    for k in 0.. {
        let name = if k == 0 { stem.clone() } else { format!("{stem}-{k}") };
        let dir = parent.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(CliError::io(&dir, e)),
        }
    }
    unreachable!()
}

/// Output folder of one command; every file written through it is recorded.
pub struct Run {
    pub dir: PathBuf,
    command: String,
    config: Config,
    seed: u64,
    workers: usize,
    inputs: Vec<FileDigest>,
    outputs: Vec<PathBuf>,
    started: DateTime<Utc>,
    clock: Instant,
}

impl Run {
    pub fn create(parent: &Path, command: &str, config: Config, seed: u64, workers: usize) -> Result<Self, CliError> {
        let started = Utc::now();
        let dir = create_unique(parent, command, started)?;
        Ok(Self {
            dir,
            command: command.into(),
            config,
            seed,
            workers,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started,
            clock: Instant::now(),
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let sha256 = sha256_file(path)?;
        self.inputs.push(FileDigest {
            path: path.to_path_buf(),
            sha256,
        });
        Ok(())
    }

    /// Absolute path for `rel`, creating parent folders; refuses to overwrite.
    pub fn path(&mut self, rel: impl AsRef<Path>) -> Result<PathBuf, CliError> {
        let rel = rel.as_ref();
        let full = self.dir.join(rel);
        if full.exists() {
            return Err(CliError::Internal(format!("{} already exists", full.display())));
        }
        if let Some(p) = full.parent() {
            fs::create_dir_all(p).map_err(|e| CliError::io(p, e))?;
        }
        self.outputs.push(rel.to_path_buf());
        Ok(full)
    }

    pub fn write(&mut self, rel: impl AsRef<Path>, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.path(rel)?;
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))
    }

    pub fn write_json<T: Serialize>(&mut self, rel: impl AsRef<Path>, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    /// Writes `manifest.json` and returns it.
    pub fn finish(self) -> Result<RunManifest, CliError> {
        let outputs = self
            .outputs
            .iter()
            .map(|rel| {
                Ok(FileDigest {
                    path: rel.clone(),
                    sha256: sha256_file(&self.dir.join(rel))?,
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        let manifest = RunManifest {
            command: self.command,
            config: self.config,
            seed: self.seed,
            workers: self.workers,
            inputs: self.inputs,
            outputs,
            started: self.started,
            duration_secs: self.clock.elapsed().as_secs_f64(),
        };
        let path = self.dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Internal(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
        Ok(manifest)
    }
}
