//! Output directory handling: atomic writes, cleanup on failure, manifest.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::{SecondsFormat, Utc};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Tracks the files a command writes so a failed run leaves nothing behind.
pub struct OutputDir {
    dir: PathBuf,
    written: Vec<String>,
    created_dir: bool,
}

impl OutputDir {
    pub fn create(dir: &Path) -> Result<Self> {
        let created_dir = !dir.exists();
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        Ok(OutputDir {
            dir: dir.to_path_buf(),
            written: Vec::new(),
            created_dir,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Writes through a temporary file and a rename.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let target = self.path(name);
        let tmp = self.path(&format!(".{name}.tmp"));
        fs::write(&tmp, bytes).with_context(|| format!("cannot write {}", tmp.display()))?;
        fs::rename(&tmp, &target)
            .with_context(|| format!("cannot move {} into place", target.display()))?;
        if !self.written.iter().any(|w| w == name) {
            self.written.push(name.to_string());
        }
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    pub fn written(&self) -> &[String] {
        &self.written
    }

    /// Removes everything this run wrote, and the directory if the run
    /// created it and it is now empty.
    pub fn discard(self) {
        for name in &self.written {
            let _ = fs::remove_file(self.dir.join(name));
        }
        if self.created_dir {
            let _ = fs::remove_dir(&self.dir);
        }
    }
}

/// Runs `body` against a fresh output directory, removing partial outputs
/// if it fails.
pub fn with_output<T>(dir: &Path, body: impl FnOnce(&mut OutputDir) -> Result<T>) -> Result<T> {
    let mut out = OutputDir::create(dir)?;
    match body(&mut out) {
        Ok(v) => Ok(v),
        Err(e) => {
            out.discard();
            Err(e)
        }
    }
}

#[derive(Debug, Serialize)]
pub struct Manifest<'a, C: Serialize> {
    pub run_id: String,
    pub command: &'a str,
    pub seed: u64,
    pub config: &'a C,
    pub started_at: String,
    pub finished_at: String,
    pub artifacts: Vec<String>,
}

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// Short content hash of the command and its resolved configuration.
pub fn run_id<C: Serialize>(command: &str, config: &C) -> Result<String> {
    let mut h = Sha256::new();
    h.update(command.as_bytes());
    h.update([0]);
    h.update(serde_json::to_vec(config)?);
    Ok(hex::encode(h.finalize())[..12].to_string())
}

/// Writes `manifest.json` listing every artifact written so far.
pub fn write_manifest<C: Serialize>(
    out: &mut OutputDir,
    command: &str,
    seed: u64,
    config: &C,
    started_at: String,
) -> Result<()> {
    let mut artifacts = out.written().to_vec();
    artifacts.push("manifest.json".to_string());
    let manifest = Manifest {
        run_id: run_id(command, config)?,
        command,
        seed,
        config,
        started_at,
        finished_at: now(),
        artifacts,
    };
    out.write_json("manifest.json", &manifest)
}

/// Formats an optional float as an empty CSV cell when absent.
pub fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn join<T: ToString>(items: &[T]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(";")
}
