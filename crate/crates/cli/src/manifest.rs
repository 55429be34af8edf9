//! Run manifests: what was run, with which settings, and the digest of
//! every file read or written.

use std::path::{Path, PathBuf};

use anyhow::Context;
use inferno::digest::digest_file;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub digest: String,
    pub role: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rows: Option<usize>,
}

impl FileDigest {
    pub fn of(path: &Path, role: &str) -> anyhow::Result<Self> {
        let digest = digest_file(path).with_context(|| format!("digesting {}", path.display()))?;
        Ok(Self { path: path.to_path_buf(), digest, role: role.to_string(), rows: None })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name; enough to rerun.
    pub args: Vec<String>,
    pub settings: serde_json::Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub tool_version: String,
    pub wall_clock_seconds: f64,
    pub warnings: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, args: Vec<String>) -> Self {
        Self {
            command: command.to_string(),
            args,
            settings: serde_json::Value::Null,
            seeds: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            wall_clock_seconds: 0.0,
            warnings: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path, role: &str) -> anyhow::Result<()> {
        if !self.inputs.iter().any(|f| f.path == path) {
            self.inputs.push(FileDigest::of(path, role)?);
        }
        Ok(())
    }

    pub fn output(&mut self, path: &Path, role: &str) -> anyhow::Result<()> {
        self.outputs.retain(|f| f.path != path);
        self.outputs.push(FileDigest::of(path, role)?);
        Ok(())
    }

    /// [`output`](Self::output) for a data file, recording its row count.
    pub fn output_rows(&mut self, path: &Path, role: &str, rows: usize) -> anyhow::Result<()> {
        self.output(path, role)?;
        if let Some(f) = self.outputs.last_mut() {
            f.rows = Some(rows);
        }
        Ok(())
    }

    pub fn output_digest(&self, role: &str) -> Option<&str> {
        self.outputs.iter().find(|f| f.role == role).map(|f| f.digest.as_str())
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").with_context(|| format!("writing manifest {}", path.display()))
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }

    /// Recorded outputs whose digest differs in `fresh`. Outputs the fresh
    /// run skipped (a table reusing trained models) are digested on disk.
    pub fn mismatches(&self, fresh: &RunManifest) -> Vec<String> {
        let mut out = Vec::new();
        for f in &self.outputs {
            let current = match fresh.outputs.iter().find(|g| g.path == f.path) {
                Some(g) => Some(g.digest.clone()),
                None => digest_file(&f.path).ok(),
            };
            match current {
                Some(d) if d == f.digest => {}
                Some(d) => out.push(format!("{}: {} -> {}", f.path.display(), f.digest, d)),
                None => out.push(format!("{}: not produced", f.path.display())),
            }
        }
        out
    }
}
