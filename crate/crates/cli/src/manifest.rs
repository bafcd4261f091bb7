//! One manifest per run: config echo, versions, timing, stage outputs and
//! checksums of every emitted file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use sha2::{Digest, Sha256};

use crate::error::{io_err, CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq)]
pub enum Status {
    Ok,
    Failed { category: String, message: String },
}

#[derive(Debug, Clone)]
pub struct RunManifest {
    pub command: String,
    pub config_echo: String,
    pub version: String,
    pub wall_clock: Duration,
    pub status: Status,
    /// `(stage, key, value)` in emission order.
    pub outputs: Vec<(String, String, String)>,
    /// `(file name, sha256)` relative to the output directory.
    pub files: Vec<(String, String)>,
}

impl RunManifest {
    pub fn new(command: &str, config_echo: String) -> Self {
        Self {
            command: command.to_string(),
            config_echo,
            version: env!("CARGO_PKG_VERSION").to_string(),
            wall_clock: Duration::ZERO,
            status: Status::Ok,
            outputs: Vec::new(),
            files: Vec::new(),
        }
    }

    pub fn output(&mut self, stage: &str, key: &str, value: impl ToString) {
        self.outputs.push((stage.to_string(), key.to_string(), value.to_string()));
    }

    pub fn value(&self, stage: &str, key: &str) -> Option<&str> {
        self.outputs.iter().find(|(s, k, _)| s == stage && k == key).map(|(_, _, v)| v.as_str())
    }

    /// Hashes a file already written into `dir` and records it.
    pub fn record_file(&mut self, dir: &Path, name: &str) -> Result<()> {
        let digest = file_sha256(&dir.join(name))?;
        self.files.retain(|(n, _)| n != name);
        self.files.push((name.to_string(), digest));
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[run]");
        let _ = writeln!(s, "command = {}", self.command);
        let _ = writeln!(s, "exproj_version = {}", self.version);
        let _ = writeln!(s, "wall_clock_seconds = {:?}", self.wall_clock.as_secs_f64());
        match &self.status {
            Status::Ok => {
                let _ = writeln!(s, "status = ok");
            }
            Status::Failed { category, message } => {
                let _ = writeln!(s, "status = failed");
                let _ = writeln!(s, "failure_category = {category}");
                let _ = writeln!(s, "failure = {}", message.replace('\n', " "));
            }
        }
        let _ = writeln!(s, "\n[config]");
        s.push_str(&self.config_echo);
        let _ = writeln!(s, "\n[outputs]");
        for (stage, k, v) in &self.outputs {
            let _ = writeln!(s, "{stage}.{k} = {v}");
        }
        let _ = writeln!(s, "\n[files]");
        for (name, digest) in &self.files {
            let _ = writeln!(s, "{name} = {digest}");
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, self.render()).map_err(io_err(&path))?;
        Ok(path)
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// `(name, sha256)` pairs from the `[files]` section of a manifest.
pub fn read_checksums(manifest: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(manifest).map_err(io_err(manifest))?;
    let mut inside = false;
    let mut out = Vec::new();
    for line in text.lines().map(str::trim) {
        if line.starts_with('[') {
            inside = line == "[files]";
            continue;
        }
        if inside && !line.is_empty() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("bad [files] line `{line}`")))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
    }
    Ok(out)
}

/// Names of files whose current hash differs from the manifest.
pub fn verify_checksums(dir: &Path) -> Result<Vec<String>> {
    let mut bad = Vec::new();
    for (name, digest) in read_checksums(&dir.join(MANIFEST_FILE))? {
        match file_sha256(&dir.join(&name)) {
            Ok(d) if d == digest => {}
            _ => bad.push(name),
        }
    }
    Ok(bad)
}
