// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run manifests and the output writer that feeds them.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statetrack::ModelInfo;

use crate::config::ExperimentConfig;
use crate::RunError;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputEntry {
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config_hash: String,
    pub created_at: String,
    pub model_info: ModelInfo,
    pub config: ExperimentConfig,
    pub outputs: Vec<OutputEntry>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = fs::read_to_string(path).map_err(RunError::io(path))?;
        serde_json::from_str(&text)
            .map_err(|e| RunError::MalformedResultFile { path: path.to_owned(), reason: e.to_string() })
    }

    /// Checks that a manifest can be replayed by this build against `info`.
    pub fn check_environment(&self, command: &str, info: &ModelInfo) -> Result<(), RunError> {
        if self.config.hash() != self.config_hash {
            return Err(RunError::ManifestDrift("config does not match its recorded hash".into()));
        }
        if self.command != command {
            return Err(RunError::ManifestDrift(format!("manifest is for `{}`, not `{command}`", self.command)));
        }
        if self.tool_version != TOOL_VERSION {
            return Err(RunError::ManifestDrift(format!(
                "tool version {} recorded, running {TOOL_VERSION}",
                self.tool_version
            )));
        }
        if &self.model_info != info {
            return Err(RunError::ManifestDrift(format!(
                "model info changed: recorded {:?}, now {info:?}",
                self.model_info
            )));
        }
        Ok(())
    }

    /// Compares a fresh run's outputs against the recorded ones.
    pub fn check_outputs(&self, fresh: &RunManifest) -> Result<(), RunError> {
        let mut problems = Vec::new();
        for old in &self.outputs {
            match fresh.outputs.iter().find(|n| n.path == old.path) {
                None => problems.push(format!("{} was not produced", old.path)),
                Some(n) if n.sha256 != old.sha256 => problems.push(format!("{} differs", old.path)),
                Some(_) => {}
            }
        }
        for new in &fresh.outputs {
            if !self.outputs.iter().any(|o| o.path == new.path) {
                problems.push(format!("{} is new", new.path));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(RunError::ManifestDrift(problems.join("; ")))
        }
    }
}

/// Timestamp for manifests: `SOURCE_DATE_EPOCH` when set, otherwise now.
pub fn timestamp_now() -> String {
    let at = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<i64>().ok())
        .and_then(|secs| DateTime::<Utc>::from_timestamp(secs, 0))
        .unwrap_or_else(Utc::now);
    at.to_rfc3339_opts(SecondsFormat::Secs, true)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes files into a run directory and remembers their hashes.
#[derive(Debug)]
pub struct OutputWriter {
    dir: PathBuf,
    entries: Vec<OutputEntry>,
}

impl OutputWriter {
    pub fn create(dir: &Path) -> Result<Self, RunError> {
        fs::create_dir_all(dir).map_err(RunError::io(dir))?;
        Ok(OutputWriter { dir: dir.to_owned(), entries: Vec::new() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), RunError> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(RunError::io(&path))?;
        self.entries.retain(|e| e.path != name);
        self.entries.push(OutputEntry { path: name.to_owned(), sha256: sha256_hex(bytes), bytes: bytes.len() as u64 });
        Ok(())
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<(), RunError> {
        self.write(name, text.as_bytes())
    }

    /// Writes the manifest as `file_name` and returns it.
    pub fn finish(
        self,
        file_name: &str,
        command: &str,
        config: &ExperimentConfig,
        model_info: ModelInfo,
        created_at: String,
    ) -> Result<RunManifest, RunError> {
        let manifest = RunManifest {
            command: command.to_owned(),
            tool_version: TOOL_VERSION.to_owned(),
            config_hash: config.hash(),
            created_at,
            model_info,
            config: config.clone(),
            outputs: self.entries,
        };
        let path = self.dir.join(file_name);
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        fs::write(&path, text).map_err(RunError::io(&path))?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn info() -> ModelInfo {
        ModelInfo { name: "m".into(), num_layers: 2, num_heads: 2, d_model: 4, vocab_size: 10 }
    }

    #[test]
    fn writer_records_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = OutputWriter::create(dir.path()).unwrap();
        w.write_text("a.txt", "abc").unwrap();
        let m = w.finish("m.json", "gen", &ExperimentConfig::default(), info(), "t".into()).unwrap();
        assert_eq!(m.outputs[0].sha256, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        let loaded = RunManifest::load(&dir.path().join("m.json")).unwrap();
        assert_eq!(loaded, m);
        loaded.check_environment("gen", &info()).unwrap();
        loaded.check_outputs(&m).unwrap();
    }

    #[test]
    fn drift_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = OutputWriter::create(dir.path()).unwrap();
        w.write_text("a.txt", "abc").unwrap();
        let m = w.finish("m.json", "gen", &ExperimentConfig::default(), info(), "t".into()).unwrap();
        assert!(matches!(m.check_environment("patch", &info()), Err(RunError::ManifestDrift(_))));
        let mut other = info();
        other.num_heads = 3;
        assert!(matches!(m.check_environment("gen", &other), Err(RunError::ManifestDrift(_))));
        let mut tampered = m.clone();
        tampered.config.seed = 99;
        assert!(matches!(tampered.check_environment("gen", &info()), Err(RunError::ManifestDrift(_))));
        let mut changed = m.clone();
        changed.outputs[0].sha256 = "00".into();
        assert!(matches!(m.check_outputs(&changed), Err(RunError::ManifestDrift(_))));
    }
}
