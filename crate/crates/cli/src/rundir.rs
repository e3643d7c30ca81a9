use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

/// What a finished stage leaves behind in `stages/<name>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub config_hash: String,
    /// Config hash of each upstream stage at the time this one ran.
    pub upstream: BTreeMap<String, String>,
    /// Files produced, relative to the run directory.
    pub outputs: Vec<String>,
    pub seconds: f64,
}

/// A run directory: config, per-stage manifests and artifacts.
pub struct RunDir {
    pub root: PathBuf,
    pub config: ExperimentConfig,
    pub hash: String,
    allow_config_change: bool,
}

impl RunDir {
    /// Creates the directory and records the config as `config.toml`, plus an
    /// archived copy under `configs/<hash>.toml`.
    pub fn open(config: ExperimentConfig, allow_config_change: bool) -> CliResult<Self> {
        let root = config.output_dir.clone();
        let hash = config.hash();
        let run = Self {
            root,
            config,
            hash,
            allow_config_change,
        };
        let text = run.config.to_toml()?;
        run.write(&run.path("config.toml"), text.as_bytes())?;
        run.write(&run.path(&format!("configs/{}.toml", run.hash)), text.as_bytes())?;
        Ok(run)
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write(&self, path: &Path, bytes: &[u8]) -> CliResult<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        fs::write(path, bytes).map_err(|e| CliError::io(path, e))
    }

    pub fn write_json<T: Serialize>(&self, path: &Path, value: &T) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(path, text.as_bytes())
    }

    pub fn mkdir(&self, rel: &str) -> CliResult<PathBuf> {
        let p = self.path(rel);
        fs::create_dir_all(&p).map_err(|e| CliError::io(&p, e))?;
        Ok(p)
    }

    fn manifest_path(&self, stage: &str) -> PathBuf {
        self.path(&format!("stages/{stage}.json"))
    }

    pub fn stage(&self, stage: &str) -> CliResult<Option<StageManifest>> {
        let p = self.manifest_path(stage);
        if !p.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
        Ok(Some(serde_json::from_str(&text)?))
    }

    /// The manifest of a finished upstream stage, checked against the
    /// current config hash.
    pub fn require(&self, stage: &str, needed_by: &str) -> CliResult<StageManifest> {
        let m = self.stage(stage)?.ok_or_else(|| CliError::MissingStage {
            stage: stage.to_string(),
            needed_by: needed_by.to_string(),
        })?;
        if m.config_hash != self.hash && !self.allow_config_change {
            return Err(CliError::ConfigChanged {
                stage: stage.to_string(),
                expected: self.hash.clone(),
                found: m.config_hash,
            });
        }
        Ok(m)
    }

    /// Records a finished stage. `outputs` may name files or directories
    /// (listed recursively), relative to the run directory.
    pub fn finish(&self, stage: &str, upstream: &[StageManifest], outputs: &[&str], started: Instant) -> CliResult<StageManifest> {
        let mut files = Vec::new();
        for rel in outputs {
            list_files(&self.root, &self.path(rel), &mut files)?;
        }
        files.sort();
        files.dedup();
        let m = StageManifest {
            stage: stage.to_string(),
            config_hash: self.hash.clone(),
            upstream: upstream
                .iter()
                .map(|u| (u.stage.clone(), u.config_hash.clone()))
                .collect(),
            outputs: files,
            seconds: started.elapsed().as_secs_f64(),
        };
        self.write_json(&self.manifest_path(stage), &m)?;
        log::info!("stage {stage} finished in {:.1}s", m.seconds);
        Ok(m)
    }
}

fn list_files(root: &Path, p: &Path, out: &mut Vec<String>) -> CliResult<()> {
    if p.is_dir() {
        for entry in fs::read_dir(p).map_err(|e| CliError::io(p, e))? {
            let entry = entry.map_err(|e| CliError::io(p, e))?;
            list_files(root, &entry.path(), out)?;
        }
    } else if p.exists() {
        let rel = p.strip_prefix(root).unwrap_or(p);
        out.push(rel.to_string_lossy().replace('\\', "/"));
    }
    Ok(())
}
