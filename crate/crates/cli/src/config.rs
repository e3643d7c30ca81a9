use std::fs;
use std::path::{Path, PathBuf};

use retsynth::classify::{BackboneConfig, ClassifierConfig, FitConfig, FusionConfig, UnimodalConfig};
use retsynth::dataman::{AugmentConfig, Modality, PreprocessConfig, SplitConfig};
use retsynth::diffusion::{DdpmTrainConfig, DenoiserConfig, ScheduleConfig};
use retsynth::evalkit::AuditConfig;
use retsynth::modfilter::{FilterConfig, GateConfig};
use retsynth::nn::AdamConfig;
use retsynth::phantom::PhantomConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const OUTPUT_DIR_ENV: &str = "RETSYNTH_OUTPUT_DIR";
pub const WORKERS_ENV: &str = "RETSYNTH_WORKERS";

/// Where the real images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSource {
    /// Generate procedural phantoms.
    Phantom(PhantomConfig),
    /// Read `manifest.tsv` (and optional `metadata.tsv`) from a directory.
    Manifest { dir: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionParams {
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserConfig,
    pub train: DdpmTrainConfig,
    /// Images generated per (modality, class) before gating.
    pub pool_per_class: usize,
    pub sample_batch: usize,
}

impl Default for DiffusionParams {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig::default(),
            denoiser: DenoiserConfig::default(),
            train: DdpmTrainConfig::default(),
            pool_per_class: 1500,
            sample_batch: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainParams {
    /// Test images per class rendered for each model.
    pub per_class: usize,
    pub columns: usize,
}

impl Default for ExplainParams {
    fn default() -> Self {
        Self {
            per_class: 4,
            columns: 4,
        }
    }
}

/// Everything a run needs. A copy is written to the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Thread cap for intra-stage parallelism; 0 uses every core.
    pub workers: usize,
    pub dataset: DatasetSource,
    /// Modalities the generator and classifiers are built for.
    pub modalities: Vec<Modality>,
    pub split: SplitConfig,
    pub preprocess: PreprocessConfig,
    pub diffusion: DiffusionParams,
    pub filter: FilterConfig,
    pub gate: GateConfig,
    pub audit: AuditConfig,
    pub unimodal: UnimodalConfig,
    pub fusion: FusionConfig,
    pub explain: ExplainParams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            workers: 0,
            dataset: DatasetSource::Phantom(PhantomConfig {
                side: 256,
                ..PhantomConfig::default()
            }),
            modalities: Modality::PIPELINE.to_vec(),
            split: SplitConfig::default(),
            preprocess: PreprocessConfig::default(),
            diffusion: DiffusionParams::default(),
            filter: FilterConfig::default(),
            gate: GateConfig::default(),
            audit: AuditConfig::default(),
            unimodal: UnimodalConfig::default(),
            fusion: FusionConfig::default(),
            explain: ExplainParams::default(),
        }
    }
}

impl ExperimentConfig {
    /// Single-channel 32-pixel phantoms, small networks and short schedules:
    /// the whole pipeline fits a CPU budget of well under an hour.
    pub fn desk() -> Self {
        let fit = |epochs, patience| FitConfig {
            epochs,
            patience: Some(patience),
            lr_step_epochs: 10,
            augment: AugmentConfig::none(),
            ..FitConfig::default()
        };
        let small = BackboneConfig::small_cnn();
        Self {
            output_dir: PathBuf::from("runs/desk"),
            dataset: DatasetSource::Phantom(PhantomConfig {
                side: 64,
                n_families: 75,
                metadata_signal: 0.5,
                ..PhantomConfig::default()
            }),
            preprocess: PreprocessConfig {
                side: 32,
                channels: 1,
                ..PreprocessConfig::default()
            },
            diffusion: DiffusionParams {
                schedule: ScheduleConfig::desk(),
                denoiser: DenoiserConfig {
                    in_channels: 1,
                    head_channels: 16,
                    ..DenoiserConfig::desk()
                },
                train: DdpmTrainConfig {
                    epochs: 150,
                    batch_size: 16,
                    optimizer: AdamConfig {
                        lr: 2e-3,
                        ..AdamConfig::default()
                    },
                    min_lr: 1e-5,
                },
                pool_per_class: 48,
                sample_batch: 24,
            },
            filter: FilterConfig {
                backbone: small.clone(),
                in_channels: 1,
                embed_dim: 32,
                epochs: 12,
                optimizer: AdamConfig {
                    lr: 1e-3,
                    weight_decay: 1e-4,
                    ..AdamConfig::default()
                },
                ..FilterConfig::default()
            },
            gate: GateConfig {
                budget: 40,
                ..GateConfig::default()
            },
            audit: AuditConfig {
                sample_size: 60,
                ..AuditConfig::default()
            },
            unimodal: UnimodalConfig {
                model: ClassifierConfig {
                    backbone: small,
                    in_channels: 1,
                    film_embed_dim: None,
                },
                real: fit(30, 8),
                synthetic: fit(20, 6),
                ..UnimodalConfig::default()
            },
            fusion: FusionConfig {
                epochs: 150,
                ..FusionConfig::default()
            },
            explain: ExplainParams {
                per_class: 2,
                columns: 4,
            },
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> CliResult<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" | "default" => Ok(Self::default()),
            other => Err(CliError::Config(format!("unknown preset `{other}` (desk, paper)"))),
        }
    }

    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string_pretty(self).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Applies `RETSYNTH_OUTPUT_DIR` and `RETSYNTH_WORKERS`.
    pub fn apply_env(&mut self) -> CliResult<()> {
        if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
            if !dir.is_empty() {
                self.output_dir = PathBuf::from(dir);
            }
        }
        if let Ok(w) = std::env::var(WORKERS_ENV) {
            self.workers = w
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{WORKERS_ENV}={w} is not a worker count")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |e: retsynth::Error| CliError::Config(e.to_string());
        if let DatasetSource::Phantom(p) = &self.dataset {
            p.validate().map_err(bad)?;
        }
        self.diffusion.denoiser.validate().map_err(bad)?;
        self.diffusion.schedule.build().map_err(bad)?;
        self.unimodal.model.backbone.validate().map_err(bad)?;
        self.filter.backbone.validate().map_err(bad)?;
        self.gate.validate().map_err(bad)?;
        if self.preprocess.side % self.diffusion.denoiser.size_multiple() != 0 {
            return Err(CliError::Config(format!(
                "preprocess side {} is not a multiple of {} required by the denoiser",
                self.preprocess.side,
                self.diffusion.denoiser.size_multiple()
            )));
        }
        let c = self.preprocess.channels;
        for (what, n) in [
            ("diffusion.denoiser.in_channels", self.diffusion.denoiser.in_channels),
            ("filter.in_channels", self.filter.in_channels),
            ("unimodal.model.in_channels", self.unimodal.model.in_channels),
        ] {
            if n != c {
                return Err(CliError::Config(format!("{what} = {n} but preprocess.channels = {c}")));
            }
        }
        if self.diffusion.denoiser.num_classes != 2 {
            return Err(CliError::Config("the denoiser must have two classes (POS, NEG)".into()));
        }
        if self.modalities.is_empty() {
            return Err(CliError::Config("no modalities configured".into()));
        }
        if let DatasetSource::Phantom(p) = &self.dataset {
            if let Some(m) = self.modalities.iter().find(|m| !p.modalities.contains(m)) {
                return Err(CliError::Config(format!("phantom dataset does not render {m}")));
            }
        }
        if let Some(m) = self.modalities.iter().find(|m| !self.filter.classes.contains(m)) {
            return Err(CliError::Config(format!("filter.classes lacks {m}")));
        }
        if self.fusion.modalities.is_empty() {
            return Err(CliError::Config("fusion.modalities is empty".into()));
        }
        if let Some(m) = self.fusion.modalities.iter().find(|m| !self.modalities.contains(m)) {
            return Err(CliError::Config(format!("fusion uses {m}, which is not in modalities")));
        }
        Ok(())
    }

    /// Digest of everything that affects results; the output directory and
    /// worker count are excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.workers = 0;
        let json = serde_json::to_string(&c).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
