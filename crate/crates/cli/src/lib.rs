//! Command-line orchestration of the retsynth pipeline.
//!
//! A run directory holds the exact config (`config.toml`), one manifest per
//! finished stage under `stages/`, logs, and every artifact. Downstream
//! stages refuse to run when an upstream stage is missing or was produced
//! under a different config.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;
pub mod rundir;

use clap::Subcommand;
use retsynth::classify::TrainRegime;

pub use config::{DatasetSource, ExperimentConfig};
pub use error::{CliError, CliResult};
pub use rundir::{RunDir, StageManifest};

fn parse_regime(s: &str) -> Result<TrainRegime, String> {
    s.parse().map_err(|e: retsynth::Error| e.to_string())
}

#[derive(Debug, Clone, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate phantoms (or import a manifest) and assign family-level splits.
    Prepare,
    /// Train one class-conditional DDPM per modality.
    TrainDdpm,
    /// Draw the synthetic pool from each DDPM.
    Sample,
    /// Train the modality-recognition filter on real images.
    TrainFilter,
    /// Pass the synthetic pool through the filter and budget gate.
    Gate,
    /// Memorization and diversity audit of the accepted synthetic images.
    Audit,
    /// Train one classifier per modality under a regime.
    TrainUnimodal {
        /// real, synth or pretrain
        #[arg(long, value_parser = parse_regime)]
        regime: TrainRegime,
    },
    /// Train the late-fusion head on frozen unimodal predictions.
    TrainMultimodal {
        /// Feed encoded age and sex to the head.
        #[arg(long)]
        metadata: bool,
        /// Unimodal regime to fuse; every finished regime when omitted.
        #[arg(long, value_parser = parse_regime)]
        regime: Option<TrainRegime>,
    },
    /// Score every trained model on the validation and test splits.
    Evaluate,
    /// Grad-CAM heatmaps for test images.
    Explain,
    /// Comparison grid across regimes and audit figures.
    Report,
    /// Every stage in order.
    All,
}

impl Command {
    /// Name used for the log file.
    pub fn name(&self) -> String {
        match self {
            Command::TrainUnimodal { regime } => pipeline::unimodal_stage(*regime),
            Command::TrainMultimodal { metadata, regime } => match regime {
                Some(r) => pipeline::multimodal_stage(*r, *metadata),
                None => format!("train-multimodal{}", if *metadata { "+meta" } else { "" }),
            },
            other => {
                let dbg = format!("{other:?}");
                let mut s = String::new();
                for (i, ch) in dbg.chars().enumerate() {
                    if ch.is_ascii_uppercase() && i > 0 {
                        s.push('-');
                    }
                    s.push(ch.to_ascii_lowercase());
                }
                s
            }
        }
    }
}

/// Runs one command against an opened run directory.
pub fn run(command: &Command, run: &RunDir) -> CliResult<()> {
    use pipeline::*;
    match command {
        Command::Prepare => prepare(run).map(drop),
        Command::TrainDdpm => train_ddpm_stage(run).map(drop),
        Command::Sample => sample_stage(run).map(drop),
        Command::TrainFilter => train_filter_stage(run).map(drop),
        Command::Gate => gate_stage(run).map(drop),
        Command::Audit => audit_stage(run).map(drop),
        Command::TrainUnimodal { regime } => train_unimodal_stage(run, *regime).map(drop),
        Command::TrainMultimodal { metadata, regime } => {
            let regimes: Vec<TrainRegime> = match regime {
                Some(r) => vec![*r],
                None => {
                    let done: Vec<TrainRegime> = TrainRegime::ALL
                        .into_iter()
                        .filter(|r| matches!(run.stage(&unimodal_stage(*r)), Ok(Some(_))))
                        .collect();
                    if done.is_empty() {
                        return Err(CliError::MissingStage {
                            stage: "train-unimodal".into(),
                            needed_by: command.name(),
                        });
                    }
                    done
                }
            };
            for r in regimes {
                train_multimodal_stage(run, r, *metadata)?;
            }
            Ok(())
        }
        Command::Evaluate => evaluate_stage(run).map(drop),
        Command::Explain => explain_stage(run).map(drop),
        Command::Report => report::report_stage(run).map(drop),
        Command::All => {
            prepare(run)?;
            train_ddpm_stage(run)?;
            sample_stage(run)?;
            train_filter_stage(run)?;
            gate_stage(run)?;
            audit_stage(run)?;
            for r in TrainRegime::ALL {
                train_unimodal_stage(run, r)?;
            }
            for r in TrainRegime::ALL {
                for metadata in [false, true] {
                    train_multimodal_stage(run, r, metadata)?;
                }
            }
            evaluate_stage(run)?;
            explain_stage(run)?;
            report::report_stage(run)?;
            Ok(())
        }
    }
}
