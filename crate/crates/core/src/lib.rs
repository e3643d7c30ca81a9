//! Synthetic-data-augmented retinal image classification.
//!
//! The crate is organised the way the pipeline runs:
//!
//! - [`dataman`]: manifests, family-level splits, preprocessing, augmentation, metadata.
//! - [`phantom`]: procedural stand-in images with a controllable class signal.
//! - [`diffusion`]: class-conditional DDPM (schedule, forward process, training, sampling).
//! - [`modfilter`]: modality classifier used as a realism gate for synthetic images.
//! - [`classify`]: unimodal classifiers under three training regimes plus late fusion.
//! - [`evalkit`]: ROC/PR metrics and the memorization/diversity audit.
//! - [`explain`]: Grad-CAM heatmaps.
//!
//! [`nn`] holds the small set of layers, the optimizer and checkpoint I/O shared by
//! every trainable model.

pub mod classify;
pub mod dataman;
pub mod diffusion;
pub mod error;
pub mod evalkit;
pub mod explain;
pub mod modfilter;
pub mod nn;
pub mod phantom;
pub mod plot;
pub mod rng;

pub use error::{Error, Result};
