use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::corr::max_corr_distribution;
use super::dist::{ks_two_sample, wasserstein_1d, KsResult};
use crate::dataman::{Image, Modality};
use crate::error::{bail_input, Result};
use crate::rng::{derive_seed, seeded};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuditConfig {
    /// Synthetic images drawn per modality.
    pub sample_size: usize,
    /// SvR values at or above this count as copies of a real image.
    pub memorization_threshold: f64,
    pub seed: u64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            sample_size: 200,
            memorization_threshold: 0.999,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityAudit {
    pub modality: Modality,
    pub n_real: usize,
    pub n_synthetic: usize,
    /// Max correlation of each sampled synthetic image with the real set.
    pub svr: Vec<f64>,
    /// Max correlation of each real image with the other real images.
    pub rvr: Vec<f64>,
    /// Max correlation of each sampled synthetic image with the other samples.
    pub svs: Vec<f64>,
    pub wd_svr_rvr: f64,
    pub wd_rvr_svs: f64,
    pub ks_svr_rvr: KsResult,
    pub ks_rvr_svs: KsResult,
    /// Number of synthetic images at or above the memorization threshold.
    pub near_copies: usize,
    pub median_svr: f64,
    pub median_rvr: f64,
    /// True when a near-copy exists or synthetic-to-real similarity is
    /// typically higher than real-to-real similarity.
    pub memorization_flag: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub config: AuditConfig,
    pub modalities: Vec<ModalityAudit>,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        (s[m - 1] + s[m]) / 2.0
    }
}

fn flatten(img: &Image) -> Vec<f64> {
    img.data.iter().map(|&v| f64::from(v)).collect()
}

/// Runs the SvR / RvR / SvS audit for one modality.
pub fn audit_modality(
    modality: Modality,
    real: &[Image],
    synthetic: &[Image],
    config: &AuditConfig,
) -> Result<ModalityAudit> {
    if real.len() < 2 || synthetic.len() < 2 {
        bail_input!(
            "{modality}: audit needs at least 2 real and 2 synthetic images ({} / {})",
            real.len(),
            synthetic.len()
        );
    }
    if config.sample_size < 2 {
        bail_input!("audit sample size must be at least 2");
    }
    let mut rng = seeded(derive_seed(config.seed, modality.tag()));
    let take = config.sample_size.min(synthetic.len());
    let mut picked = sample(&mut rng, synthetic.len(), take).into_vec();
    picked.sort_unstable();
    let synth: Vec<Vec<f64>> = picked.iter().map(|&i| flatten(&synthetic[i])).collect();
    let real: Vec<Vec<f64>> = real.iter().map(flatten).collect();

    let svr = max_corr_distribution(&synth, &real, false)?;
    let rvr = max_corr_distribution(&real, &real, true)?;
    let svs = max_corr_distribution(&synth, &synth, true)?;
    let near_copies = svr
        .iter()
        .filter(|&&r| r >= config.memorization_threshold)
        .count();
    let median_svr = median(&svr);
    let median_rvr = median(&rvr);
    Ok(ModalityAudit {
        modality,
        n_real: real.len(),
        n_synthetic: synth.len(),
        wd_svr_rvr: wasserstein_1d(&svr, &rvr)?,
        wd_rvr_svs: wasserstein_1d(&rvr, &svs)?,
        ks_svr_rvr: ks_two_sample(&svr, &rvr)?,
        ks_rvr_svs: ks_two_sample(&rvr, &svs)?,
        memorization_flag: near_copies > 0 || median_svr > median_rvr,
        near_copies,
        median_svr,
        median_rvr,
        svr,
        rvr,
        svs,
    })
}
