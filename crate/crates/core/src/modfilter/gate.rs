use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataman::{Label, Modality};
use crate::error::{bail_input, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    /// Minimum confidence per generation modality; absent means any
    /// correct-modality prediction passes.
    pub thresholds: BTreeMap<Modality, f64>,
    /// Accepted images per (modality, class).
    pub budget: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            thresholds: BTreeMap::from([
                (Modality::OctaSmac, 0.90),
                (Modality::OctBonh, 0.99),
                (Modality::OctBmac, 0.96),
            ]),
            budget: 1000,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            bail_input!("gate budget must be positive");
        }
        if let Some((m, t)) = self.thresholds.iter().find(|(_, t)| !(0.0..=1.0).contains(*t)) {
            bail_input!("threshold {t} for {m} outside [0, 1]");
        }
        Ok(())
    }

    pub fn threshold(&self, m: Modality) -> Option<f64> {
        self.thresholds.get(&m).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateReason {
    Passed,
    WrongModality,
    LowConfidence,
    Budget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub image_id: String,
    pub generation_modality: Modality,
    pub label: Label,
    pub predicted_modality: Modality,
    /// Probability of each filter class, in the filter's class order.
    pub confidence: Vec<f64>,
    /// Confidence of the predicted class.
    pub predicted_confidence: f64,
    pub threshold_used: Option<f64>,
    pub accepted: bool,
    pub reason: GateReason,
}

/// Sequential gate with per-(modality, class) budget counters.
pub struct Gate {
    config: GateConfig,
    classes: Vec<Modality>,
    accepted: BTreeMap<(Modality, Label), usize>,
}

impl Gate {
    pub fn new(config: GateConfig, classes: Vec<Modality>) -> Result<Self> {
        config.validate()?;
        if classes.is_empty() {
            bail_input!("gate needs the filter's class list");
        }
        Ok(Self {
            config,
            classes,
            accepted: BTreeMap::new(),
        })
    }

    pub fn accepted_count(&self, m: Modality, label: Label) -> usize {
        self.accepted.get(&(m, label)).copied().unwrap_or(0)
    }

    /// True once every (modality, class) in `wanted` is at budget.
    pub fn is_full(&self, wanted: &[(Modality, Label)]) -> bool {
        wanted.iter().all(|&(m, l)| self.accepted_count(m, l) >= self.config.budget)
    }

    pub fn decide(&mut self, image_id: &str, generation_modality: Modality, label: Label, probs: &[f64]) -> Result<FilterDecision> {
        if probs.len() != self.classes.len() {
            bail_input!("{} probabilities for {} filter classes", probs.len(), self.classes.len());
        }
        let (best, &conf) = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("nonempty");
        let predicted = self.classes[best];
        let threshold = self.config.threshold(generation_modality);
        let reason = if predicted != generation_modality {
            GateReason::WrongModality
        } else if threshold.is_some_and(|t| conf < t) {
            GateReason::LowConfidence
        } else if self.accepted_count(generation_modality, label) >= self.config.budget {
            GateReason::Budget
        } else {
            GateReason::Passed
        };
        let accepted = reason == GateReason::Passed;
        if accepted {
            *self.accepted.entry((generation_modality, label)).or_insert(0) += 1;
        }
        Ok(FilterDecision {
            image_id: image_id.to_string(),
            generation_modality,
            label,
            predicted_modality: predicted,
            confidence: probs.to_vec(),
            predicted_confidence: conf,
            threshold_used: threshold,
            accepted,
            reason,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct LogRow {
    image_id: String,
    generation_modality: Modality,
    label: Label,
    predicted: Modality,
    confidence: f64,
    threshold: String,
    decision: String,
    reason: GateReason,
}

/// Writes one tab-separated line per decision.
pub fn write_gate_log(decisions: &[FilterDecision], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_writer(f);
    for d in decisions {
        w.serialize(LogRow {
            image_id: d.image_id.clone(),
            generation_modality: d.generation_modality,
            label: d.label,
            predicted: d.predicted_modality,
            confidence: d.predicted_confidence,
            threshold: d.threshold_used.map(|t| t.to_string()).unwrap_or_else(|| "none".into()),
            decision: if d.accepted { "accept" } else { "reject" }.into(),
            reason: d.reason,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
