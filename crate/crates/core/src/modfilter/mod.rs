//! Modality-recognition filter and the confidence/budget gate for synthetic images.

mod filter;
mod gate;
mod mcc;

pub use filter::{train_filter, FilterConfig, FilterData, FilterReport, ModalityFilter};
pub use gate::{write_gate_log, FilterDecision, Gate, GateConfig, GateReason};
pub use mcc::{confusion_matrix, mcc_multiclass, ClassMetrics, MulticlassReport};

use crate::dataman::{Image, Label, Modality};
use crate::error::Result;

/// One generated image awaiting the gate.
pub struct Candidate<'a> {
    pub image_id: String,
    pub image: &'a Image,
    pub modality: Modality,
    pub label: Label,
}

/// Runs the filter over `stream` in order and folds the decisions through a
/// fresh gate. Returns every decision; accepted ones have `accepted == true`.
pub fn gate_synthetic(stream: &[Candidate<'_>], model: &ModalityFilter, config: &GateConfig) -> Result<Vec<FilterDecision>> {
    let mut gate = Gate::new(config.clone(), model.config.classes.clone())?;
    let images: Vec<&Image> = stream.iter().map(|c| c.image).collect();
    let probs = model.predict_proba(&images)?;
    stream
        .iter()
        .zip(&probs)
        .map(|(c, p)| gate.decide(&c.image_id, c.modality, c.label, p))
        .collect()
}
