//! AmyloidPET classifiers: unimodal CNNs under three training regimes, the
//! FiLM modality-aware variant and late fusion of unimodal scores.

mod backbone;
mod data;
mod film;
mod fusion;
mod loss;
mod model;
mod records;
mod unimodal;

pub use backbone::{global_pool, Backbone, BackboneConfig};
pub use data::LabeledImages;
pub use film::{film_modulate, Film};
pub use fusion::{train_multimodal, FusionConfig, FusionModel};
pub use loss::{focal_loss, focal_loss_logits, sampler_weights, WeightedSampler};
pub use model::{Classifier, ClassifierConfig};
pub use records::{assemble_records, read_predictions, write_predictions, PredictionRecord, PredictionRow};
pub use unimodal::{
    evaluate, evaluation_loss, fit, train_unimodal, FitConfig, FitLog, TrainRegime, UnimodalConfig,
    UnimodalData, UnimodalOutcome,
};
