use rayon::prelude::*;

use crate::dataman::{conform, preprocess, DatasetManifest, Image, ImageRecord, Label, PreprocessConfig, Provenance};
use crate::error::Result;

/// Preprocessed images with their labels and eye ids, in record order.
/// Synthetic records are only conformed to the configured size, since the
/// generator already saw preprocessed images.
#[derive(Debug, Clone, Default)]
pub struct LabeledImages {
    pub images: Vec<Image>,
    pub labels: Vec<Label>,
    pub eye_ids: Vec<String>,
}

impl LabeledImages {
    pub fn load(manifest: &DatasetManifest, records: &[&ImageRecord], config: &PreprocessConfig) -> Result<Self> {
        let images = records
            .par_iter()
            .map(|r| {
                let raw = Image::load_png(&manifest.resolve(r))?;
                match r.provenance {
                    Provenance::Real => preprocess(&raw, r.modality, config),
                    Provenance::Synthetic => conform(&raw, config),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            images,
            labels: records.iter().map(|r| r.label).collect(),
            eye_ids: records.iter().map(|r| r.eye_id.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn refs(&self) -> Vec<&Image> {
        self.images.iter().collect()
    }

    /// True for AmyloidPET-negative records (the model's target).
    pub fn neg_targets(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l == Label::Neg).collect()
    }

    pub fn extend(&mut self, other: LabeledImages) {
        self.images.extend(other.images);
        self.labels.extend(other.labels);
        self.eye_ids.extend(other.eye_ids);
    }
}
