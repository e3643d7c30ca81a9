use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::backbone::{global_pool, Backbone, BackboneConfig};
use crate::dataman::Image;
use crate::error::Result;
use crate::nn::{images_to_tensor, load_checkpoint, save_checkpoint, sigmoid, Linear, Params};

const CHECKPOINT_KIND: &str = "classifier";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub backbone: BackboneConfig,
    pub in_channels: usize,
    /// Conditioning embedding width for the FiLM variant; `None` disables FiLM.
    pub film_embed_dim: Option<usize>,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            in_channels: 3,
            film_embed_dim: None,
        }
    }
}

/// Binary classifier whose single output is the logit of P(AmyloidPET negative).
#[derive(Clone)]
pub struct Classifier {
    pub params: Params,
    pub config: ClassifierConfig,
    backbone: Backbone,
    head: Linear,
}

impl Classifier {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        save_checkpoint(path, CHECKPOINT_KIND, &self.config, &self.params, &[])
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let ckpt = load_checkpoint(path)?;
        ckpt.expect_kind(CHECKPOINT_KIND)?;
        let model = Self::new(&ckpt.config()?, 0)?;
        ckpt.apply(&model.params)?;
        Ok(model)
    }

    pub fn new(config: &ClassifierConfig, seed: u64) -> Result<Self> {
        Self::with_dtype(config, seed, DType::F32)
    }

    pub fn with_dtype(config: &ClassifierConfig, seed: u64, dtype: DType) -> Result<Self> {
        let params = Params::new(seed, dtype);
        let backbone = Backbone::new(&params.pp("backbone"), &config.backbone, config.in_channels, config.film_embed_dim)?;
        let head = Linear::new(&params.pp("head"), backbone.out_channels(), 1, true)?;
        Ok(Self {
            params,
            config: config.clone(),
            backbone,
            head,
        })
    }

    /// Layer whose activations [`Self::feature_maps`] returns.
    pub fn cam_layer_name(&self) -> String {
        match self.config.backbone {
            BackboneConfig::EfficientNetB0 { .. } => "backbone.head".into(),
            BackboneConfig::SmallCnn { ref channels, .. } => format!("backbone.stage{}.1", channels.len() - 1),
        }
    }

    pub fn feature_maps(&self, x: &Tensor, cond: Option<&Tensor>) -> Result<Tensor> {
        self.backbone.feature_maps(x, cond)
    }

    /// Logits `(B,)` from last-layer activations.
    pub fn logits_from_features(&self, maps: &Tensor) -> Result<Tensor> {
        Ok(self.head.forward(&global_pool(maps)?)?.squeeze(1)?)
    }

    pub fn logits(&self, x: &Tensor, cond: Option<&Tensor>) -> Result<Tensor> {
        self.logits_from_features(&self.feature_maps(x, cond)?)
    }

    /// P(AmyloidPET negative) per image, evaluated in batches.
    pub fn predict_p_neg(&self, images: &[&Image], cond: Option<&Tensor>, batch: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(images.len());
        for (k, chunk) in images.chunks(batch.max(1)).enumerate() {
            let x = images_to_tensor(chunk, self.params.dtype(), |v| v)?;
            let c = match cond {
                Some(c) => Some(c.narrow(0, k * batch.max(1), chunk.len())?),
                None => None,
            };
            let p = sigmoid(&self.logits(&x, c.as_ref())?)?;
            out.extend(p.to_dtype(DType::F64)?.to_vec1::<f64>()?);
        }
        Ok(out)
    }
}
