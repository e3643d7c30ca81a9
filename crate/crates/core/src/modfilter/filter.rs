use std::path::PathBuf;

use candle_core::{DType, Device, Tensor, D};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::mcc::{confusion_matrix, MulticlassReport};
use crate::classify::{global_pool, Backbone, BackboneConfig};
use crate::dataman::{augment, AugmentConfig, Image, Modality};
use crate::error::{bail_input, Error, Result};
use crate::nn::{images_to_tensor, load_checkpoint, save_checkpoint, softmax_last_dim, Adam, AdamConfig, LrSchedule, Linear, Params};
use crate::rng::{derive_seed, seeded};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub backbone: BackboneConfig,
    pub in_channels: usize,
    /// Width of the first fully connected layer, whose output is the
    /// modality embedding.
    pub embed_dim: usize,
    pub classes: Vec<Modality>,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub augment: AugmentConfig,
    /// Checkpoint holding `backbone.*` tensors to start from; random
    /// initialisation when unset.
    pub pretrained: Option<PathBuf>,
    pub eval_batch: usize,
    pub seed: u64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            in_channels: 3,
            embed_dim: 64,
            classes: Modality::PIPELINE.to_vec(),
            epochs: 100,
            batch_size: 16,
            optimizer: AdamConfig {
                lr: 1e-5,
                weight_decay: 0.1,
                ..AdamConfig::default()
            },
            augment: AugmentConfig::none(),
            pretrained: None,
            eval_batch: 32,
            seed: 0,
        }
    }
}

/// Modality-recognition classifier.
#[derive(Clone)]
pub struct ModalityFilter {
    pub params: Params,
    pub config: FilterConfig,
    backbone: Backbone,
    fc1: Linear,
    fc2: Linear,
}

const CHECKPOINT_KIND: &str = "modality_filter";

impl ModalityFilter {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        save_checkpoint(path, CHECKPOINT_KIND, &self.config, &self.params, &[])
    }

    /// Rebuilds a trained filter; the stored config's `pretrained` path is
    /// not consulted.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let ckpt = load_checkpoint(path)?;
        ckpt.expect_kind(CHECKPOINT_KIND)?;
        let config = FilterConfig {
            pretrained: None,
            ..ckpt.config()?
        };
        let model = Self::new(&config)?;
        ckpt.apply(&model.params)?;
        Ok(model)
    }

    pub fn new(config: &FilterConfig) -> Result<Self> {
        if config.classes.len() < 2 {
            bail_input!("the filter needs at least 2 modalities");
        }
        let params = Params::new(derive_seed(config.seed, "filter/init"), DType::F32);
        let backbone = Backbone::new(&params.pp("backbone"), &config.backbone, config.in_channels, None)?;
        let fc1 = Linear::new(&params.pp("fc1"), backbone.out_channels(), config.embed_dim, true)?;
        let fc2 = Linear::new(&params.pp("fc2"), config.embed_dim, config.classes.len(), true)?;
        let model = Self {
            params,
            config: config.clone(),
            backbone,
            fc1,
            fc2,
        };
        if let Some(path) = &config.pretrained {
            model.load_backbone(path)?;
        }
        Ok(model)
    }

    fn load_backbone(&self, path: &std::path::Path) -> Result<()> {
        let ckpt = load_checkpoint(path)?;
        for (name, var) in self.params.named_vars().into_iter().filter(|(n, _)| n.starts_with("backbone.")) {
            let t = ckpt
                .tensors
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("pretrained weights lack `{name}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!("pretrained `{name}` has shape {:?}", t.dims())));
            }
            var.set(&t.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }

    pub fn class_index(&self, m: Modality) -> Option<usize> {
        self.config.classes.iter().position(|&c| c == m)
    }

    /// Output of the first fully connected layer, `(B, embed_dim)`.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let f = global_pool(&self.backbone.feature_maps(x, None)?)?;
        Ok(self.fc1.forward(&f)?.silu()?)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.fc2.forward(&self.embed(x)?)?)
    }

    /// Class probabilities per image, in `config.classes` order.
    pub fn predict_proba(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(self.config.eval_batch.max(1)) {
            let x = images_to_tensor(chunk, self.params.dtype(), |v| v)?;
            let p = softmax_last_dim(&self.logits(&x)?)?.to_dtype(DType::F64)?;
            out.extend(p.to_vec2::<f64>()?);
        }
        Ok(out)
    }

    pub fn embeddings(&self, images: &[&Image]) -> Result<Tensor> {
        let mut parts = Vec::new();
        for chunk in images.chunks(self.config.eval_batch.max(1)) {
            let x = images_to_tensor(chunk, self.params.dtype(), |v| v)?;
            parts.push(self.embed(&x)?);
        }
        Ok(Tensor::cat(&parts, 0)?)
    }

    pub fn report(&self, images: &[&Image], truth: &[Modality]) -> Result<MulticlassReport> {
        let probs = self.predict_proba(images)?;
        let pred: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
        let t: Vec<usize> = truth
            .iter()
            .map(|m| self.class_index(*m).ok_or_else(|| Error::InvalidInput(format!("{m} is not a filter class"))))
            .collect::<Result<_>>()?;
        MulticlassReport::new(&self.config.classes, confusion_matrix(&t, &pred, self.config.classes.len())?)
    }
}

pub(super) fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

/// Images with their modality, per split.
#[derive(Debug, Clone, Default)]
pub struct FilterData {
    pub train: Vec<(Image, Modality)>,
    pub val: Vec<(Image, Modality)>,
    pub test: Vec<(Image, Modality)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub train_loss: Vec<f64>,
    pub val: MulticlassReport,
    pub test: MulticlassReport,
}

fn cross_entropy(logits: &Tensor, targets: &[usize], k: usize) -> Result<Tensor> {
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    let logp = shifted.broadcast_sub(&lse)?;
    let mut onehot = vec![0f32; targets.len() * k];
    for (i, &t) in targets.iter().enumerate() {
        onehot[i * k + t] = 1.0;
    }
    let onehot = Tensor::from_vec(onehot, (targets.len(), k), &Device::Cpu)?.to_dtype(logits.dtype())?;
    Ok(((logp * onehot)?.sum_all()? / -(targets.len() as f64))?)
}

/// Trains the filter with cross-entropy for a fixed number of epochs.
pub fn train_filter(data: &FilterData, config: &FilterConfig) -> Result<(ModalityFilter, FilterReport)> {
    let model = ModalityFilter::new(config)?;
    let k = config.classes.len();
    let mut targets = Vec::with_capacity(data.train.len());
    for (_, m) in &data.train {
        targets.push(
            model
                .class_index(*m)
                .ok_or_else(|| Error::InvalidInput(format!("{m} is not a filter class")))?,
        );
    }
    for (i, m) in config.classes.iter().enumerate() {
        if !targets.contains(&i) {
            bail_input!("no training images for modality {m}");
        }
    }
    if data.val.is_empty() || data.test.is_empty() {
        bail_input!("filter needs validation and test images");
    }
    let mut opt = Adam::new(model.params.vars(), config.optimizer.clone(), LrSchedule::Constant)?;
    let mut rng = seeded(derive_seed(config.seed, "filter/train"));
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut train_loss = Vec::new();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size.max(1)) {
            let imgs: Vec<Image> = chunk
                .iter()
                .map(|&i| augment(&data.train[i].0, data.train[i].1, &config.augment, &mut rng))
                .collect();
            let refs: Vec<&Image> = imgs.iter().collect();
            let x = images_to_tensor(&refs, model.params.dtype(), |v| v)?;
            let t: Vec<usize> = chunk.iter().map(|&i| targets[i]).collect();
            let loss = cross_entropy(&model.logits(&x)?, &t, k)?;
            let v = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !v.is_finite() {
                return Err(Error::Numerical(format!("filter loss became {v} in epoch {epoch}")));
            }
            opt.backward_step(&loss)?;
            total += v * chunk.len() as f64;
        }
        log::debug!("filter epoch {}: loss {:.5}", epoch + 1, total / order.len() as f64);
        train_loss.push(total / order.len() as f64);
    }
    let split_report = |set: &[(Image, Modality)]| {
        let imgs: Vec<&Image> = set.iter().map(|p| &p.0).collect();
        let truth: Vec<Modality> = set.iter().map(|p| p.1).collect();
        model.report(&imgs, &truth)
    };
    let report = FilterReport {
        train_loss,
        val: split_report(&data.val)?,
        test: split_report(&data.test)?,
    };
    Ok((model, report))
}
