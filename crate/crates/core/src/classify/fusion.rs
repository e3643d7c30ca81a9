use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::{focal_loss_logits, sampler_weights, WeightedSampler};
use super::records::PredictionRecord;
use crate::dataman::{Label, Modality, Split};
use crate::error::{bail_input, Error, Result};
use crate::evalkit::MetricsReport;
use crate::nn::{load_checkpoint, save_checkpoint, sigmoid, Adam, AdamConfig, LrSchedule, Linear, Params};

const CHECKPOINT_KIND: &str = "fusion";
use crate::rng::{derive_seed, seeded};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub use_metadata: bool,
    pub hidden: [usize; 2],
    pub modalities: Vec<Modality>,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub weighted_sampling: bool,
    pub seed: u64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            use_metadata: false,
            hidden: [16, 8],
            modalities: Modality::PIPELINE.to_vec(),
            epochs: 200,
            batch_size: 16,
            optimizer: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            weighted_sampling: true,
            seed: 0,
        }
    }
}

impl FusionConfig {
    pub fn input_width(&self) -> usize {
        self.modalities.len() + if self.use_metadata { 2 } else { 0 }
    }

    pub fn tag(&self) -> &'static str {
        if self.use_metadata {
            "MULTIMODAL+META"
        } else {
            "MULTIMODAL"
        }
    }
}

/// Three-layer fully connected head over unimodal scores (and metadata).
#[derive(Clone)]
pub struct FusionModel {
    pub params: Params,
    pub config: FusionConfig,
    layers: [Linear; 3],
}

impl FusionModel {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        save_checkpoint(path, CHECKPOINT_KIND, &self.config, &self.params, &[])
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let ckpt = load_checkpoint(path)?;
        ckpt.expect_kind(CHECKPOINT_KIND)?;
        let model = Self::new(&ckpt.config()?)?;
        ckpt.apply(&model.params)?;
        Ok(model)
    }

    pub fn new(config: &FusionConfig) -> Result<Self> {
        if config.modalities.is_empty() || config.hidden.contains(&0) {
            bail_input!("fusion needs at least one modality and nonzero hidden widths");
        }
        let params = Params::new(derive_seed(config.seed, &format!("fusion/{}", config.tag())), DType::F32);
        let [h1, h2] = config.hidden;
        let layers = [
            Linear::new(&params.pp("fc1"), config.input_width(), h1, true)?,
            Linear::new(&params.pp("fc2"), h1, h2, true)?,
            Linear::new(&params.pp("fc3"), h2, 1, true)?,
        ];
        Ok(Self {
            params,
            config: config.clone(),
            layers,
        })
    }

    /// Input rows: the modality scores in configured order, then metadata.
    pub fn inputs(&self, records: &[PredictionRecord]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(records.len() * self.config.input_width());
        for r in records {
            for m in &self.config.modalities {
                let p = r
                    .p_neg
                    .get(m)
                    .ok_or_else(|| Error::Missing(format!("eye {} has no {m} prediction", r.eye_id)))?;
                data.push(*p as f32);
            }
            if self.config.use_metadata {
                let md = r
                    .metadata
                    .ok_or_else(|| Error::Missing(format!("eye {} has no metadata", r.eye_id)))?;
                data.extend(md.iter().map(|&v| v as f32));
            }
        }
        Ok(Tensor::from_vec(data, (records.len(), self.config.input_width()), &Device::Cpu)?)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.layers[0].forward(x)?.relu()?;
        let h = self.layers[1].forward(&h)?.relu()?;
        Ok(self.layers[2].forward(&h)?.squeeze(1)?)
    }

    pub fn predict_p_neg(&self, records: &[PredictionRecord]) -> Result<Vec<f64>> {
        if records.is_empty() {
            return Ok(Vec::new());
        }
        let p = sigmoid(&self.logits(&self.inputs(records)?)?)?;
        Ok(p.to_dtype(DType::F64)?.to_vec1::<f64>()?)
    }

    pub fn evaluate(&self, records: &[PredictionRecord], split: Split, regime: &str) -> Result<MetricsReport> {
        let labels: Vec<Label> = records.iter().map(|r| r.label).collect();
        MetricsReport::from_p_neg(&self.predict_p_neg(records)?, &labels, split, regime)
    }
}

/// Trains the fusion head on `train` and keeps the last epoch. Unimodal
/// models are not involved: only their recorded outputs are read.
pub fn train_multimodal(train: &[PredictionRecord], config: &FusionConfig) -> Result<(FusionModel, Vec<f64>)> {
    if train.iter().any(|r| r.label == Label::Unknown) {
        bail_input!("fusion training records must have known labels");
    }
    let model = FusionModel::new(config)?;
    let x = model.inputs(train)?;
    let targets: Vec<bool> = train.iter().map(|r| r.label == Label::Neg).collect();
    let y = Tensor::from_vec(
        targets.iter().map(|&t| if t { 1f32 } else { 0.0 }).collect::<Vec<_>>(),
        targets.len(),
        &Device::Cpu,
    )?;
    let sampler = if config.weighted_sampling {
        Some(WeightedSampler::new(&sampler_weights(&targets)?)?)
    } else {
        sampler_weights(&targets)?;
        None
    };
    let mut opt = Adam::new(model.params.vars(), config.optimizer.clone(), LrSchedule::Constant)?;
    let mut rng = seeded(derive_seed(config.seed, &format!("fusion/{}/train", config.tag())));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let draws = match &sampler {
            Some(s) => s.epoch(&mut rng),
            None => {
                order.shuffle(&mut rng);
                order.clone()
            }
        };
        let mut total = 0.0;
        for chunk in draws.chunks(config.batch_size.max(1)) {
            let idx = Tensor::from_vec(chunk.iter().map(|&i| i as u32).collect::<Vec<_>>(), chunk.len(), &Device::Cpu)?;
            let xb = x.index_select(&idx, 0)?;
            let yb = y.index_select(&idx, 0)?;
            let loss = focal_loss_logits(&model.logits(&xb)?, &yb, config.focal_gamma, config.focal_alpha)?;
            let v = loss.to_scalar::<f32>()? as f64;
            if !v.is_finite() {
                return Err(Error::Numerical(format!("fusion loss became {v}")));
            }
            opt.backward_step(&loss)?;
            total += v * chunk.len() as f64;
        }
        losses.push(total / draws.len() as f64);
    }
    Ok((model, losses))
}
