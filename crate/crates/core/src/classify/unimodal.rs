use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::data::LabeledImages;
use super::loss::{focal_loss_logits, sampler_weights, WeightedSampler};
use super::model::{Classifier, ClassifierConfig};
use crate::dataman::{augment, AugmentConfig, Image, Label, Modality, Split};
use crate::error::{bail_input, Error, Result};
use crate::evalkit::MetricsReport;
use crate::nn::{images_to_tensor, Adam, AdamConfig, LrSchedule};
use crate::rng::{derive_seed, seeded};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TrainRegime {
    #[serde(rename = "REAL_ONLY")]
    RealOnly,
    #[serde(rename = "SYNTH_ONLY")]
    SynthOnly,
    #[serde(rename = "PRETRAIN_FINETUNE")]
    PretrainFinetune,
}

impl TrainRegime {
    pub const ALL: [TrainRegime; 3] = [TrainRegime::RealOnly, TrainRegime::SynthOnly, TrainRegime::PretrainFinetune];

    pub fn tag(self) -> &'static str {
        match self {
            TrainRegime::RealOnly => "REAL_ONLY",
            TrainRegime::SynthOnly => "SYNTH_ONLY",
            TrainRegime::PretrainFinetune => "PRETRAIN_FINETUNE",
        }
    }

    /// Short name used on the command line and in file names.
    pub fn short(self) -> &'static str {
        match self {
            TrainRegime::RealOnly => "real",
            TrainRegime::SynthOnly => "synth",
            TrainRegime::PretrainFinetune => "pretrain",
        }
    }

    pub fn uses_synthetic(self) -> bool {
        self != TrainRegime::RealOnly
    }
}

impl fmt::Display for TrainRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for TrainRegime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TrainRegime::ALL
            .into_iter()
            .find(|r| r.tag() == s || r.short() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown regime `{s}` (real, synth, pretrain)")))
    }
}

/// One optimisation phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub epochs: usize,
    /// Stop after this many epochs without a lower validation loss; `None`
    /// trains every epoch. The best-epoch parameters are kept either way.
    pub patience: Option<usize>,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// Learning rate is multiplied by `lr_gamma` every `lr_step_epochs`.
    pub lr_step_epochs: usize,
    pub lr_gamma: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub weighted_sampling: bool,
    pub augment: AugmentConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            patience: Some(20),
            batch_size: 16,
            optimizer: AdamConfig::default(),
            lr_step_epochs: 50,
            lr_gamma: 0.5,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            weighted_sampling: true,
            augment: AugmentConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnimodalConfig {
    pub model: ClassifierConfig,
    /// Phase on real images (REAL_ONLY, and the fine-tuning half of PRETRAIN_FINETUNE).
    pub real: FitConfig,
    /// Phase on synthetic images (SYNTH_ONLY, and pretraining).
    pub synthetic: FitConfig,
    pub eval_batch: usize,
    pub seed: u64,
}

impl Default for UnimodalConfig {
    fn default() -> Self {
        Self {
            model: ClassifierConfig::default(),
            real: FitConfig::default(),
            synthetic: FitConfig::default(),
            eval_batch: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitLog {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Zero-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnimodalOutcome {
    pub modality: Modality,
    pub regime: TrainRegime,
    pub val: MetricsReport,
    pub phases: Vec<FitLog>,
}

/// Training inputs for one modality.
#[derive(Debug, Clone, Default)]
pub struct UnimodalData {
    pub train: LabeledImages,
    pub val: LabeledImages,
    /// Gated synthetic pool; required by the synthetic regimes.
    pub synthetic: Option<LabeledImages>,
}

fn check_labels(set: &LabeledImages, what: &str) -> Result<()> {
    if set.is_empty() {
        bail_input!("{what} set is empty");
    }
    if set.labels.contains(&Label::Unknown) {
        bail_input!("{what} set contains UNKNOWN labels");
    }
    Ok(())
}

fn targets_tensor(model: &Classifier, t: &[bool]) -> Result<Tensor> {
    let v: Vec<f32> = t.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    Ok(Tensor::from_vec(v, t.len(), &model.params.device())?.to_dtype(model.params.dtype())?)
}

/// Mean focal loss over a set, without augmentation.
pub fn evaluation_loss(model: &Classifier, set: &LabeledImages, cfg: &FitConfig, batch: usize) -> Result<f64> {
    let targets = set.neg_targets();
    let mut total = 0.0;
    let refs = set.refs();
    let bs = batch.max(1);
    for (k, chunk) in refs.chunks(bs).enumerate() {
        let x = images_to_tensor(chunk, model.params.dtype(), |v| v)?;
        let y = targets_tensor(model, &targets[k * bs..k * bs + chunk.len()])?;
        let l = focal_loss_logits(&model.logits(&x, None)?, &y, cfg.focal_gamma, cfg.focal_alpha)?;
        total += l.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()? * chunk.len() as f64;
    }
    Ok(total / set.len() as f64)
}

/// Trains `model` on `train`, selecting the epoch with the lowest validation
/// loss and restoring its parameters before returning.
pub fn fit<R: Rng + ?Sized>(
    model: &Classifier,
    train: &LabeledImages,
    val: &LabeledImages,
    modality: Modality,
    cfg: &FitConfig,
    eval_batch: usize,
    rng: &mut R,
) -> Result<FitLog> {
    check_labels(train, "training")?;
    check_labels(val, "validation")?;
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        bail_input!("epochs and batch size must be positive");
    }
    let targets = train.neg_targets();
    let sampler = if cfg.weighted_sampling {
        Some(WeightedSampler::new(&sampler_weights(&targets)?)?)
    } else {
        None
    };
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let mut opt = Adam::new(
        model.params.vars(),
        cfg.optimizer.clone(),
        LrSchedule::Step {
            step_size: cfg.lr_step_epochs.max(1) * steps_per_epoch,
            gamma: cfg.lr_gamma,
        },
    )?;
    let mut log = FitLog::default();
    let mut best = (f64::INFINITY, model.params.snapshot()?);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        let draws = match &sampler {
            Some(s) => s.epoch(rng),
            None => {
                order.shuffle(rng);
                order.clone()
            }
        };
        let mut total = 0.0;
        for chunk in draws.chunks(cfg.batch_size) {
            let imgs: Vec<Image> = chunk
                .iter()
                .map(|&i| augment(&train.images[i], modality, &cfg.augment, rng))
                .collect();
            let refs: Vec<&Image> = imgs.iter().collect();
            let x = images_to_tensor(&refs, model.params.dtype(), |v| v)?;
            let y: Vec<bool> = chunk.iter().map(|&i| targets[i]).collect();
            let loss = focal_loss_logits(&model.logits(&x, None)?, &targets_tensor(model, &y)?, cfg.focal_gamma, cfg.focal_alpha)?;
            let value = loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::Numerical(format!("classifier loss became {value} in epoch {epoch}")));
            }
            opt.backward_step(&loss)?;
            total += value * chunk.len() as f64;
        }
        log.train_loss.push(total / draws.len() as f64);
        let vl = evaluation_loss(model, val, cfg, eval_batch)?;
        log.val_loss.push(vl);
        log::debug!("{modality} epoch {}: train {:.5} val {vl:.5}", epoch + 1, total / draws.len() as f64);
        if vl < best.0 {
            best = (vl, model.params.snapshot()?);
            log.best_epoch = epoch;
        } else if let Some(p) = cfg.patience {
            if epoch - log.best_epoch >= p {
                log.stopped_early = true;
                break;
            }
        }
    }
    model.params.restore(&best.1)?;
    Ok(log)
}

/// Validation or test metrics for a trained classifier.
pub fn evaluate(model: &Classifier, set: &LabeledImages, split: Split, regime: &str, batch: usize) -> Result<(Vec<f64>, MetricsReport)> {
    let p_neg = model.predict_p_neg(&set.refs(), None, batch)?;
    let report = MetricsReport::from_p_neg(&p_neg, &set.labels, split, regime)?;
    Ok((p_neg, report))
}

/// Trains one modality's classifier under `regime` and reports validation metrics.
pub fn train_unimodal(
    data: &UnimodalData,
    modality: Modality,
    regime: TrainRegime,
    config: &UnimodalConfig,
) -> Result<(Classifier, UnimodalOutcome)> {
    if config.model.film_embed_dim.is_some() {
        bail_input!("unimodal training does not take FiLM conditioning");
    }
    let tag = format!("{modality}/{}", regime.tag());
    let model = Classifier::new(&config.model, derive_seed(config.seed, &format!("{tag}/init")))?;
    let mut rng = seeded(derive_seed(config.seed, &format!("{tag}/train")));
    let mut phases = Vec::new();
    if regime.uses_synthetic() {
        let synth = data
            .synthetic
            .as_ref()
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::Missing(format!("{modality}: no gated synthetic images for {}", regime.tag())))?;
        phases.push(fit(&model, synth, &data.val, modality, &config.synthetic, config.eval_batch, &mut rng)?);
    }
    if regime != TrainRegime::SynthOnly {
        phases.push(fit(&model, &data.train, &data.val, modality, &config.real, config.eval_batch, &mut rng)?);
    }
    let (_, val) = evaluate(&model, &data.val, Split::Val, regime.tag(), config.eval_batch)?;
    Ok((
        model,
        UnimodalOutcome {
            modality,
            regime,
            val,
            phases,
        },
    ))
}
