use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::schedule::DiffusionSchedule;
use super::unet::UNet;
use super::{from_model_space, to_model_space};
use crate::dataman::Image;
use crate::error::{bail_input, Error, Result};
use crate::nn::{images_to_tensor, tensor_to_images, Adam, AdamConfig, LrSchedule};
use crate::rng::normal_vec;

/// A network that predicts the noise added to `x_t` at timesteps `t`,
/// conditioned on class labels.
pub trait NoisePredictor {
    fn predict_noise(&self, x_t: &Tensor, t: &[usize], labels: &[usize]) -> Result<Tensor>;
}

fn per_sample(values: Vec<f64>, like: &Tensor) -> Result<Tensor> {
    let n = values.len();
    Ok(Tensor::from_vec(values, (n, 1, 1, 1), like.device())?.to_dtype(like.dtype())?)
}

fn randn_like<R: Rng + ?Sized>(x: &Tensor, rng: &mut R) -> Result<Tensor> {
    let data = normal_vec(rng, x.elem_count());
    Ok(Tensor::from_vec(data, x.shape(), x.device())?.to_dtype(x.dtype())?)
}

/// Closed-form forward process: sqrt(alpha_bar[t])·x0 + sqrt(1 − alpha_bar[t])·eps,
/// with one timestep per batch element.
pub fn q_sample(x0: &Tensor, t: &[usize], eps: &Tensor, schedule: &DiffusionSchedule) -> Result<Tensor> {
    if x0.dims() != eps.dims() {
        bail_input!("noise shape {:?} differs from image shape {:?}", eps.dims(), x0.dims());
    }
    if x0.dim(0)? != t.len() {
        bail_input!("batch of {} with {} timesteps", x0.dim(0)?, t.len());
    }
    for &s in t {
        schedule.check_t(s)?;
    }
    let a = per_sample(t.iter().map(|&s| schedule.alpha_bar(s).sqrt()).collect(), x0)?;
    let b = per_sample(t.iter().map(|&s| (1.0 - schedule.alpha_bar(s)).sqrt()).collect(), x0)?;
    Ok((x0.broadcast_mul(&a)? + eps.broadcast_mul(&b)?)?)
}

/// One step of the forward chain: sqrt(alpha[t])·x + sqrt(beta[t])·eps.
pub fn q_step(x_prev: &Tensor, t: usize, eps: &Tensor, schedule: &DiffusionSchedule) -> Result<Tensor> {
    schedule.check_t(t)?;
    Ok(((x_prev * schedule.alpha(t).sqrt())? + (eps * schedule.beta(t).sqrt())?)?)
}

/// Mean squared error between predicted and true noise.
pub fn noise_prediction_loss<M: NoisePredictor + ?Sized>(
    model: &M,
    schedule: &DiffusionSchedule,
    x0: &Tensor,
    t: &[usize],
    eps: &Tensor,
    labels: &[usize],
) -> Result<Tensor> {
    let x_t = q_sample(x0, t, eps, schedule)?;
    let pred = model.predict_noise(&x_t, t, labels)?;
    Ok((pred - eps)?.sqr()?.mean_all()?)
}

/// Draws timesteps and noise, takes one optimizer step and returns the loss.
/// `x0` is in model space.
pub fn train_step<M: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    model: &M,
    schedule: &DiffusionSchedule,
    optimizer: &mut Adam,
    x0: &Tensor,
    labels: &[usize],
    rng: &mut R,
) -> Result<f64> {
    let b = x0.dim(0)?;
    if labels.len() != b {
        bail_input!("{} labels for batch of {b}", labels.len());
    }
    let t: Vec<usize> = (0..b).map(|_| rng.random_range(0..schedule.len())).collect();
    let eps = randn_like(x0, rng)?;
    let loss = noise_prediction_loss(model, schedule, x0, &t, &eps, labels)?;
    let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !value.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite diffusion loss {value} at step {}",
            optimizer.steps_taken()
        )));
    }
    optimizer.backward_step(&loss)?;
    Ok(value)
}

/// Ancestral sampling of `n` images of shape `(c, h, w)` for one class.
/// Images are generated in chunks of `batch` and returned in [0,1].
pub fn sample<M: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    model: &M,
    schedule: &DiffusionSchedule,
    label: usize,
    n: usize,
    shape: (usize, usize, usize),
    batch: usize,
    rng: &mut R,
) -> Result<Vec<Image>> {
    let mut out = Vec::with_capacity(n);
    let batch = batch.max(1);
    while out.len() < n {
        let b = batch.min(n - out.len());
        let x = sample_batch(model, schedule, label, b, shape, rng)?;
        out.extend(tensor_to_images(&x, from_model_space)?);
    }
    Ok(out)
}

fn sample_batch<M: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    model: &M,
    schedule: &DiffusionSchedule,
    label: usize,
    b: usize,
    (c, h, w): (usize, usize, usize),
    rng: &mut R,
) -> Result<Tensor> {
    let labels = vec![label; b];
    let mut x = Tensor::from_vec(normal_vec(rng, b * c * h * w), (b, c, h, w), &Device::Cpu)?;
    for t in (0..schedule.len()).rev() {
        let eps = model.predict_noise(&x, &vec![t; b], &labels)?.detach();
        let beta = schedule.beta(t);
        let coef = beta / (1.0 - schedule.alpha_bar(t)).sqrt();
        let mean = ((&x - (eps * coef)?)? / schedule.alpha(t).sqrt())?;
        x = if t > 0 {
            let sigma = schedule.posterior_variance(t).sqrt();
            (mean + (randn_like(&x, rng)? * sigma)?)?
        } else {
            mean
        };
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DdpmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub min_lr: f64,
}

impl Default for DdpmTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            optimizer: AdamConfig::default(),
            min_lr: 0.0,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
}

impl TrainLog {
    /// Mean loss over steps `[from, to)`.
    pub fn mean_loss(&self, from: usize, to: usize) -> f64 {
        let s = &self.step_losses[from.min(self.step_losses.len())..to.min(self.step_losses.len())];
        s.iter().sum::<f64>() / s.len().max(1) as f64
    }
}

/// Trains the denoiser on `(image, class)` pairs with Adam and cosine
/// annealing over the whole run. Images are in [0,1].
pub fn train_ddpm<R: Rng + ?Sized>(
    model: &UNet,
    schedule: &DiffusionSchedule,
    data: &[(&Image, usize)],
    config: &DdpmTrainConfig,
    rng: &mut R,
) -> Result<TrainLog> {
    if data.is_empty() {
        bail_input!("no training images");
    }
    if let Some((_, l)) = data.iter().find(|(_, l)| *l >= model.config.num_classes) {
        bail_input!("class {l} outside the model's {} classes", model.config.num_classes);
    }
    let bs = config.batch_size.max(1);
    let steps_per_epoch = data.len().div_ceil(bs);
    let mut optimizer = Adam::new(
        model.params.vars(),
        config.optimizer.clone(),
        LrSchedule::Cosine {
            total_steps: steps_per_epoch * config.epochs,
            min_lr: config.min_lr,
        },
    )?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainLog::default();
    for epoch in 0..config.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(bs) {
            let imgs: Vec<&Image> = chunk.iter().map(|&i| data[i].0).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data[i].1).collect();
            let x0 = images_to_tensor(&imgs, model.params.dtype(), to_model_space)?;
            let loss = train_step(model, schedule, &mut optimizer, &x0, &labels, rng)?;
            log.step_losses.push(loss);
            total += loss;
        }
        let mean = total / steps_per_epoch as f64;
        log::info!("ddpm epoch {}/{}: loss {mean:.5}", epoch + 1, config.epochs);
        log.epoch_losses.push(mean);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{build_schedule, DenoiserConfig};
    use crate::rng::seeded;

    /// Knows the clean image, so it can recover the exact noise from x_t.
    struct Oracle {
        x0: Tensor,
        schedule: DiffusionSchedule,
    }

    impl NoisePredictor for Oracle {
        fn predict_noise(&self, x_t: &Tensor, t: &[usize], _: &[usize]) -> Result<Tensor> {
            let a = per_sample(t.iter().map(|&s| self.schedule.alpha_bar(s).sqrt()).collect(), x_t)?;
            let b = per_sample(
                t.iter().map(|&s| (1.0 - self.schedule.alpha_bar(s)).sqrt()).collect(),
                x_t,
            )?;
            let x0 = self.x0.broadcast_as(x_t.shape())?;
            Ok((x_t - x0.broadcast_mul(&a)?)?.broadcast_div(&b)?)
        }
    }

    struct Zero;

    impl NoisePredictor for Zero {
        fn predict_noise(&self, x_t: &Tensor, _: &[usize], _: &[usize]) -> Result<Tensor> {
            Ok(x_t.zeros_like()?)
        }
    }

    fn randn(shape: (usize, usize, usize, usize), seed: u64) -> Tensor {
        let mut rng = seeded(seed);
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        Tensor::from_vec(normal_vec(&mut rng, n), shape, &Device::Cpu).unwrap()
    }

    fn vals(t: &Tensor) -> Vec<f32> {
        t.flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn q_sample_degenerate_cases() {
        let s = build_schedule(50, 0.01, 0.2).unwrap();
        let x0 = randn((2, 1, 3, 3), 1);
        let eps = randn((2, 1, 3, 3), 2);
        let zero = x0.zeros_like().unwrap();
        let t = [10, 40];
        let y = vals(&q_sample(&x0, &t, &zero, &s).unwrap());
        let x = vals(&x0);
        for (i, (&yv, &xv)) in y.iter().zip(&x).enumerate() {
            let ab = s.alpha_bar(t[i / 9]).sqrt() as f32;
            assert!((yv - ab * xv).abs() < 1e-6);
        }
        let y = vals(&q_sample(&zero, &t, &eps, &s).unwrap());
        let e = vals(&eps);
        for (i, (&yv, &ev)) in y.iter().zip(&e).enumerate() {
            let sd = (1.0 - s.alpha_bar(t[i / 9])).sqrt() as f32;
            assert!((yv - sd * ev).abs() < 1e-6);
        }
        assert!(q_sample(&x0, &[10, 50], &eps, &s).is_err());
    }

    #[test]
    fn q_sample_moments_monte_carlo() {
        let s = build_schedule(100, 0.01, 0.2).unwrap();
        let n = 10_000;
        let t = 30;
        let x0v = 0.7f32;
        let x0 = Tensor::full(x0v, (n, 1, 1, 1), &Device::Cpu).unwrap();
        let eps = randn((n, 1, 1, 1), 3);
        let y: Vec<f64> = vals(&q_sample(&x0, &vec![t; n], &eps, &s).unwrap())
            .into_iter()
            .map(f64::from)
            .collect();
        let mean = y.iter().sum::<f64>() / n as f64;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let ab = s.alpha_bar(t);
        let se_mean = ((1.0 - ab) / n as f64).sqrt();
        let se_var = (1.0 - ab) * (2.0 / (n - 1) as f64).sqrt();
        assert!((mean - ab.sqrt() * x0v as f64).abs() < 3.0 * se_mean);
        assert!((var - (1.0 - ab)).abs() < 3.0 * se_var);
    }

    #[test]
    fn oracle_and_zero_losses() {
        let s = build_schedule(100, 0.01, 0.2).unwrap();
        let x0 = randn((64, 1, 8, 8), 4);
        let eps = randn((64, 1, 8, 8), 5);
        let mut rng = seeded(6);
        let t: Vec<usize> = (0..64).map(|_| rng.random_range(0..100)).collect();
        let oracle = Oracle {
            x0: x0.clone(),
            schedule: s.clone(),
        };
        let l = noise_prediction_loss(&oracle, &s, &x0, &t, &eps, &[0; 64])
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!(l < 1e-8, "oracle loss {l}");
        let l = noise_prediction_loss(&Zero, &s, &x0, &t, &eps, &[0; 64])
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        // 4096 unit normals: mean of squares has sd sqrt(2/4096) ≈ 0.022
        assert!((l - 1.0).abs() < 0.07, "zero-model loss {l}");
    }

    #[test]
    fn oracle_reverse_loop_recovers_image() {
        let s = build_schedule(200, 0.0015 * 5.0, 0.0195 * 5.0).unwrap();
        let img = Image::from_fn(8, 8, |y, x| ((x + y) as f32 / 14.0).clamp(0.0, 1.0));
        let x0 = images_to_tensor(&[&img], DType::F32, to_model_space).unwrap();
        let oracle = Oracle { x0, schedule: s.clone() };
        let out = sample(&oracle, &s, 0, 2, (1, 8, 8), 2, &mut seeded(7)).unwrap();
        for o in out {
            let mae: f32 =
                o.data.iter().zip(&img.data).map(|(a, b)| (a - b).abs()).sum::<f32>() / 64.0;
            assert!(mae < 1e-3, "mae {mae}");
        }
    }

    #[test]
    fn sampling_is_deterministic_and_label_sensitive() {
        let cfg = DenoiserConfig {
            in_channels: 1,
            channels: vec![8, 16],
            res_blocks: 1,
            attention_levels: vec![false, true],
            head_channels: 8,
            num_classes: 2,
            time_embed_dim: 16,
            norm_groups: 4,
        };
        let net = UNet::new(cfg, 3).unwrap();
        // A few steps so the zero-initialised output layer becomes active.
        let s = build_schedule(10, 0.05, 0.3).unwrap();
        let img = Image::from_fn(8, 8, |y, _| y as f32 / 7.0);
        let data = [(&img, 0usize), (&img, 1usize)];
        let tc = DdpmTrainConfig {
            epochs: 3,
            batch_size: 2,
            ..Default::default()
        };
        train_ddpm(&net, &s, &data, &tc, &mut seeded(0)).unwrap();

        assert!(sample(&net, &s, 0, 0, (1, 8, 8), 4, &mut seeded(1)).unwrap().is_empty());
        let a = sample(&net, &s, 0, 2, (1, 8, 8), 4, &mut seeded(1)).unwrap();
        let b = sample(&net, &s, 0, 2, (1, 8, 8), 4, &mut seeded(1)).unwrap();
        let c = sample(&net, &s, 1, 2, (1, 8, 8), 4, &mut seeded(1)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.iter().all(|i| i.data.iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn train_step_rejects_non_finite_loss() {
        struct Nan;
        impl NoisePredictor for Nan {
            fn predict_noise(&self, x: &Tensor, _: &[usize], _: &[usize]) -> Result<Tensor> {
                Ok((x.zeros_like()? + f64::NAN)?)
            }
        }
        let s = build_schedule(10, 0.05, 0.3).unwrap();
        let mut opt = Adam::new(vec![], AdamConfig::default(), LrSchedule::Constant).unwrap();
        let x = randn((1, 1, 4, 4), 0);
        let err = train_step(&Nan, &s, &mut opt, &x, &[0], &mut seeded(0)).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
    }
}
