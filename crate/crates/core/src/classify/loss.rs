use candle_core::Tensor;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::error::{bail_input, Error, Result};

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const EPS: f64 = 1e-7;

/// Mean focal loss −α(1−p_t)^γ log p_t with p_t = p for y = 1 and 1 − p otherwise.
pub fn focal_loss(p: &[f64], y: &[bool], gamma: f64, alpha: f64) -> Result<f64> {
    check_focal(gamma, alpha)?;
    if p.len() != y.len() || p.is_empty() {
        bail_input!("focal loss on {} probabilities and {} labels", p.len(), y.len());
    }
    let mut total = 0.0;
    for (&pi, &yi) in p.iter().zip(y) {
        let pc = pi.clamp(EPS, 1.0 - EPS);
        if !(pc > 0.0 && pc < 1.0) {
            bail_input!("probability {pi} outside (0, 1)");
        }
        let pt = if yi { pc } else { 1.0 - pc };
        total += -alpha * (1.0 - pt).powf(gamma) * pt.ln();
    }
    Ok(total / p.len() as f64)
}

fn check_focal(gamma: f64, alpha: f64) -> Result<()> {
    if !(gamma >= 0.0) {
        bail_input!("focal gamma must be nonnegative, got {gamma}");
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        bail_input!("focal alpha must lie in (0, 1], got {alpha}");
    }
    Ok(())
}

/// Differentiable focal loss on logits `z` (shape `(B,)`) against 0/1
/// `targets`. log p_t is computed as −softplus(−z_t) with z_t = ±z, which
/// stays finite for large logits.
pub fn focal_loss_logits(z: &Tensor, targets: &Tensor, gamma: f64, alpha: f64) -> Result<Tensor> {
    check_focal(gamma, alpha)?;
    let sign = ((targets * 2.0)? - 1.0)?;
    let zt = (z * &sign)?;
    // softplus(−z_t) = max(−z_t, 0) + log(1 + exp(−|z_t|))
    let neg = zt.neg()?;
    let softplus = (neg.relu()? + (zt.abs()?.neg()?.exp()? + 1.0)?.log()?)?;
    let log_pt = softplus.neg()?;
    let loss = if gamma == 0.0 {
        log_pt.neg()?
    } else {
        let one_minus_pt = (1.0 - log_pt.exp()?)?.clamp(0.0, 1.0)?;
        (one_minus_pt.powf(gamma)? * log_pt.neg()?)?
    };
    Ok((loss.mean_all()? * alpha)?)
}

/// Inverse-class-frequency weights, normalised to sum to the record count.
pub fn sampler_weights(labels: &[bool]) -> Result<Vec<f64>> {
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        bail_input!("weighted sampling needs both classes (pos {pos}, neg {neg})");
    }
    let n = labels.len() as f64;
    let (wp, wn) = (n / (2.0 * pos as f64), n / (2.0 * neg as f64));
    Ok(labels.iter().map(|&y| if y { wp } else { wn }).collect())
}

/// Draws record indices with replacement in proportion to their weights.
pub struct WeightedSampler {
    dist: WeightedIndex<f64>,
    len: usize,
}

impl WeightedSampler {
    pub fn new(weights: &[f64]) -> Result<Self> {
        let dist = WeightedIndex::new(weights).map_err(|e| Error::InvalidInput(e.to_string()))?;
        Ok(Self { dist, len: weights.len() })
    }

    /// One epoch's worth of draws (as many as there are records).
    pub fn epoch<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        (0..self.len).map(|_| self.dist.sample(rng)).collect()
    }
}
