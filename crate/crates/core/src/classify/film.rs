use candle_core::Tensor;

use crate::error::{bail_input, Result};
use crate::nn::{channel_affine, Init, Linear, Params};

/// `scale ⊙ activations + bias` per channel; `scale` and `bias` are `(C,)`
/// or per-sample `(B, C)`.
pub fn film_modulate(activations: &Tensor, scale: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = activations.dims().get(1).copied().unwrap_or(0);
    for (name, t) in [("scale", scale), ("bias", bias)] {
        if t.dims().last() != Some(&c) {
            bail_input!("FiLM {name} has shape {:?} for {c} channels", t.dims());
        }
    }
    Ok(channel_affine(activations, scale, bias)?)
}

/// Learned map from a conditioning embedding to per-channel (scale, bias).
/// Starts as the identity modulation.
#[derive(Clone)]
pub struct Film {
    proj: Linear,
    channels: usize,
}

impl Film {
    pub fn new(p: &Params, embed_dim: usize, channels: usize) -> Result<Self> {
        let proj = Linear {
            weight: p.var("weight", (2 * channels, embed_dim), Init::Zeros)?,
            bias: Some(p.var("bias", 2 * channels, Init::Zeros)?),
        };
        Ok(Self { proj, channels })
    }

    pub fn forward(&self, x: &Tensor, embedding: &Tensor) -> Result<Tensor> {
        let sb = self.proj.forward(embedding)?;
        let scale = (sb.narrow(1, 0, self.channels)? + 1.0)?;
        let bias = sb.narrow(1, self.channels, self.channels)?;
        film_modulate(x, &scale, &bias)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        let n = shape.iter().product();
        let v: Vec<f64> = crate::rng::normal_vec(&mut crate::rng::seeded(seed), n)
            .into_iter()
            .map(f64::from)
            .collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn identity_and_zero_scale() {
        let x = rand(&[2, 3, 4, 4], 1);
        let ones = Tensor::ones(3, DType::F64, &Device::Cpu).unwrap();
        let zeros = Tensor::zeros(3, DType::F64, &Device::Cpu).unwrap();
        let y = film_modulate(&x, &ones, &zeros).unwrap();
        let diff = (y - &x).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(diff, 0.0);
        let bias = Tensor::new(&[0.5f64, -1.0, 2.0], &Device::Cpu).unwrap();
        let y = film_modulate(&x, &zeros, &bias).unwrap();
        let v = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (i, val) in v.iter().enumerate() {
            assert_eq!(*val, [0.5, -1.0, 2.0][(i / 16) % 3]);
        }
        assert!(film_modulate(&x, &Tensor::ones(4, DType::F64, &Device::Cpu).unwrap(), &zeros).is_err());
    }

    #[test]
    fn scale_gradient_matches_finite_difference() {
        let x = rand(&[2, 3, 2, 2], 2);
        let s0 = rand(&[2, 3], 3);
        let b = rand(&[2, 3], 4);
        let w = rand(&[2, 3, 2, 2], 5);
        let loss = |s: &Tensor| -> Tensor { (film_modulate(&x, s, &b).unwrap() * &w).unwrap().sum_all().unwrap() };
        let sv = Var::from_tensor(&s0).unwrap();
        let grads = loss(sv.as_tensor()).backward().unwrap();
        let g = grads.get(sv.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let base = s0.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let h = 1e-6;
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += h;
            let mut minus = base.clone();
            minus[i] -= h;
            let f = |v: Vec<f64>| loss(&Tensor::from_vec(v, (2, 3), &Device::Cpu).unwrap()).to_scalar::<f64>().unwrap();
            let fd = (f(plus) - f(minus)) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(1e-8), "{fd} vs {}", g[i]);
        }
    }
}
