use candle_core::{DType, Device, Tensor, Var, D};

use super::params::{Init, Params};
use crate::dataman::Image;
use crate::error::{bail_input, Result};

pub fn sigmoid(x: &Tensor) -> candle_core::Result<Tensor> {
    (x.neg()?.exp()? + 1.0)?.recip()
}

pub fn softmax_last_dim(x: &Tensor) -> candle_core::Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?;
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    e.broadcast_div(&s)
}

#[derive(Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    stride: usize,
    padding: usize,
    groups: usize,
}

impl Conv2d {
    /// `k`×`k` convolution with "same" padding for odd `k` at stride 1.
    pub fn new(
        p: &Params,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        groups: usize,
        bias: bool,
    ) -> Result<Self> {
        if c_in % groups != 0 || c_out % groups != 0 {
            bail_input!("conv channels {c_in}->{c_out} not divisible by {groups} groups");
        }
        let fan_in = (c_in / groups) * k * k;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = p.var("weight", (c_out, c_in / groups, k, k), Init::Uniform(bound))?;
        let bias = if bias {
            Some(p.var("bias", c_out, Init::Uniform(bound))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding: k / 2,
            groups,
        })
    }

    pub fn zeroed(self) -> Result<Self> {
        self.weight.set(&self.weight.zeros_like()?)?;
        if let Some(b) = &self.bias {
            b.set(&b.zeros_like()?)?;
        }
        Ok(self)
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = super::conv::conv2d(x, &self.weight, self.stride, self.padding, self.groups)?;
        match &self.bias {
            Some(b) => super::channel::add_channel_bias(&y, b),
            None => Ok(y),
        }
    }
}

#[derive(Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Linear {
    pub fn new(p: &Params, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = p.var("weight", (d_out, d_in), Init::Uniform(bound))?;
        let bias = if bias {
            Some(p.var("bias", d_out, Init::Uniform(bound))?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let w = self.weight.as_tensor().t()?;
        let y = match x.rank() {
            2 => x.matmul(&w)?,
            _ => x.broadcast_matmul(&w)?,
        };
        match &self.bias {
            Some(b) => y.broadcast_add(b.as_tensor()),
            None => Ok(y),
        }
    }
}

#[derive(Clone)]
pub struct GroupNorm {
    groups: usize,
    weight: Var,
    bias: Var,
    eps: f64,
}

impl GroupNorm {
    pub fn new(p: &Params, groups: usize, channels: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            bail_input!("{channels} channels not divisible into {groups} groups");
        }
        Ok(Self {
            groups,
            weight: p.var("weight", channels, Init::Ones)?,
            bias: p.var("bias", channels, Init::Zeros)?,
            eps: 1e-5,
        })
    }

    /// Largest divisor of `channels` not exceeding `preferred`.
    pub fn groups_for(channels: usize, preferred: usize) -> usize {
        (1..=preferred.min(channels).max(1))
            .rev()
            .find(|g| channels % g == 0)
            .unwrap_or(1)
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let normed = super::norm::group_standardize(x, self.groups, self.eps)?;
        super::channel::channel_affine(&normed, &self.weight, &self.bias)
    }
}

#[derive(Clone)]
pub struct LayerNorm {
    weight: Var,
    bias: Var,
    eps: f64,
}

impl LayerNorm {
    pub fn new(p: &Params, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: p.var("weight", dim, Init::Ones)?,
            bias: p.var("bias", dim, Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let d = x.dim(D::Minus1)?;
        let rows = x.elem_count() / d;
        let shape = x.shape().clone();
        let normed = super::norm::group_standardize(&x.reshape((rows, d))?, 1, self.eps)?.reshape(shape)?;
        normed
            .broadcast_mul(self.weight.as_tensor())?
            .broadcast_add(self.bias.as_tensor())
    }
}

#[derive(Clone)]
pub struct Embedding {
    pub table: Var,
}

impl Embedding {
    pub fn new(p: &Params, n: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            table: p.var("table", (n, dim), Init::Normal(1.0))?,
        })
    }

    pub fn forward(&self, ids: &[usize]) -> Result<Tensor> {
        let n = self.table.as_tensor().dim(0)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            bail_input!("embedding index {bad} out of range ({n} entries)");
        }
        let idx: Vec<u32> = ids.iter().map(|&i| i as u32).collect();
        let idx = Tensor::from_vec(idx, ids.len(), self.table.device())?;
        Ok(self.table.as_tensor().index_select(&idx, 0)?)
    }
}

/// Stacks images into a `(B, C, H, W)` tensor, mapping each value through `f`.
pub fn images_to_tensor(
    images: &[&Image],
    dtype: DType,
    f: impl Fn(f32) -> f32,
) -> Result<Tensor> {
    let Some(first) = images.first() else {
        bail_input!("empty image batch");
    };
    let (c, h, w) = (first.channels, first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if (img.channels, img.height, img.width) != (c, h, w) {
            bail_input!("image batch has mixed shapes");
        }
        data.extend(img.data.iter().map(|&v| f(v)));
    }
    Ok(Tensor::from_vec(data, (images.len(), c, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn tensor_to_images(t: &Tensor, f: impl Fn(f32) -> f32) -> Result<Vec<Image>> {
    let (b, c, h, w) = t.dims4()?;
    let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let n = c * h * w;
    (0..b)
        .map(|i| Image::new(c, h, w, flat[i * n..(i + 1) * n].iter().map(|&v| f(v)).collect()))
        .collect()
}
