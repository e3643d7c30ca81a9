use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::ddpm::NoisePredictor;
use crate::error::{bail_input, Result};
use crate::nn::{
    add_channel_bias, load_checkpoint, save_checkpoint, softmax_last_dim, Conv2d, Embedding, GroupNorm, LayerNorm, Linear,
    Params,
};

const CHECKPOINT_KIND: &str = "unet";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub in_channels: usize,
    /// Channel width of each encoder/decoder level.
    pub channels: Vec<usize>,
    pub res_blocks: usize,
    /// Which levels carry self-attention (by default only the deepest).
    pub attention_levels: Vec<bool>,
    pub head_channels: usize,
    pub num_classes: usize,
    pub time_embed_dim: usize,
    pub norm_groups: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            channels: vec![64, 128, 128],
            res_blocks: 2,
            attention_levels: vec![false, false, true],
            head_channels: 32,
            num_classes: 2,
            time_embed_dim: 256,
            norm_groups: 32,
        }
    }
}

impl DenoiserConfig {
    /// Narrow variant for CPU-budget runs.
    pub fn desk() -> Self {
        Self {
            channels: vec![8, 16, 32],
            res_blocks: 1,
            time_embed_dim: 64,
            norm_groups: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.iter().any(|&c| c == 0) {
            bail_input!("channel widths must be positive: {:?}", self.channels);
        }
        if self.attention_levels.len() != self.channels.len() {
            bail_input!(
                "attention_levels has {} entries for {} levels",
                self.attention_levels.len(),
                self.channels.len()
            );
        }
        for (&c, &a) in self.channels.iter().zip(&self.attention_levels) {
            if a && (self.head_channels == 0 || c % self.head_channels != 0) {
                bail_input!("head channels {} do not divide width {c}", self.head_channels);
            }
        }
        if self.in_channels == 0 || self.num_classes == 0 || self.time_embed_dim == 0 {
            bail_input!("in_channels, num_classes and time_embed_dim must be positive");
        }
        if self.time_embed_dim % 8 != 0 {
            bail_input!("time_embed_dim must be a multiple of 8, got {}", self.time_embed_dim);
        }
        Ok(())
    }

    /// Width of the sinusoidal timestep features.
    pub fn sinusoid_dim(&self) -> usize {
        self.time_embed_dim / 4
    }

    /// Input side must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.channels.len() - 1)
    }
}

/// Timestep and class embeddings and their sum, which conditions every
/// residual block.
pub struct ConditionEmbedding {
    pub timestep: Tensor,
    pub class: Tensor,
    pub combined: Tensor,
}

fn sinusoidal(t: &[usize], dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &step in t {
        let mut sin = Vec::with_capacity(half);
        let mut cos = Vec::with_capacity(half);
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let arg = step as f64 * freq;
            cos.push(arg.cos());
            sin.push(arg.sin());
        }
        data.extend(cos);
        data.extend(sin);
    }
    Ok(Tensor::from_vec(data, (t.len(), dim), &Device::Cpu)?.to_dtype(dtype)?)
}

struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    emb_proj: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(p: &Params, c_in: usize, c_out: usize, emb: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&p.pp("norm1"), GroupNorm::groups_for(c_in, groups), c_in)?,
            conv1: Conv2d::new(&p.pp("conv1"), c_in, c_out, 3, 1, 1, true)?,
            emb_proj: Linear::new(&p.pp("emb_proj"), emb, c_out, true)?,
            norm2: GroupNorm::new(&p.pp("norm2"), GroupNorm::groups_for(c_out, groups), c_out)?,
            conv2: Conv2d::new(&p.pp("conv2"), c_out, c_out, 3, 1, 1, true)?,
            skip: if c_in != c_out {
                Some(Conv2d::new(&p.pp("skip"), c_in, c_out, 1, 1, 1, true)?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor, emb: &Tensor) -> candle_core::Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let e = self.emb_proj.forward(&emb.silu()?)?;
        let h = add_channel_bias(&h, &e)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        match &self.skip {
            Some(s) => s.forward(x)? + h,
            None => x + h,
        }
    }
}

/// Spatial-transformer block: self-attention and a feed-forward layer over
/// the flattened feature map, wrapped in 1×1 projections and a residual.
struct AttentionBlock {
    norm: GroupNorm,
    proj_in: Conv2d,
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    proj_out: Conv2d,
    heads: usize,
}

impl AttentionBlock {
    fn new(p: &Params, c: usize, head_channels: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(&p.pp("norm"), GroupNorm::groups_for(c, groups), c)?,
            proj_in: Conv2d::new(&p.pp("proj_in"), c, c, 1, 1, 1, true)?,
            ln1: LayerNorm::new(&p.pp("ln1"), c)?,
            q: Linear::new(&p.pp("q"), c, c, false)?,
            k: Linear::new(&p.pp("k"), c, c, false)?,
            v: Linear::new(&p.pp("v"), c, c, false)?,
            out: Linear::new(&p.pp("out"), c, c, true)?,
            ln2: LayerNorm::new(&p.pp("ln2"), c)?,
            ff1: Linear::new(&p.pp("ff1"), c, 4 * c, true)?,
            ff2: Linear::new(&p.pp("ff2"), 4 * c, c, true)?,
            proj_out: Conv2d::new(&p.pp("proj_out"), c, c, 1, 1, 1, true)?.zeroed()?,
            heads: c / head_channels,
        })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let n = h * w;
        let d = c / self.heads;
        let t = self.proj_in.forward(&self.norm.forward(x)?)?;
        let t = t.reshape((b, c, n))?.transpose(1, 2)?.contiguous()?;

        let z = self.ln1.forward(&t)?;
        let split = |y: Tensor| -> candle_core::Result<Tensor> {
            y.reshape((b, n, self.heads, d))?
                .transpose(1, 2)?
                .contiguous()
        };
        let q = split(self.q.forward(&z)?)?;
        let k = split(self.k.forward(&z)?)?;
        let v = split(self.v.forward(&z)?)?;
        let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (d as f64).sqrt())?;
        let attn = softmax_last_dim(&scores)?.matmul(&v)?;
        let attn = attn.transpose(1, 2)?.contiguous()?.reshape((b, n, c))?;
        let t = (t + self.out.forward(&attn)?)?;

        let f = self.ff2.forward(&self.ff1.forward(&self.ln2.forward(&t)?)?.gelu()?)?;
        let t = (t + f)?;
        let t = t.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?;
        x + self.proj_out.forward(&t)?
    }
}

struct Level {
    res: Vec<ResBlock>,
    attn: Vec<Option<AttentionBlock>>,
    resample: Option<Conv2d>,
}

/// Conditional U-Net noise predictor.
pub struct UNet {
    pub config: DenoiserConfig,
    pub params: Params,
    time1: Linear,
    time2: Linear,
    class_emb: Embedding,
    conv_in: Conv2d,
    down: Vec<Level>,
    mid1: ResBlock,
    mid_attn: Option<AttentionBlock>,
    mid2: ResBlock,
    up: Vec<Level>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl UNet {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        save_checkpoint(path, CHECKPOINT_KIND, &self.config, &self.params, &[])
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let ckpt = load_checkpoint(path)?;
        ckpt.expect_kind(CHECKPOINT_KIND)?;
        let model = Self::new(ckpt.config()?, 0)?;
        ckpt.apply(&model.params)?;
        Ok(model)
    }

    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        Self::with_dtype(config, seed, DType::F32)
    }

    pub fn with_dtype(config: DenoiserConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let p = Params::new(seed, dtype);
        let ch = &config.channels;
        let e = config.time_embed_dim;
        let g = config.norm_groups;
        let levels = ch.len();
        let attn_block = |p: &Params, c: usize, on: bool| -> Result<Option<AttentionBlock>> {
            if on {
                Ok(Some(AttentionBlock::new(p, c, config.head_channels, g)?))
            } else {
                Ok(None)
            }
        };

        let time1 = Linear::new(&p.pp("time1"), config.sinusoid_dim(), e, true)?;
        let time2 = Linear::new(&p.pp("time2"), e, e, true)?;
        let class_emb = Embedding::new(&p.pp("class_emb"), config.num_classes, e)?;
        let conv_in = Conv2d::new(&p.pp("conv_in"), config.in_channels, ch[0], 3, 1, 1, true)?;

        let mut skips = vec![ch[0]];
        let mut c_prev = ch[0];
        let mut down = Vec::with_capacity(levels);
        for (i, &c) in ch.iter().enumerate() {
            let lp = p.pp(format!("down{i}"));
            let mut res = Vec::new();
            let mut attn = Vec::new();
            for r in 0..config.res_blocks {
                res.push(ResBlock::new(&lp.pp(format!("res{r}")), c_prev, c, e, g)?);
                attn.push(attn_block(&lp.pp(format!("attn{r}")), c, config.attention_levels[i])?);
                c_prev = c;
                skips.push(c);
            }
            let resample = if i + 1 < levels {
                skips.push(c);
                Some(Conv2d::new(&lp.pp("downsample"), c, c, 3, 2, 1, true)?)
            } else {
                None
            };
            down.push(Level {
                res,
                attn,
                resample,
            });
        }

        let c_mid = ch[levels - 1];
        let mid1 = ResBlock::new(&p.pp("mid1"), c_mid, c_mid, e, g)?;
        let mid_attn = attn_block(&p.pp("mid_attn"), c_mid, config.attention_levels[levels - 1])?;
        let mid2 = ResBlock::new(&p.pp("mid2"), c_mid, c_mid, e, g)?;

        let mut up = Vec::with_capacity(levels);
        for i in (0..levels).rev() {
            let c = ch[i];
            let lp = p.pp(format!("up{i}"));
            let mut res = Vec::new();
            let mut attn = Vec::new();
            for r in 0..=config.res_blocks {
                let skip = skips.pop().expect("skip bookkeeping");
                res.push(ResBlock::new(&lp.pp(format!("res{r}")), c_prev + skip, c, e, g)?);
                attn.push(attn_block(&lp.pp(format!("attn{r}")), c, config.attention_levels[i])?);
                c_prev = c;
            }
            let resample = if i > 0 {
                Some(Conv2d::new(&lp.pp("upsample"), c, c, 3, 1, 1, true)?)
            } else {
                None
            };
            up.push(Level {
                res,
                attn,
                resample,
            });
        }
        let norm_out = GroupNorm::new(&p.pp("norm_out"), GroupNorm::groups_for(ch[0], g), ch[0])?;
        let conv_out =
            Conv2d::new(&p.pp("conv_out"), ch[0], config.in_channels, 3, 1, 1, true)?.zeroed()?;

        Ok(Self {
            config,
            params: p,
            time1,
            time2,
            class_emb,
            conv_in,
            down,
            mid1,
            mid_attn,
            mid2,
            up,
            norm_out,
            conv_out,
        })
    }

    pub fn condition_embedding(&self, t: &[usize], labels: &[usize]) -> Result<ConditionEmbedding> {
        if t.len() != labels.len() {
            bail_input!("{} timesteps for {} labels", t.len(), labels.len());
        }
        let s = sinusoidal(t, self.config.sinusoid_dim(), self.params.dtype())?;
        let timestep = self.time2.forward(&self.time1.forward(&s)?.silu()?)?;
        let class = self.class_emb.forward(labels)?;
        let combined = (&timestep + &class)?;
        Ok(ConditionEmbedding {
            timestep,
            class,
            combined,
        })
    }

    pub fn forward(&self, x: &Tensor, t: &[usize], labels: &[usize]) -> Result<Tensor> {
        let (b, _, h, w) = x.dims4()?;
        if b != t.len() {
            bail_input!("batch of {b} with {} timesteps", t.len());
        }
        let m = self.config.size_multiple();
        if h % m != 0 || w % m != 0 {
            bail_input!("input {h}x{w} not divisible by {m}");
        }
        let emb = self.condition_embedding(t, labels)?.combined;
        let mut hcur = self.conv_in.forward(x)?;
        let mut skips = vec![hcur.clone()];
        for level in &self.down {
            for (res, attn) in level.res.iter().zip(&level.attn) {
                hcur = res.forward(&hcur, &emb)?;
                if let Some(a) = attn {
                    hcur = a.forward(&hcur)?;
                }
                skips.push(hcur.clone());
            }
            if let Some(ds) = &level.resample {
                hcur = ds.forward(&hcur)?;
                skips.push(hcur.clone());
            }
        }
        hcur = self.mid1.forward(&hcur, &emb)?;
        if let Some(a) = &self.mid_attn {
            hcur = a.forward(&hcur)?;
        }
        hcur = self.mid2.forward(&hcur, &emb)?;
        for level in &self.up {
            for (res, attn) in level.res.iter().zip(&level.attn) {
                let skip = skips.pop().expect("skip bookkeeping");
                hcur = res.forward(&Tensor::cat(&[&hcur, &skip], 1)?, &emb)?;
                if let Some(a) = attn {
                    hcur = a.forward(&hcur)?;
                }
            }
            if let Some(us) = &level.resample {
                let (_, _, hh, ww) = hcur.dims4()?;
                hcur = us.forward(&hcur.upsample_nearest2d(hh * 2, ww * 2)?)?;
            }
        }
        let out = self
            .conv_out
            .forward(&self.norm_out.forward(&hcur)?.silu()?)?;
        Ok(out)
    }
}

impl NoisePredictor for UNet {
    fn predict_noise(&self, x_t: &Tensor, t: &[usize], labels: &[usize]) -> Result<Tensor> {
        self.forward(x_t, t, labels)
    }
}
