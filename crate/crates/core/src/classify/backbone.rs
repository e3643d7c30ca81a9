use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::film::Film;
use crate::error::{bail_input, Result};
use crate::nn::{channel_affine, sigmoid, Conv2d, GroupNorm, Params};

/// Convolutional feature extractor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneConfig {
    /// MBConv network with the EfficientNet-B0 stage layout, scaled by
    /// width and depth multipliers.
    EfficientNetB0 {
        width_mult: f64,
        depth_mult: f64,
        norm_groups: usize,
    },
    /// Plain stack of (3×3 conv, 3×3 stride-2 conv) stages.
    SmallCnn {
        channels: Vec<usize>,
        norm_groups: usize,
    },
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::efficientnet_b0()
    }
}

impl BackboneConfig {
    pub fn efficientnet_b0() -> Self {
        Self::EfficientNetB0 {
            width_mult: 1.0,
            depth_mult: 1.0,
            norm_groups: 8,
        }
    }

    pub fn small_cnn() -> Self {
        Self::SmallCnn {
            channels: vec![16, 32, 64],
            norm_groups: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::EfficientNetB0 {
                width_mult,
                depth_mult,
                norm_groups,
            } => {
                if !(*width_mult > 0.0 && *depth_mult > 0.0) || *norm_groups == 0 {
                    bail_input!("EfficientNet multipliers and norm_groups must be positive");
                }
            }
            Self::SmallCnn { channels, norm_groups } => {
                if channels.len() < 3 || channels.contains(&0) || *norm_groups == 0 {
                    bail_input!("small CNN needs at least 3 nonzero stage widths");
                }
            }
        }
        Ok(())
    }
}

/// (expand ratio, output channels, repeats, stride, kernel) per B0 stage.
const B0_STAGES: [(usize, usize, usize, usize, usize); 7] = [
    (1, 16, 1, 1, 3),
    (6, 24, 2, 2, 3),
    (6, 40, 2, 2, 5),
    (6, 80, 3, 2, 3),
    (6, 112, 3, 1, 5),
    (6, 192, 4, 2, 5),
    (6, 320, 1, 1, 3),
];

fn round_filters(c: usize, mult: f64) -> usize {
    let scaled = c as f64 * mult;
    let r = ((scaled + 4.0) as usize / 8 * 8).max(8);
    if (r as f64) < 0.9 * scaled {
        r + 8
    } else {
        r
    }
}

#[derive(Clone)]
struct ConvNormAct {
    conv: Conv2d,
    norm: GroupNorm,
    act: bool,
}

impl ConvNormAct {
    #[allow(clippy::too_many_arguments)]
    fn new(p: &Params, cin: usize, cout: usize, k: usize, stride: usize, groups: usize, norm_groups: usize, act: bool) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&p.pp("conv"), cin, cout, k, stride, groups, false)?,
            norm: GroupNorm::new(&p.pp("norm"), GroupNorm::groups_for(cout, norm_groups), cout)?,
            act,
        })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = self.norm.forward(&self.conv.forward(x)?)?;
        if self.act {
            y.silu()
        } else {
            Ok(y)
        }
    }
}

/// Squeeze-and-excitation gate.
#[derive(Clone)]
struct SqueezeExcite {
    reduce: crate::nn::Linear,
    expand: crate::nn::Linear,
}

impl SqueezeExcite {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let pooled = x.mean((2, 3))?;
        let s = sigmoid(&self.expand.forward(&self.reduce.forward(&pooled)?.silu()?)?)?;
        channel_affine(x, &s, &s.zeros_like()?)
    }
}

#[derive(Clone)]
struct MbConv {
    expand: Option<ConvNormAct>,
    depthwise: ConvNormAct,
    se: SqueezeExcite,
    project: ConvNormAct,
    residual: bool,
}

impl MbConv {
    fn new(p: &Params, cin: usize, cout: usize, ratio: usize, stride: usize, k: usize, ng: usize) -> Result<Self> {
        let mid = cin * ratio;
        let expand = if ratio != 1 {
            Some(ConvNormAct::new(&p.pp("expand"), cin, mid, 1, 1, 1, ng, true)?)
        } else {
            None
        };
        let squeeze = (cin / 4).max(1);
        Ok(Self {
            expand,
            depthwise: ConvNormAct::new(&p.pp("dw"), mid, mid, k, stride, mid, ng, true)?,
            se: SqueezeExcite {
                reduce: crate::nn::Linear::new(&p.pp("se.reduce"), mid, squeeze, true)?,
                expand: crate::nn::Linear::new(&p.pp("se.expand"), squeeze, mid, true)?,
            },
            project: ConvNormAct::new(&p.pp("project"), mid, cout, 1, 1, 1, ng, false)?,
            residual: stride == 1 && cin == cout,
        })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mut h = x.clone();
        if let Some(e) = &self.expand {
            h = e.forward(&h)?;
        }
        h = self.project.forward(&self.se.forward(&self.depthwise.forward(&h)?)?)?;
        if self.residual {
            h + x
        } else {
            Ok(h)
        }
    }
}

#[derive(Clone)]
enum Block {
    Plain(ConvNormAct),
    MbConv(MbConv),
}

impl Block {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        match self {
            Block::Plain(b) => b.forward(x),
            Block::MbConv(b) => b.forward(x),
        }
    }
}

/// Feature extractor with optional FiLM layers after the stem and after the
/// second stage.
#[derive(Clone)]
pub struct Backbone {
    stem: ConvNormAct,
    stages: Vec<Vec<Block>>,
    head: Option<ConvNormAct>,
    film: Option<[Film; 2]>,
    out_channels: usize,
}

impl Backbone {
    /// `film_dim` is the conditioning embedding width, when FiLM is enabled.
    pub fn new(p: &Params, config: &BackboneConfig, in_channels: usize, film_dim: Option<usize>) -> Result<Self> {
        config.validate()?;
        let (stem, stages, head, widths) = match config {
            BackboneConfig::EfficientNetB0 {
                width_mult,
                depth_mult,
                norm_groups: ng,
            } => {
                let c0 = round_filters(32, *width_mult);
                let stem = ConvNormAct::new(&p.pp("stem"), in_channels, c0, 3, 2, 1, *ng, true)?;
                let mut cin = c0;
                let mut stages = Vec::new();
                let mut widths = vec![c0];
                for (s, &(ratio, c, repeats, stride, k)) in B0_STAGES.iter().enumerate() {
                    let cout = round_filters(c, *width_mult);
                    let n = (repeats as f64 * depth_mult).ceil() as usize;
                    let mut blocks = Vec::new();
                    for b in 0..n {
                        let st = if b == 0 { stride } else { 1 };
                        let bp = p.pp(format!("stage{s}.{b}"));
                        blocks.push(Block::MbConv(MbConv::new(&bp, cin, cout, ratio, st, k, *ng)?));
                        cin = cout;
                    }
                    widths.push(cout);
                    stages.push(blocks);
                }
                let c_head = round_filters(1280, *width_mult);
                let head = ConvNormAct::new(&p.pp("head"), cin, c_head, 1, 1, 1, *ng, true)?;
                widths.push(c_head);
                (stem, stages, Some(head), widths)
            }
            BackboneConfig::SmallCnn { channels, norm_groups: ng } => {
                let stem = ConvNormAct::new(&p.pp("stem"), in_channels, channels[0], 3, 1, 1, *ng, true)?;
                let mut cin = channels[0];
                let mut stages = Vec::new();
                let mut widths = vec![cin];
                for (s, &c) in channels.iter().enumerate() {
                    let sp = p.pp(format!("stage{s}"));
                    stages.push(vec![
                        Block::Plain(ConvNormAct::new(&sp.pp("0"), cin, c, 3, 1, 1, *ng, true)?),
                        Block::Plain(ConvNormAct::new(&sp.pp("1"), c, c, 3, 2, 1, *ng, true)?),
                    ]);
                    widths.push(c);
                    cin = c;
                }
                (stem, stages, None, widths)
            }
        };
        let film = match film_dim {
            Some(d) => Some([
                Film::new(&p.pp("film0"), d, widths[0])?,
                Film::new(&p.pp("film1"), d, widths[2])?,
            ]),
            None => None,
        };
        Ok(Self {
            stem,
            stages,
            head,
            film,
            out_channels: *widths.last().unwrap_or(&0),
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn has_film(&self) -> bool {
        self.film.is_some()
    }

    /// Activations of the last convolutional layer, `(B, C, h, w)`.
    pub fn feature_maps(&self, x: &Tensor, cond: Option<&Tensor>) -> Result<Tensor> {
        let film = match (&self.film, cond) {
            (Some(f), Some(c)) => Some((f, c)),
            (None, None) => None,
            (Some(_), None) => bail_input!("FiLM backbone needs a conditioning embedding"),
            (None, Some(_)) => bail_input!("conditioning embedding given to a backbone without FiLM"),
        };
        let mut h = self.stem.forward(x)?;
        if let Some((f, c)) = film {
            h = f[0].forward(&h, c)?;
        }
        for (s, stage) in self.stages.iter().enumerate() {
            if s == 2 {
                if let Some((f, c)) = film {
                    h = f[1].forward(&h, c)?;
                }
            }
            for b in stage {
                h = b.forward(&h)?;
            }
        }
        if let Some(head) = &self.head {
            h = head.forward(&h)?;
        }
        Ok(h)
    }
}

/// Global average pooling `(B, C, h, w) → (B, C)`.
pub fn global_pool(maps: &Tensor) -> Result<Tensor> {
    Ok(maps.mean((2, 3))?)
}
