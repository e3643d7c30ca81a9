//! Grad-CAM heatmaps for the unimodal classifiers.

use std::fs;
use std::path::Path;

use candle_core::{DType, Tensor, Var};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classify::Classifier;
use crate::dataman::{resize_bilinear_plane, Image};
use crate::error::{bail_input, Error, Result};
use crate::nn::{images_to_tensor, sigmoid};

/// A model split at the layer whose activations Grad-CAM weighs.
pub trait CamModel {
    /// Activations of the hooked layer, `(B, C, h, w)`.
    fn cam_activations(&self, x: &Tensor) -> Result<Tensor>;
    /// Model outputs `(B, K)` computed from those activations.
    fn outputs_from_activations(&self, a: &Tensor) -> Result<Tensor>;
    fn num_outputs(&self) -> usize;
    /// Name of the hooked layer.
    fn cam_layer(&self) -> String;
    fn dtype(&self) -> DType;
}

impl CamModel for Classifier {
    fn cam_activations(&self, x: &Tensor) -> Result<Tensor> {
        self.feature_maps(x, None)
    }

    /// The single output is the logit of P(AmyloidPET negative).
    fn outputs_from_activations(&self, a: &Tensor) -> Result<Tensor> {
        Ok(self.logits_from_features(a)?.unsqueeze(1)?)
    }

    fn num_outputs(&self) -> usize {
        1
    }

    fn cam_layer(&self) -> String {
        self.cam_layer_name()
    }

    fn dtype(&self) -> DType {
        self.params.dtype()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CamHeatmap {
    pub layer: String,
    pub target: usize,
    /// Model output for `target` (a probability for the classifier).
    pub output: f64,
    /// Spatially averaged gradient per activation channel.
    pub weights: Vec<f64>,
    pub height: usize,
    pub width: usize,
    /// Row-major heatmap in [0, 1] at input resolution.
    pub heatmap: Vec<f32>,
    /// Set when the rectified map was zero everywhere.
    pub degenerate: bool,
}

/// Activations and the gradient of output `target` with respect to them.
pub fn activation_gradient<M: CamModel + ?Sized>(model: &M, image: &Image, target: usize) -> Result<(Tensor, Tensor, f64)> {
    if target >= model.num_outputs() {
        bail_input!("target {target} out of range for {} outputs", model.num_outputs());
    }
    let x = images_to_tensor(&[image], model.dtype(), |v| v)?;
    let acts = Var::from_tensor(&model.cam_activations(&x)?.detach())?;
    let out = model.outputs_from_activations(acts.as_tensor())?.narrow(1, target, 1)?.sum_all()?;
    let value = out.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    let grads = out.backward()?;
    let g = grads
        .get(acts.as_tensor())
        .cloned()
        .unwrap_or(acts.as_tensor().zeros_like()?);
    Ok((acts.as_tensor().clone(), g, value))
}

pub fn gradcam<M: CamModel + ?Sized>(model: &M, image: &Image, target: usize) -> Result<CamHeatmap> {
    let (acts, grad, value) = activation_gradient(model, image, target)?;
    let (_, c, h, w) = acts.dims4()?;
    let a = acts.to_dtype(DType::F64)?.squeeze(0)?.flatten_from(1)?.to_vec2::<f64>()?;
    let g = grad.to_dtype(DType::F64)?.squeeze(0)?.flatten_from(1)?.to_vec2::<f64>()?;
    let weights: Vec<f64> = g.iter().map(|row| row.iter().sum::<f64>() / (h * w) as f64).collect();
    let mut cam = vec![0.0f64; h * w];
    for k in 0..c {
        for (v, &x) in cam.iter_mut().zip(&a[k]) {
            *v += weights[k] * x;
        }
    }
    let cam: Vec<f32> = cam.iter().map(|&v| v.max(0.0) as f32).collect();
    let up = resize_bilinear_plane(&cam, h, w, image.height, image.width);
    let (lo, hi) = up.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)));
    let degenerate = !(hi > 0.0) || hi - lo <= f32::EPSILON * hi.abs().max(1.0);
    let heatmap = if degenerate {
        vec![0.0; up.len()]
    } else {
        up.iter().map(|&v| (v - lo) / (hi - lo)).collect()
    };
    Ok(CamHeatmap {
        layer: model.cam_layer(),
        target,
        output: value,
        weights,
        height: image.height,
        width: image.width,
        heatmap,
        degenerate,
    })
}

/// Classifier Grad-CAM reporting P(AmyloidPET negative) as the output value.
pub fn classifier_gradcam(model: &Classifier, image: &Image) -> Result<CamHeatmap> {
    let mut cam = gradcam(model, image, 0)?;
    cam.output = 1.0 / (1.0 + (-cam.output).exp());
    Ok(cam)
}

pub fn classifier_gradcams(model: &Classifier, images: &[&Image]) -> Result<Vec<CamHeatmap>> {
    images.par_iter().map(|img| classifier_gradcam(model, img)).collect()
}

/// Share of heatmap mass inside `mask`.
pub fn mass_fraction(cam: &CamHeatmap, mask: &[bool]) -> f64 {
    let total: f64 = cam.heatmap.iter().map(|&v| f64::from(v)).sum();
    if total == 0.0 {
        return 0.0;
    }
    let inside: f64 = cam
        .heatmap
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| f64::from(v))
        .sum();
    inside / total
}

/// Blue → cyan → green → yellow → red.
pub fn colormap(v: f32) -> [f32; 3] {
    let t = v.clamp(0.0, 1.0) * 4.0;
    let seg = (t.floor() as usize).min(3);
    let f = t - seg as f32;
    match seg {
        0 => [0.0, f, 1.0],
        1 => [0.0, 1.0, 1.0 - f],
        2 => [f, 1.0, 0.0],
        _ => [1.0, 1.0 - f, 0.0],
    }
}

/// RGB overlay of the heatmap on the grayscale input.
pub fn overlay(image: &Image, cam: &CamHeatmap, alpha: f32) -> Result<Image> {
    if (image.height, image.width) != (cam.height, cam.width) {
        bail_input!("heatmap and image sizes differ");
    }
    let gray = image.to_gray();
    let n = cam.heatmap.len();
    let mut data = vec![0.0f32; 3 * n];
    for i in 0..n {
        let c = colormap(cam.heatmap[i]);
        for ch in 0..3 {
            data[ch * n + i] = (1.0 - alpha) * gray.data[i] + alpha * c[ch];
        }
    }
    Image::new(3, cam.height, cam.width, data)
}

/// Writes `<stem>.png` (overlay) and `<stem>.json` (raw heatmap).
pub fn save_cam(image: &Image, cam: &CamHeatmap, dir: &Path, stem: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    overlay(image, cam, 0.45)?.save_png(&dir.join(format!("{stem}.png")))?;
    let path = dir.join(format!("{stem}.json"));
    fs::write(&path, serde_json::to_vec(cam)?).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// Tiles equally sized images into a grid, row by row.
pub fn sheet(tiles: &[Image], columns: usize) -> Result<Image> {
    let Some(first) = tiles.first() else {
        bail_input!("empty sheet");
    };
    let (h, w) = (first.height, first.width);
    if tiles.iter().any(|t| t.height != h || t.width != w || t.channels != 3) {
        bail_input!("sheet tiles must be RGB and equally sized");
    }
    let cols = columns.max(1);
    let rows = tiles.len().div_ceil(cols);
    let (sh, sw) = (rows * h, cols * w);
    let mut data = vec![1.0f32; 3 * sh * sw];
    for (k, t) in tiles.iter().enumerate() {
        let (oy, ox) = ((k / cols) * h, (k % cols) * w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data[c * sh * sw + (oy + y) * sw + ox + x] = t.data[c * h * w + y * w + x];
                }
            }
        }
    }
    Image::new(3, sh, sw, data)
}

/// P(AmyloidPET negative) for one image, used to sanity-check CAM outputs.
pub fn classifier_output(model: &Classifier, image: &Image) -> Result<f64> {
    let x = images_to_tensor(&[image], model.params.dtype(), |v| v)?;
    Ok(sigmoid(&model.logits(&x, None)?)?.to_dtype(DType::F64)?.to_vec1::<f64>()?[0])
}
