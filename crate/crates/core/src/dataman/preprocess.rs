use serde::{Deserialize, Serialize};

use super::image::Image;
use super::resample::{crop, resize};
use super::{Modality, ModalityKind};
use crate::error::{bail_input, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    Nearest,
    Bilinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// Output side length in pixels.
    pub side: usize,
    /// B-scan rows whose mean intensity is below this fraction of the image
    /// maximum are cropped from the top and bottom.
    pub bscan_threshold_frac: f32,
    /// Fundus pixels above this fraction of the maximum count as foreground
    /// when cropping the dark background.
    pub fundus_background_frac: f32,
    /// Central zoom applied to fundus images after the background crop;
    /// 1.0 disables it.
    pub fundus_zoom: f32,
    pub interpolation: Interpolation,
    /// Output channel count; grayscale input is duplicated.
    pub channels: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            side: 256,
            bscan_threshold_frac: 0.1,
            fundus_background_frac: 0.1,
            fundus_zoom: 1.1,
            interpolation: Interpolation::Bilinear,
            channels: 3,
        }
    }
}

impl PreprocessConfig {
    pub fn desk() -> Self {
        Self {
            side: 64,
            ..Self::default()
        }
    }
}

/// Returns the half-open row range `[top, bottom)` between the first and last
/// rows whose mean intensity reaches `threshold_frac * max`.
pub fn bscan_content_rows(gray: &Image, threshold_frac: f32) -> Result<(usize, usize)> {
    let max = gray.data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !(max > 0.0) {
        bail_input!("blank B-scan: no content rows");
    }
    let thr = threshold_frac * max;
    let w = gray.width;
    let passes = |y: usize| {
        let row = &gray.data[y * w..(y + 1) * w];
        let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / w as f64;
        mean >= f64::from(thr)
    };
    let top = (0..gray.height).find(|&y| passes(y));
    let bottom = (0..gray.height).rev().find(|&y| passes(y));
    match (top, bottom) {
        (Some(t), Some(b)) => Ok((t, b + 1)),
        _ => bail_input!("blank B-scan: no row reaches the crop threshold"),
    }
}

fn foreground_box(gray: &Image, frac: f32) -> Result<(usize, usize, usize, usize)> {
    let max = gray.data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !(max > 0.0) {
        bail_input!("blank fundus image: no foreground");
    }
    let thr = frac * max;
    let (mut top, mut bottom, mut left, mut right) = (usize::MAX, 0, usize::MAX, 0);
    for y in 0..gray.height {
        for x in 0..gray.width {
            if gray.data[y * gray.width + x] > thr {
                top = top.min(y);
                bottom = bottom.max(y + 1);
                left = left.min(x);
                right = right.max(x + 1);
            }
        }
    }
    if top == usize::MAX {
        bail_input!("blank fundus image: no foreground");
    }
    Ok((top, bottom, left, right))
}

/// Crops, resizes and channel-expands a raw image. Output values lie in [0,1].
pub fn preprocess(raw: &Image, modality: Modality, config: &PreprocessConfig) -> Result<Image> {
    if !raw.is_finite() {
        bail_input!("image contains non-finite pixels");
    }
    if config.side == 0 {
        bail_input!("preprocess side must be positive");
    }
    let gray = raw.to_gray();
    let cropped = match modality.kind() {
        ModalityKind::BScan => {
            let (top, bottom) = bscan_content_rows(&gray, config.bscan_threshold_frac)?;
            crop(raw, top, bottom, 0, raw.width)
        }
        ModalityKind::Fundus => {
            let (top, bottom, left, right) =
                foreground_box(&gray, config.fundus_background_frac)?;
            let boxed = crop(raw, top, bottom, left, right);
            let zoom = config.fundus_zoom.max(1.0);
            if zoom > 1.0 {
                let kh = ((boxed.height as f32 / zoom).round() as usize).max(1);
                let kw = ((boxed.width as f32 / zoom).round() as usize).max(1);
                let t = (boxed.height - kh) / 2;
                let l = (boxed.width - kw) / 2;
                crop(&boxed, t, t + kh, l, l + kw)
            } else {
                boxed
            }
        }
        ModalityKind::EnFace => raw.clone(),
    };
    let mut out = resize(&cropped, config.side, config.side, config.interpolation);
    out.clamp01();
    if out.channels != config.channels {
        out = out.to_gray().replicate(config.channels)?;
    }
    Ok(out)
}

/// Resize and channel expansion only, for images that are already cropped
/// (such as samples from a generator trained on preprocessed images).
pub fn conform(image: &Image, config: &PreprocessConfig) -> Result<Image> {
    if !image.is_finite() {
        bail_input!("image contains non-finite pixels");
    }
    let mut out = if image.height == config.side && image.width == config.side {
        image.clone()
    } else {
        resize(image, config.side, config.side, config.interpolation)
    };
    out.clamp01();
    if out.channels != config.channels {
        out = out.to_gray().replicate(config.channels)?;
    }
    Ok(out)
}
