use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::Image;
use super::resample::sample_bilinear;
use super::Modality;

/// Augmentation ranges. Each parameter is drawn uniformly from `[-r, r]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub rotate_deg: f64,
    pub shear_deg: f64,
    pub brightness: f32,
    pub contrast: f32,
    /// Random crop offset as a fraction of the side.
    pub crop_frac: f64,
    /// Zoom factor deviation from 1; ignored for B-scans.
    pub zoom: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotate_deg: 10.0,
            shear_deg: 5.0,
            brightness: 0.1,
            contrast: 0.1,
            crop_frac: 0.1,
            zoom: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            rotate_deg: 0.0,
            shear_deg: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            crop_frac: 0.0,
            zoom: 0.0,
        }
    }
}

fn symmetric<R: Rng + ?Sized>(rng: &mut R, r: f64) -> f64 {
    let u: f64 = rng.random_range(-1.0..=1.0);
    u * r.abs()
}

/// Random affine (rotate, shear, zoom, crop offset) followed by brightness and
/// contrast jitter. Always consumes the same number of draws, so the stream
/// position does not depend on the configured ranges.
pub fn augment<R: Rng + ?Sized>(
    image: &Image,
    modality: Modality,
    config: &AugmentConfig,
    rng: &mut R,
) -> Image {
    let theta = symmetric(rng, config.rotate_deg).to_radians();
    let shear = symmetric(rng, config.shear_deg).to_radians().tan();
    let zoom_draw = 1.0 + symmetric(rng, config.zoom.min(0.9));
    let zoom = if modality.is_bscan() { 1.0 } else { zoom_draw };
    let ty = symmetric(rng, config.crop_frac * 0.5) * image.height as f64;
    let tx = symmetric(rng, config.crop_frac * 0.5) * image.width as f64;
    let brightness = symmetric(rng, f64::from(config.brightness)) as f32;
    let contrast = 1.0 + symmetric(rng, f64::from(config.contrast.min(0.9))) as f32;

    let mut out = if theta == 0.0 && shear == 0.0 && zoom == 1.0 && tx == 0.0 && ty == 0.0 {
        image.clone()
    } else {
        warp(image, theta, shear, zoom, ty, tx)
    };
    if brightness != 0.0 || contrast != 1.0 {
        for v in out.data.iter_mut() {
            *v = ((*v - 0.5) * contrast + 0.5 + brightness).clamp(0.0, 1.0);
        }
    }
    out
}

fn warp(image: &Image, theta: f64, shear: f64, zoom: f64, ty: f64, tx: f64) -> Image {
    let (h, w) = (image.height, image.width);
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    // Forward map A = zoom * R * Shear, applied about the centre, then shifted.
    let (s, c) = theta.sin_cos();
    let a = [[c * zoom, (c * shear - s) * zoom], [s * zoom, (s * shear + c) * zoom]];
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let inv = [
        [a[1][1] / det, -a[0][1] / det],
        [-a[1][0] / det, a[0][0] / det],
    ];
    let mut out = Image::zeros(image.channels, h, w);
    for ch in 0..image.channels {
        let plane = image.plane(ch);
        let base = ch * h * w;
        for y in 0..h {
            for x in 0..w {
                let dx = x as f64 - cx - tx;
                let dy = y as f64 - cy - ty;
                let sx = inv[0][0] * dx + inv[0][1] * dy + cx;
                let sy = inv[1][0] * dx + inv[1][1] * dy + cy;
                out.data[base + y * w + x] = sample_bilinear(plane, h, w, sy, sx);
            }
        }
    }
    out
}
