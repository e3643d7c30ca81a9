use std::path::Path;

use crate::error::{bail_input, Error, Result};

/// Channel-major (CHW) float image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            bail_input!("image dimensions must be nonzero ({channels}x{height}x{width})");
        }
        if data.len() != channels * height * width {
            bail_input!(
                "image buffer has {} values, expected {}",
                data.len(),
                channels * height * width
            );
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn gray(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(1, height, width, data)
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            channels: 1,
            height,
            width,
            data,
        }
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Channel mean as a single-channel image.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let n = self.plane_len();
        let mut out = vec![0.0f32; n];
        for c in 0..self.channels {
            for (o, v) in out.iter_mut().zip(self.plane(c)) {
                *o += v;
            }
        }
        let k = self.channels as f32;
        out.iter_mut().for_each(|v| *v /= k);
        Image {
            channels: 1,
            height: self.height,
            width: self.width,
            data: out,
        }
    }

    /// Duplicates a grayscale plane into `channels` identical planes.
    pub fn replicate(&self, channels: usize) -> Result<Image> {
        if self.channels == channels {
            return Ok(self.clone());
        }
        if self.channels != 1 {
            bail_input!("cannot replicate a {}-channel image", self.channels);
        }
        let mut data = Vec::with_capacity(self.data.len() * channels);
        for _ in 0..channels {
            data.extend_from_slice(&self.data);
        }
        Image::new(channels, self.height, self.width, data)
    }

    pub fn clamp01(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path)?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let is_gray = matches!(
            img.color(),
            image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8
        );
        if is_gray {
            let buf = img.to_luma8();
            let data = buf.as_raw().iter().map(|&v| f32::from(v) / 255.0).collect();
            Image::new(1, h, w, data)
        } else {
            let buf = img.to_rgb8();
            let raw = buf.as_raw();
            let mut data = vec![0.0f32; 3 * h * w];
            for i in 0..h * w {
                for c in 0..3 {
                    data[c * h * w + i] = f32::from(raw[i * 3 + c]) / 255.0;
                }
            }
            Image::new(3, h, w, data)
        }
    }

    /// Writes an 8-bit PNG. Values are clamped to [0,1]; 1-channel images
    /// are written as grayscale, 3-channel as RGB.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let (w, h) = (self.width as u32, self.height as u32);
        match self.channels {
            1 => {
                let raw: Vec<u8> = self.data.iter().map(|&v| q(v)).collect();
                let buf = image::GrayImage::from_raw(w, h, raw)
                    .ok_or_else(|| Error::InvalidInput("png buffer size".into()))?;
                buf.save(path)?;
            }
            3 => {
                let n = self.plane_len();
                let mut raw = vec![0u8; 3 * n];
                for i in 0..n {
                    for c in 0..3 {
                        raw[i * 3 + c] = q(self.data[c * n + i]);
                    }
                }
                let buf = image::RgbImage::from_raw(w, h, raw)
                    .ok_or_else(|| Error::InvalidInput("png buffer size".into()))?;
                buf.save(path)?;
            }
            c => bail_input!("cannot write a {c}-channel image as png"),
        }
        Ok(())
    }
}
