use super::image::Image;
use super::preprocess::Interpolation;

/// Resizes one plane with half-pixel-centre bilinear interpolation
/// (identity when the size is unchanged).
pub fn resize_bilinear_plane(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(oh * ow);
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for y in 0..oh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = (fy - y0 as f64) as f32;
        for x in 0..ow {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = (fx - x0 as f64) as f32;
            let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
            let bot = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

fn resize_nearest_plane(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let sy = ((y * h) / oh).min(h - 1);
        for x in 0..ow {
            let sx = ((x * w) / ow).min(w - 1);
            out.push(src[sy * w + sx]);
        }
    }
    out
}

pub fn resize(img: &Image, oh: usize, ow: usize, interp: Interpolation) -> Image {
    let mut data = Vec::with_capacity(img.channels * oh * ow);
    for c in 0..img.channels {
        let plane = img.plane(c);
        let r = match interp {
            Interpolation::Bilinear => {
                resize_bilinear_plane(plane, img.height, img.width, oh, ow)
            }
            Interpolation::Nearest => resize_nearest_plane(plane, img.height, img.width, oh, ow),
        };
        data.extend(r);
    }
    Image {
        channels: img.channels,
        height: oh,
        width: ow,
        data,
    }
}

/// Crops rows `top..bottom` and columns `left..right` from every channel.
pub(crate) fn crop(img: &Image, top: usize, bottom: usize, left: usize, right: usize) -> Image {
    let (h, w) = (bottom - top, right - left);
    let mut data = Vec::with_capacity(img.channels * h * w);
    for c in 0..img.channels {
        for y in top..bottom {
            let row = (c * img.height + y) * img.width;
            data.extend_from_slice(&img.data[row + left..row + right]);
        }
    }
    Image {
        channels: img.channels,
        height: h,
        width: w,
        data,
    }
}

/// Bilinear sample at continuous pixel-centre coordinates; outside the image
/// the nearest edge value is used.
#[inline]
pub(crate) fn sample_bilinear(plane: &[f32], h: usize, w: usize, fy: f64, fx: f64) -> f32 {
    let fy = fy.clamp(0.0, (h - 1) as f64);
    let fx = fx.clamp(0.0, (w - 1) as f64);
    let y0 = fy.floor() as usize;
    let x0 = fx.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let ty = (fy - y0 as f64) as f32;
    let tx = (fx - x0 as f64) as f32;
    if ty == 0.0 && tx == 0.0 {
        return plane[y0 * w + x0];
    }
    let top = plane[y0 * w + x0] * (1.0 - tx) + plane[y0 * w + x1] * tx;
    let bot = plane[y1 * w + x0] * (1.0 - tx) + plane[y1 * w + x1] * tx;
    top * (1.0 - ty) + bot * ty
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_is_identity() {
        let img = Image::from_fn(6, 9, |y, x| ((y * 31 + x * 7) % 11) as f32 / 10.0);
        assert_eq!(resize(&img, 6, 9, Interpolation::Bilinear), img);
        assert_eq!(resize(&img, 6, 9, Interpolation::Nearest), img);
    }

    #[test]
    fn constant_stays_constant() {
        let img = Image::from_fn(10, 4, |_, _| 0.25);
        let r = resize(&img, 3, 7, Interpolation::Bilinear);
        assert!(r.data.iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn downsample_by_two_averages_pairs() {
        let img = Image::from_fn(1, 4, |_, x| x as f32);
        let r = resize(&img, 1, 2, Interpolation::Bilinear);
        assert_eq!(r.data, vec![0.5, 2.5]);
    }
}
