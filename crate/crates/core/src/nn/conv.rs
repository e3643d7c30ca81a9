//! Convolution as im2col + matmul. The column gather and its adjoint are
//! custom ops so both forward and backward reduce to dense matrix products.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, WithDType};

#[derive(Debug, Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    /// Visits every (column-row, output-row, input-row, ox range) and calls
    /// `f(col_offset, img_offset, count)` for runs where the input index is
    /// `ox * stride + kx - pad`.
    fn for_each_run(&self, row_stride: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (oh, ow) = self.out_hw();
        let l = row_stride;
        for c in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    // valid ox: 0 <= ox*s + kx - pad < w
                    let lo = if kx >= self.pad {
                        0
                    } else {
                        (self.pad - kx).div_ceil(self.stride)
                    };
                    let hi = if self.w + self.pad > kx {
                        ((self.w + self.pad - kx - 1) / self.stride + 1).min(ow)
                    } else {
                        0
                    };
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let col = row * l + oy * ow + lo;
                        let ix0 = lo * self.stride + kx - self.pad;
                        let img = (c * self.h + iy as usize) * self.w + ix0;
                        f(col, img, hi - lo, self.stride);
                    }
                }
            }
        }
    }
}

struct Im2Col(Geometry);
struct Col2Im(Geometry, usize);

fn slice<'a, T: WithDType>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("im2col expects a contiguous tensor"),
    }
}

fn im2col<T: WithDType>(src: &[T], batch: usize, g: &Geometry) -> Vec<T> {
    let (oh, ow) = g.out_hw();
    let l = oh * ow;
    let rows = g.c * g.k * g.k;
    let per_in = g.c * g.h * g.w;
    let mut out = vec![T::zero(); batch * rows * l];
    for b in 0..batch {
        let s = &src[b * per_in..(b + 1) * per_in];
        let d = &mut out[b * l..];
        g.for_each_run(batch * l, |col, img, n, stride| {
            if stride == 1 {
                d[col..col + n].copy_from_slice(&s[img..img + n]);
            } else {
                for i in 0..n {
                    d[col + i] = s[img + i * stride];
                }
            }
        });
    }
    out
}

fn col2im<T: WithDType>(src: &[T], batch: usize, g: &Geometry) -> Vec<T> {
    let (oh, ow) = g.out_hw();
    let l = oh * ow;
    let per_img = g.c * g.h * g.w;
    let mut out = vec![T::zero(); batch * per_img];
    for b in 0..batch {
        let s = &src[b * l..];
        let d = &mut out[b * per_img..(b + 1) * per_img];
        g.for_each_run(batch * l, |col, img, n, stride| {
            if stride == 1 {
                for (o, &v) in d[img..img + n].iter_mut().zip(&s[col..col + n]) {
                    *o += v;
                }
            } else {
                for i in 0..n {
                    d[img + i * stride] += s[col + i];
                }
            }
        });
    }
    out
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let (b, c, h, w) = layout.shape().dims4()?;
        if (c, h, w) != (g.c, g.h, g.w) {
            candle_core::bail!("im2col geometry mismatch");
        }
        let (oh, ow) = g.out_hw();
        let shape = Shape::from((c * g.k * g.k, b * oh * ow));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(im2col(slice(v, layout)?, b, g)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col(slice(v, layout)?, b, g)),
            _ => candle_core::bail!("im2col supports f32 and f64"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im(self.0, _arg.dim(0)?))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let b = self.1;
        let shape = Shape::from((b, g.c, g.h, g.w));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(col2im(slice(v, layout)?, b, g)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im(slice(v, layout)?, b, g)),
            _ => candle_core::bail!("col2im supports f32 and f64"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

/// `(B, C, H, W)` → `(C·k·k, B·OH·OW)` patch matrix with zero padding.
pub fn unfold(x: &Tensor, k: usize, stride: usize, pad: usize) -> candle_core::Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    if h + 2 * pad < k || w + 2 * pad < k || stride == 0 {
        candle_core::bail!("kernel {k} does not fit input {h}x{w} with padding {pad}");
    }
    x.contiguous()?.apply_op1(Im2Col(Geometry {
        c,
        h,
        w,
        k,
        stride,
        pad,
    }))
}

/// Cross-correlation with weight `(C_out, C_in/groups, k, k)`.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, pad: usize, groups: usize) -> candle_core::Result<Tensor> {
    let (b, c, _, _) = x.dims4()?;
    let (cout, cin_g, k, _) = weight.dims4()?;
    if c != cin_g * groups {
        candle_core::bail!("conv input has {c} channels, weight expects {}", cin_g * groups);
    }
    if stride == 1 && groups == 1 && k % 2 == 1 && pad == k / 2 {
        return super::grid_conv::conv2d_same(x, weight);
    }
    let cols = unfold(x, k, stride, pad)?;
    let (_, _, h, w) = x.dims4()?;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let l = oh * ow;
    // (C_out, B·L) → (B, C_out, L)
    let to_batch_major = |y: Tensor, ch: usize| y.reshape((ch, b, l))?.transpose(0, 1)?.contiguous();
    if groups == 1 {
        let y = weight.reshape((cout, c * k * k))?.matmul(&cols)?;
        return to_batch_major(y, cout)?.reshape((b, cout, oh, ow));
    }
    let y = if groups == c && cout == c {
        let cols = cols.reshape((c, k * k, b * l))?;
        let wt = weight.reshape((c, k * k, 1))?;
        cols.broadcast_mul(&wt)?.sum(1)?
    } else {
        let cg = cout / groups;
        let cols = cols.reshape((groups, cin_g * k * k, b * l))?;
        let wt = weight.reshape((groups, cg, cin_g * k * k))?;
        wt.matmul(&cols)?.reshape((cout, b * l))?
    };
    to_batch_major(y, cout)?.reshape((b, cout, oh, ow))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = crate::rng::seeded(seed);
        let n = shape.iter().product();
        Tensor::from_vec(crate::rng::normal_vec(&mut rng, n), shape, &Device::Cpu)
            .unwrap()
            .to_dtype(DType::F64)
            .unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn matches_reference_convolution() {
        for &(c, cout, h, w, k, stride, groups) in &[
            (3, 5, 7, 6, 3, 1, 1),
            (4, 4, 8, 8, 3, 2, 1),
            (6, 6, 9, 7, 3, 2, 6),
            (4, 6, 5, 5, 1, 1, 2),
            (2, 3, 6, 6, 5, 2, 1),
            (8, 8, 6, 6, 5, 1, 8),
        ] {
            let x = Var::from_tensor(&randn(&[2, c, h, w], 1)).unwrap();
            let wt = Var::from_tensor(&randn(&[cout, c / groups, k, k], 2)).unwrap();
            let probe = randn(&[2, cout, (h + 2 * (k / 2) - k) / stride + 1, (w + 2 * (k / 2) - k) / stride + 1], 3);
            let y = conv2d(&x, &wt, stride, k / 2, groups).unwrap();
            let r = x.conv2d(&wt, k / 2, stride, 1, groups).unwrap();
            assert!(max_diff(&y, &r) < 1e-10, "{c} {k} {stride} {groups}");
            let gy = (y * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            let gr = (r * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            assert!(max_diff(gy.get(&x).unwrap(), gr.get(&x).unwrap()) < 1e-10);
            assert!(max_diff(gy.get(&wt).unwrap(), gr.get(&wt).unwrap()) < 1e-10);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = Geometry {
            c: 2,
            h: 5,
            w: 6,
            k: 3,
            stride: 2,
            pad: 1,
        };
        let x = randn(&[1, 2, 5, 6], 4);
        let x = Tensor::cat(&[&x, &(&x * 2.0).unwrap()], 0).unwrap();
        let cols = x.apply_op1(Im2Col(g)).unwrap();
        let y = randn(cols.dims(), 5);
        let back = y.apply_op1(Col2Im(g, 2)).unwrap();
        let lhs = (cols * &y).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        let rhs = (x * back).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
