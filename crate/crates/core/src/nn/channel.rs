//! Per-channel bias and affine maps on `(B, C, ...)` tensors with direct
//! gradient reductions.

use candle_core::{CpuStorage, CustomOp2, CustomOp3, Layout, Shape, Tensor, WithDType};

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("channel op expects a contiguous tensor"),
    }
}

/// Plane geometry: `batch` samples of `channels` planes with `plane` values.
#[derive(Clone, Copy)]
struct Planes {
    batch: usize,
    channels: usize,
    plane: usize,
    /// Parameters are indexed per (sample, channel) instead of per channel.
    per_sample: bool,
}

impl Planes {
    fn of(x: &Tensor, param: &Tensor) -> candle_core::Result<Self> {
        let dims = x.dims();
        if dims.len() < 2 {
            candle_core::bail!("channel op needs a (B, C, ...) tensor");
        }
        let (batch, channels) = (dims[0], dims[1]);
        let per_sample = match param.dims() {
            [c] if *c == channels => false,
            [b, c] if *b == batch && *c == channels => true,
            d => candle_core::bail!("channel parameter shape {d:?} does not fit {dims:?}"),
        };
        Ok(Self {
            batch,
            channels,
            plane: dims[2..].iter().product(),
            per_sample,
        })
    }

    fn index(&self, b: usize, c: usize) -> usize {
        if self.per_sample {
            b * self.channels + c
        } else {
            c
        }
    }

    fn param_len(&self) -> usize {
        if self.per_sample {
            self.batch * self.channels
        } else {
            self.channels
        }
    }

    fn param_shape(&self) -> Shape {
        if self.per_sample {
            Shape::from((self.batch, self.channels))
        } else {
            Shape::from(self.channels)
        }
    }

    fn apply<T: WithDType>(&self, x: &[T], scale: Option<&[T]>, bias: &[T]) -> Vec<T> {
        let mut out = Vec::with_capacity(x.len());
        for (i, plane) in x.chunks(self.plane).enumerate() {
            let p = self.index(i / self.channels, i % self.channels);
            let b = bias[p];
            match scale {
                Some(s) => {
                    let s = s[p];
                    out.extend(plane.iter().map(|&v| v * s + b));
                }
                None => out.extend(plane.iter().map(|&v| v + b)),
            }
        }
        out
    }

    /// Per-parameter sums of `dy` and of `dy · x`.
    fn reduce<T: WithDType>(&self, dy: &[T], x: Option<&[T]>) -> (Vec<T>, Vec<T>) {
        let mut db = vec![T::zero(); self.param_len()];
        let mut ds = vec![T::zero(); self.param_len()];
        for (i, g) in dy.chunks(self.plane).enumerate() {
            let p = self.index(i / self.channels, i % self.channels);
            db[p] += g.iter().fold(T::zero(), |a, &v| a + v);
            if let Some(x) = x {
                let xp = &x[i * self.plane..(i + 1) * self.plane];
                ds[p] += g.iter().zip(xp).fold(T::zero(), |a, (&u, &v)| a + u * v);
            }
        }
        (db, ds)
    }
}

struct AddBias;
struct Affine;
struct Reduce {
    planes: Planes,
    with_x: bool,
}

impl CustomOp2 for AddBias {
    fn name(&self) -> &'static str {
        "channel-bias"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = l1.shape().dims();
        let pd = l2.shape().dims();
        let planes = Planes {
            batch: dims[0],
            channels: dims[1],
            plane: dims[2..].iter().product(),
            per_sample: pd.len() == 2,
        };
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(b)) => CpuStorage::F32(planes.apply(contiguous(x, l1)?, None, contiguous(b, l2)?)),
            (CpuStorage::F64(x), CpuStorage::F64(b)) => CpuStorage::F64(planes.apply(contiguous(x, l1)?, None, contiguous(b, l2)?)),
            _ => candle_core::bail!("channel bias supports matching f32/f64"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, b: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let planes = Planes::of(x, b)?;
        let db = grad.contiguous()?.apply_op1_no_bwd(&Reduce { planes, with_x: false })?;
        Ok((Some(grad.clone()), Some(db)))
    }
}

impl CustomOp3 for Affine {
    fn name(&self) -> &'static str {
        "channel-affine"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = l1.shape().dims();
        let planes = Planes {
            batch: dims[0],
            channels: dims[1],
            plane: dims[2..].iter().product(),
            per_sample: l2.shape().dims().len() == 2,
        };
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(s), CpuStorage::F32(b)) => {
                CpuStorage::F32(planes.apply(contiguous(x, l1)?, Some(contiguous(s, l2)?), contiguous(b, l3)?))
            }
            (CpuStorage::F64(x), CpuStorage::F64(s), CpuStorage::F64(b)) => {
                CpuStorage::F64(planes.apply(contiguous(x, l1)?, Some(contiguous(s, l2)?), contiguous(b, l3)?))
            }
            _ => candle_core::bail!("channel affine supports matching f32/f64"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        s: &Tensor,
        b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let planes = Planes::of(x, s)?;
        let grad = grad.contiguous()?;
        let zero = b.zeros_like()?;
        let dx = grad.apply_op3_no_bwd(s, &zero, &Affine)?;
        let db = grad.apply_op1_no_bwd(&Reduce { planes, with_x: false })?;
        let ds = grad.apply_op2_no_bwd(x, &Reduce { planes, with_x: true })?;
        Ok((Some(dx), Some(ds), Some(db)))
    }
}

impl candle_core::CustomOp1 for Reduce {
    fn name(&self) -> &'static str {
        "channel-reduce"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match s {
            CpuStorage::F32(g) => CpuStorage::F32(self.planes.reduce(contiguous(g, l)?, None).0),
            CpuStorage::F64(g) => CpuStorage::F64(self.planes.reduce(contiguous(g, l)?, None).0),
            _ => candle_core::bail!("channel reduce supports f32/f64"),
        };
        Ok((out, self.planes.param_shape()))
    }
}

impl CustomOp2 for Reduce {
    fn name(&self) -> &'static str {
        "channel-reduce-product"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        debug_assert!(self.with_x);
        let out = match (s1, s2) {
            (CpuStorage::F32(g), CpuStorage::F32(x)) => {
                CpuStorage::F32(self.planes.reduce(contiguous(g, l1)?, Some(contiguous(x, l2)?)).1)
            }
            (CpuStorage::F64(g), CpuStorage::F64(x)) => {
                CpuStorage::F64(self.planes.reduce(contiguous(g, l1)?, Some(contiguous(x, l2)?)).1)
            }
            _ => candle_core::bail!("channel reduce supports matching f32/f64"),
        };
        Ok((out, self.planes.param_shape()))
    }
}

/// `x + bias` where `bias` is `(C,)` or `(B, C)`, broadcast over the trailing dims.
pub fn add_channel_bias(x: &Tensor, bias: &Tensor) -> candle_core::Result<Tensor> {
    Planes::of(x, bias)?;
    x.contiguous()?.apply_op2(&bias.contiguous()?, AddBias)
}

/// `x · scale + bias` with per-channel (or per-sample-channel) parameters.
pub fn channel_affine(x: &Tensor, scale: &Tensor, bias: &Tensor) -> candle_core::Result<Tensor> {
    let p = Planes::of(x, scale)?;
    if Planes::of(x, bias)?.per_sample != p.per_sample {
        candle_core::bail!("scale and bias shapes differ");
    }
    x.contiguous()?
        .apply_op3(&scale.contiguous()?, &bias.contiguous()?, Affine)
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
    fn matches_broadcast_ops() {
        for per_sample in [false, true] {
            let pshape: Vec<usize> = if per_sample { vec![2, 3] } else { vec![3] };
            let bshape: Vec<usize> = if per_sample { vec![2, 3, 1, 1] } else { vec![1, 3, 1, 1] };
            let x = Var::from_tensor(&randn(&[2, 3, 4, 5], 1)).unwrap();
            let s = Var::from_tensor(&randn(&pshape, 2)).unwrap();
            let b = Var::from_tensor(&randn(&pshape, 3)).unwrap();
            let probe = randn(&[2, 3, 4, 5], 4);

            let y = channel_affine(&x, &s, &b).unwrap();
            let r = x
                .broadcast_mul(&s.reshape(bshape.as_slice()).unwrap())
                .unwrap()
                .broadcast_add(&b.reshape(bshape.as_slice()).unwrap())
                .unwrap();
            assert!(max_diff(&y, &r) < 1e-12);
            let g1 = (y * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            let g2 = (r * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            for v in [x.as_tensor(), s.as_tensor(), b.as_tensor()] {
                assert!(max_diff(g1.get(v).unwrap(), g2.get(v).unwrap()) < 1e-12);
            }

            let y = add_channel_bias(&x, &b).unwrap();
            let r = x.broadcast_add(&b.reshape(bshape.as_slice()).unwrap()).unwrap();
            assert!(max_diff(&y, &r) < 1e-12);
            let g1 = (y * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            let g2 = (r * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            for v in [x.as_tensor(), b.as_tensor()] {
                assert!(max_diff(g1.get(v).unwrap(), g2.get(v).unwrap()) < 1e-12);
            }
        }
        assert!(add_channel_bias(&randn(&[2, 3, 4], 0), &randn(&[4], 0)).is_err());
    }
}
