//! Fused per-group standardisation with an analytic backward pass.

use candle_core::{CpuStorage, CustomOp1, CustomOp3, Layout, Shape, Tensor, WithDType};

struct Standardize {
    groups: usize,
    eps: f64,
}

struct StandardizeGrad {
    groups: usize,
    eps: f64,
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("group standardisation expects a contiguous tensor"),
    }
}

fn moments<T: WithDType>(x: &[T]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().map(|v| v.to_f64()).sum::<f64>() / n;
    let var = x.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

fn forward<T: WithDType>(x: &[T], groups: usize, eps: f64) -> Vec<T> {
    let n = x.len() / groups;
    let mut out = Vec::with_capacity(x.len());
    for g in x.chunks(n) {
        let (mean, var) = moments(g);
        let rstd = 1.0 / (var + eps).sqrt();
        out.extend(g.iter().map(|v| T::from_f64((v.to_f64() - mean) * rstd)));
    }
    out
}

/// dx = rstd · (dy − mean(dy) − x̂ · mean(dy · x̂)) within each group.
fn backward<T: WithDType>(x: &[T], xhat: &[T], dy: &[T], groups: usize, eps: f64) -> Vec<T> {
    let n = x.len() / groups;
    let mut out = Vec::with_capacity(x.len());
    for ((xg, hg), dg) in x.chunks(n).zip(xhat.chunks(n)).zip(dy.chunks(n)) {
        let (_, var) = moments(xg);
        let rstd = 1.0 / (var + eps).sqrt();
        let m_dy = dg.iter().map(|v| v.to_f64()).sum::<f64>() / n as f64;
        let m_dyh = dg
            .iter()
            .zip(hg)
            .map(|(d, h)| d.to_f64() * h.to_f64())
            .sum::<f64>()
            / n as f64;
        out.extend(
            dg.iter()
                .zip(hg)
                .map(|(d, h)| T::from_f64(rstd * (d.to_f64() - m_dy - h.to_f64() * m_dyh))),
        );
    }
    out
}

impl CustomOp1 for Standardize {
    fn name(&self) -> &'static str {
        "group-standardize"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(forward(contiguous(v, l)?, self.groups, self.eps)),
            CpuStorage::F64(v) => CpuStorage::F64(forward(contiguous(v, l)?, self.groups, self.eps)),
            _ => candle_core::bail!("group standardisation supports f32 and f64"),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let g = StandardizeGrad {
            groups: self.groups,
            eps: self.eps,
        };
        Ok(Some(arg.apply_op3_no_bwd(res, &grad.contiguous()?, &g)?))
    }
}

impl CustomOp3 for StandardizeGrad {
    fn name(&self) -> &'static str {
        "group-standardize-grad"
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
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(h), CpuStorage::F32(d)) => CpuStorage::F32(backward(
                contiguous(x, l1)?,
                contiguous(h, l2)?,
                contiguous(d, l3)?,
                self.groups,
                self.eps,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(h), CpuStorage::F64(d)) => CpuStorage::F64(backward(
                contiguous(x, l1)?,
                contiguous(h, l2)?,
                contiguous(d, l3)?,
                self.groups,
                self.eps,
            )),
            _ => candle_core::bail!("group standardisation grad: dtype mismatch"),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// Standardises each of `groups` contiguous blocks per batch element to zero
/// mean and unit variance.
pub fn group_standardize(x: &Tensor, groups: usize, eps: f64) -> candle_core::Result<Tensor> {
    let b = x.dim(0)?;
    if groups == 0 || (x.elem_count() / b.max(1)) % groups != 0 {
        candle_core::bail!("{} elements per sample not divisible into {groups} groups", x.elem_count() / b.max(1));
    }
    x.contiguous()?.apply_op1(Standardize {
        groups: groups * b,
        eps,
    })
}
