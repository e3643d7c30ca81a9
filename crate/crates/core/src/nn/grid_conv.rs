//! Stride-1 convolution as implicit GEMM on a zero-padded grid.
//!
//! Activations are laid out as `(C, B·Hp·Wp)` with a `pad`-wide zero border
//! around every image. On this flat grid a kernel tap is a constant index
//! offset, so each tap is one matrix product on a shifted view and no patch
//! matrix is materialised. Border outputs are computed and discarded.

use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Tensor, WithDType};
use gemm::Parallelism;

#[derive(Debug, Clone, Copy)]
struct Grid {
    batch: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
}

impl Grid {
    fn hp(&self) -> usize {
        self.h + 2 * self.pad
    }

    fn wp(&self) -> usize {
        self.w + 2 * self.pad
    }

    fn len(&self) -> usize {
        self.batch * self.hp() * self.wp()
    }

    /// Range of grid positions whose taps all stay inside the grid.
    fn span(&self) -> (usize, usize) {
        let p0 = self.pad * self.wp() + self.pad;
        (p0, self.len() - p0)
    }

    fn offset(&self, tap: usize) -> isize {
        let (ky, kx) = (tap / self.k, tap % self.k);
        (ky as isize - self.pad as isize) * self.wp() as isize + kx as isize - self.pad as isize
    }

    fn to_grid<T: WithDType>(&self, x: &[T], c: usize) -> Vec<T> {
        let (hp, wp, n) = (self.hp(), self.wp(), self.len());
        let mut g = vec![T::zero(); c * n];
        for b in 0..self.batch {
            for ci in 0..c {
                let src = &x[(b * c + ci) * self.h * self.w..];
                let dst = &mut g[ci * n + b * hp * wp..];
                for y in 0..self.h {
                    let d = (y + self.pad) * wp + self.pad;
                    dst[d..d + self.w].copy_from_slice(&src[y * self.w..(y + 1) * self.w]);
                }
            }
        }
        g
    }

    fn from_grid<T: WithDType>(&self, g: &[T], c: usize) -> Vec<T> {
        let (hp, wp, n) = (self.hp(), self.wp(), self.len());
        let mut x = Vec::with_capacity(self.batch * c * self.h * self.w);
        for b in 0..self.batch {
            for ci in 0..c {
                let src = &g[ci * n + b * hp * wp..];
                for y in 0..self.h {
                    let s = (y + self.pad) * wp + self.pad;
                    x.extend_from_slice(&src[s..s + self.w]);
                }
            }
        }
        x
    }
}

/// `dst (m×n) (+)= lhs (m×k) · rhs (k×n)` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_acc<T: WithDType>(
    m: usize,
    n: usize,
    k: usize,
    dst: *mut T,
    (dst_rs, dst_cs): (isize, isize),
    accumulate: bool,
    lhs: *const T,
    (lhs_rs, lhs_cs): (isize, isize),
    rhs: *const T,
    (rhs_rs, rhs_cs): (isize, isize),
) {
    gemm::gemm(
        m,
        n,
        k,
        dst,
        dst_cs,
        dst_rs,
        accumulate,
        lhs,
        lhs_cs,
        lhs_rs,
        rhs,
        rhs_cs,
        rhs_rs,
        T::one(),
        T::one(),
        false,
        false,
        false,
        Parallelism::None,
    )
}

fn forward<T: WithDType>(g: &Grid, x: &[T], w: &[T], cin: usize, cout: usize) -> Vec<T> {
    let xg = g.to_grid(x, cin);
    let n = g.len();
    let (p0, p1) = g.span();
    let kk = g.k * g.k;
    let mut out = vec![T::zero(); cout * n];
    for tap in 0..kk {
        // SAFETY: p0 + offset(tap) ≥ 0 and p1 + offset(tap) ≤ n for every tap,
        // so all reads stay inside `xg`; writes cover columns [p0, p1) of `out`.
        unsafe {
            gemm_acc(
                cout,
                p1 - p0,
                cin,
                out.as_mut_ptr().add(p0),
                (n as isize, 1),
                tap > 0,
                w.as_ptr().add(tap),
                ((cin * kk) as isize, kk as isize),
                xg.as_ptr().offset(p0 as isize + g.offset(tap)),
                (n as isize, 1),
            );
        }
    }
    g.from_grid(&out, cout)
}

fn grad_input<T: WithDType>(g: &Grid, dy: &[T], w: &[T], cin: usize, cout: usize) -> Vec<T> {
    let dyg = g.to_grid(dy, cout);
    let n = g.len();
    let (p0, p1) = g.span();
    let kk = g.k * g.k;
    let mut dx = vec![T::zero(); cin * n];
    for tap in 0..kk {
        // SAFETY: as in `forward`, with the offset negated.
        unsafe {
            gemm_acc(
                cin,
                p1 - p0,
                cout,
                dx.as_mut_ptr().add(p0),
                (n as isize, 1),
                tap > 0,
                w.as_ptr().add(tap),
                (kk as isize, (cin * kk) as isize),
                dyg.as_ptr().offset(p0 as isize - g.offset(tap)),
                (n as isize, 1),
            );
        }
    }
    g.from_grid(&dx, cin)
}

fn grad_weight<T: WithDType>(g: &Grid, dy: &[T], x: &[T], cin: usize, cout: usize) -> Vec<T> {
    let dyg = g.to_grid(dy, cout);
    let xg = g.to_grid(x, cin);
    let n = g.len();
    let (p0, p1) = g.span();
    let kk = g.k * g.k;
    let mut dw = vec![T::zero(); cout * cin * kk];
    for tap in 0..kk {
        // SAFETY: reads columns [p0, p1) of `dyg` and the shifted range of
        // `xg`, both in bounds; writes one tap slice of `dw`.
        unsafe {
            gemm_acc(
                cout,
                cin,
                p1 - p0,
                dw.as_mut_ptr().add(tap),
                ((cin * kk) as isize, kk as isize),
                false,
                dyg.as_ptr().add(p0),
                (n as isize, 1),
                xg.as_ptr().offset(p0 as isize + g.offset(tap)),
                (1, n as isize),
            );
        }
    }
    dw
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("grid convolution expects contiguous tensors"),
    }
}

#[derive(Clone, Copy)]
enum Pass {
    Forward,
    GradInput,
    GradWeight,
}

struct GridConv {
    grid: Grid,
    cin: usize,
    cout: usize,
    pass: Pass,
}

impl GridConv {
    fn run<T: WithDType>(&self, a: &[T], b: &[T]) -> Vec<T> {
        let (g, cin, cout) = (&self.grid, self.cin, self.cout);
        match self.pass {
            Pass::Forward => forward(g, a, b, cin, cout),
            Pass::GradInput => grad_input(g, a, b, cin, cout),
            Pass::GradWeight => grad_weight(g, a, b, cin, cout),
        }
    }

    fn out_shape(&self) -> Shape {
        let g = &self.grid;
        match self.pass {
            Pass::Forward => Shape::from((g.batch, self.cout, g.h, g.w)),
            Pass::GradInput => Shape::from((g.batch, self.cin, g.h, g.w)),
            Pass::GradWeight => Shape::from((self.cout, self.cin, g.k, g.k)),
        }
    }

    fn with(&self, pass: Pass) -> Self {
        Self { pass, ..*self }
    }
}

impl CustomOp2 for GridConv {
    fn name(&self) -> &'static str {
        "grid-conv"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match (s1, s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => CpuStorage::F32(self.run(contiguous(a, l1)?, contiguous(b, l2)?)),
            (CpuStorage::F64(a), CpuStorage::F64(b)) => CpuStorage::F64(self.run(contiguous(a, l1)?, contiguous(b, l2)?)),
            _ => candle_core::bail!("grid convolution supports matching f32/f64"),
        };
        Ok((out, self.out_shape()))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let dx = grad.apply_op2_no_bwd(w, &self.with(Pass::GradInput))?;
        let dw = grad.apply_op2_no_bwd(x, &self.with(Pass::GradWeight))?;
        Ok((Some(dx), Some(dw)))
    }
}

/// Stride-1, ungrouped, odd-kernel convolution with "same" padding.
pub(super) fn conv2d_same(x: &Tensor, w: &Tensor) -> candle_core::Result<Tensor> {
    let (batch, cin, h, wd) = x.dims4()?;
    let (cout, cw, k, k2) = w.dims4()?;
    if cw != cin || k != k2 || k % 2 == 0 {
        candle_core::bail!("grid convolution needs an odd square kernel over all input channels");
    }
    let op = GridConv {
        grid: Grid {
            batch,
            h,
            w: wd,
            k,
            pad: k / 2,
        },
        cin,
        cout,
        pass: Pass::Forward,
    };
    x.contiguous()?.apply_op2(&w.contiguous()?, op)
}
