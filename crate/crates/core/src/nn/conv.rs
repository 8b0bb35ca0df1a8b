//! 2-D convolution as a candle custom op.
//!
//! Forward and both backward passes are lowered to im2col / col2im plus a
//! single GEMM per sample, which is much faster on CPU than the direct
//! transposed-convolution kernel candle uses for the input gradient.

use candle_core::{
    backend::BackendStorage, bail, CpuStorage, CustomOp2, DType, Layout, Result, Shape, Tensor,
    WithDType,
};

#[derive(Debug, Clone, Copy)]
struct Geometry {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl Geometry {
    fn new(x: (usize, usize, usize, usize), wt: (usize, usize, usize, usize), stride: usize, pad: usize) -> Result<Self> {
        let (batch, c_in, h, w) = x;
        let (c_out, wc, kh, kw) = wt;
        if wc != c_in {
            bail!("conv2d: input has {c_in} channels but kernel expects {wc}");
        }
        if kh != kw {
            bail!("conv2d: only square kernels are supported, got {kh}x{kw}");
        }
        if stride == 0 {
            bail!("conv2d: stride must be positive");
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            bail!("conv2d: kernel {kh} larger than padded input {h}x{w}");
        }
        let h_out = (h + 2 * pad - kh) / stride + 1;
        let w_out = (w + 2 * pad - kw) / stride + 1;
        Ok(Self { batch, c_in, h, w, c_out, k: kh, stride, pad, h_out, w_out })
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }

    fn in_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    fn out_len(&self) -> usize {
        self.c_out * self.col_cols()
    }

    /// Input row index for output row `o` and kernel offset `ky`, if inside the image.
    #[inline]
    fn src(&self, o: usize, kk: usize, extent: usize) -> Option<usize> {
        let i = (o * self.stride + kk) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < extent).then_some(i as usize)
    }
}

fn im2col<T: WithDType>(g: &Geometry, x: &[T], cols: &mut [T]) {
    let n = g.col_cols();
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.h_out {
                    let line = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    match g.src(oy, ky, g.h) {
                        None => line.fill(T::zero()),
                        Some(iy) => {
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = match g.src(ox, kx, g.w) {
                                    Some(ix) => plane[iy * g.w + ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: WithDType>(g: &Geometry, cols: &[T], x: &mut [T]) {
    let n = g.col_cols();
    for ci in 0..g.c_in {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.h_out {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for ox in 0..g.w_out {
                        if let Some(ix) = g.src(ox, kx, g.w) {
                            plane[iy * g.w + ix] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Row-major GEMM: `dst (m x n) [+]= op(a) (m x k) * op(b) (k x n)`.
///
/// `a_t` / `b_t` mean the operand is stored transposed (k x m, n x k).
#[allow(clippy::too_many_arguments)]
fn gemm_rm<T: WithDType>(
    m: usize,
    n: usize,
    k: usize,
    dst: &mut [T],
    accumulate: bool,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
) {
    debug_assert!(dst.len() >= m * n && a.len() >= m * k && b.len() >= k * n);
    let (a_rs, a_cs) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (b_rs, b_cs) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices are at least as large as the strided extents above.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            n as isize,
            accumulate,
            a.as_ptr(),
            a_cs,
            a_rs,
            b.as_ptr(),
            b_cs,
            b_rs,
            T::one(),
            T::one(),
            false,
            false,
            false,
            gemm::Parallelism::None,
        )
    }
}

fn contiguous<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> Result<&'a [T]> {
    let Some((start, end)) = l.contiguous_offsets() else {
        bail!("conv2d: non-contiguous operand");
    };
    Ok(&s.as_slice::<T>()?[start..end])
}

fn dims4(l: &Layout) -> Result<(usize, usize, usize, usize)> {
    l.shape().dims4()
}

#[derive(Debug, Clone, Copy)]
struct Conv2dOp {
    stride: usize,
    pad: usize,
}

impl Conv2dOp {
    fn fwd<T: WithDType>(&self, g: &Geometry, x: &[T], w: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); g.batch * g.out_len()];
        let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
        for b in 0..g.batch {
            im2col(g, &x[b * g.in_len()..(b + 1) * g.in_len()], &mut cols);
            let dst = &mut out[b * g.out_len()..(b + 1) * g.out_len()];
            gemm_rm(g.c_out, g.col_cols(), g.col_rows(), dst, false, w, false, &cols, false);
        }
        out
    }
}

impl CustomOp2 for Conv2dOp {
    fn name(&self) -> &'static str {
        "im2col-conv2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = Geometry::new(dims4(l1)?, dims4(l2)?, self.stride, self.pad)?;
        let shape = Shape::from((g.batch, g.c_out, g.h_out, g.w_out));
        let out = match (s1.dtype(), s2.dtype()) {
            (DType::F32, DType::F32) => {
                CpuStorage::F32(self.fwd::<f32>(&g, contiguous(s1, l1)?, contiguous(s2, l2)?))
            }
            (DType::F64, DType::F64) => {
                CpuStorage::F64(self.fwd::<f64>(&g, contiguous(s1, l1)?, contiguous(s2, l2)?))
            }
            (a, b) => bail!("conv2d: unsupported dtypes {a:?}/{b:?}"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let (_, _, h, wd) = x.dims4()?;
        let gx = if x.track_op() {
            let op = InputGradOp { stride: self.stride, pad: self.pad, h, w: wd };
            Some(grad.apply_op2_no_bwd(&w.contiguous()?, &op)?)
        } else {
            None
        };
        let gw = if w.track_op() {
            let k = w.dim(2)?;
            let op = WeightGradOp { stride: self.stride, pad: self.pad, k };
            Some(x.contiguous()?.apply_op2_no_bwd(&grad, &op)?)
        } else {
            None
        };
        Ok((gx, gw))
    }
}

/// dL/dx from (dL/dy, w).
#[derive(Debug, Clone, Copy)]
struct InputGradOp {
    stride: usize,
    pad: usize,
    h: usize,
    w: usize,
}

impl InputGradOp {
    fn run<T: WithDType>(&self, g: &Geometry, gy: &[T], w: &[T]) -> Vec<T> {
        let mut gx = vec![T::zero(); g.batch * g.in_len()];
        let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
        for b in 0..g.batch {
            let src = &gy[b * g.out_len()..(b + 1) * g.out_len()];
            // cols (ckk x n) = w^T (ckk x o) * gy (o x n)
            gemm_rm(g.col_rows(), g.col_cols(), g.c_out, &mut cols, false, w, true, src, false);
            col2im_add(g, &cols, &mut gx[b * g.in_len()..(b + 1) * g.in_len()]);
        }
        gx
    }
}

impl CustomOp2 for InputGradOp {
    fn name(&self) -> &'static str {
        "im2col-conv2d-input-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let (batch, _, h_out, w_out) = dims4(l1)?;
        let wt = dims4(l2)?;
        let g = Geometry::new((batch, wt.1, self.h, self.w), wt, self.stride, self.pad)?;
        if (g.h_out, g.w_out) != (h_out, w_out) {
            bail!("conv2d input grad: output grid mismatch");
        }
        let shape = Shape::from((batch, g.c_in, self.h, self.w));
        let out = match s1.dtype() {
            DType::F32 => CpuStorage::F32(self.run::<f32>(&g, contiguous(s1, l1)?, contiguous(s2, l2)?)),
            DType::F64 => CpuStorage::F64(self.run::<f64>(&g, contiguous(s1, l1)?, contiguous(s2, l2)?)),
            d => bail!("conv2d input grad: unsupported dtype {d:?}"),
        };
        Ok((out, shape))
    }
}

/// dL/dw from (x, dL/dy).
#[derive(Debug, Clone, Copy)]
struct WeightGradOp {
    stride: usize,
    pad: usize,
    k: usize,
}

impl WeightGradOp {
    fn run<T: WithDType>(&self, g: &Geometry, x: &[T], gy: &[T]) -> Vec<T> {
        let mut gw = vec![T::zero(); g.c_out * g.col_rows()];
        let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
        for b in 0..g.batch {
            im2col(g, &x[b * g.in_len()..(b + 1) * g.in_len()], &mut cols);
            let src = &gy[b * g.out_len()..(b + 1) * g.out_len()];
            // gw (o x ckk) += gy (o x n) * cols^T (n x ckk)
            gemm_rm(g.c_out, g.col_rows(), g.col_cols(), &mut gw, b > 0, src, false, &cols, true);
        }
        gw
    }
}

impl CustomOp2 for WeightGradOp {
    fn name(&self) -> &'static str {
        "im2col-conv2d-weight-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let xd = dims4(l1)?;
        let (_, c_out, _, _) = dims4(l2)?;
        let g = Geometry::new(xd, (c_out, xd.1, self.k, self.k), self.stride, self.pad)?;
        let shape = Shape::from((c_out, g.c_in, self.k, self.k));
        let out = match s1.dtype() {
            DType::F32 => CpuStorage::F32(self.run::<f32>(&g, contiguous(s1, l1)?, contiguous(s2, l2)?)),
            DType::F64 => CpuStorage::F64(self.run::<f64>(&g, contiguous(s1, l1)?, contiguous(s2, l2)?)),
            d => bail!("conv2d weight grad: unsupported dtype {d:?}"),
        };
        Ok((out, shape))
    }
}

/// `x (B, C, H, W)` convolved with `w (O, C, k, k)`, no bias.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    x.contiguous()?.apply_op2(&w.contiguous()?, Conv2dOp { stride, pad })
}
