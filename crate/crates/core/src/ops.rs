//! Tensor primitives used by every network in the crate.
//!
//! Convolutions are lowered to `im2col` + matrix multiply so that the backward
//! pass is two more matrix multiplies and a `col2im` scatter, which is much
//! cheaper on CPU than a transposed convolution. Nearest upsampling and the
//! straight-through quantizer are custom ops with hand-written gradients.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, DType, Layout, Shape, Tensor};

use crate::error::{contract, Result};

/// Geometry of a 2-D sliding window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Window {
    pub fn square(kernel: usize, stride: usize, padding: usize, dilation: usize) -> Self {
        Self {
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding,
            dilation,
        }
    }

    /// "Same" padding for odd kernels at stride 1.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self::square(kernel, 1, dilation * (kernel - 1) / 2, dilation)
    }

    pub fn out_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let eff_h = self.dilation * (self.kernel_h - 1) + 1;
        let eff_w = self.dilation * (self.kernel_w - 1) + 1;
        if h + 2 * self.padding < eff_h || w + 2 * self.padding < eff_w || self.stride == 0 {
            return None;
        }
        Some((
            (h + 2 * self.padding - eff_h) / self.stride + 1,
            (w + 2 * self.padding - eff_w) / self.stride + 1,
        ))
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    out_h: usize,
    out_w: usize,
    win: Window,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.channels * self.win.kernel_h * self.win.kernel_w
    }

    fn cols(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    /// Visits every (column-buffer offset, image offset) pair that lands inside the
    /// image. Padding positions are skipped.
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let w = self.win;
        let plane = self.height * self.width;
        let out_plane = self.out_h * self.out_w;
        let ncols = self.cols();
        for c in 0..self.channels {
            for ky in 0..w.kernel_h {
                for kx in 0..w.kernel_w {
                    let row = (c * w.kernel_h + ky) * w.kernel_w + kx;
                    let row_base = row * ncols;
                    for b in 0..self.batch {
                        let img_base = (b * self.channels + c) * plane;
                        let col_base = b * out_plane;
                        for oy in 0..self.out_h {
                            let iy = (oy * w.stride + ky * w.dilation) as isize - w.padding as isize;
                            if iy < 0 || iy >= self.height as isize {
                                continue;
                            }
                            let iy = iy as usize;
                            for ox in 0..self.out_w {
                                let ix = (ox * w.stride + kx * w.dilation) as isize
                                    - w.padding as isize;
                                if ix < 0 || ix >= self.width as isize {
                                    continue;
                                }
                                f(
                                    row_base + col_base + oy * self.out_w + ox,
                                    img_base + iy * self.width + ix as usize,
                                );
                            }
                        }
                    }
                }
            }
        }
    }
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("custom op expects a contiguous input"),
    }
}

fn im2col_impl<T: Copy + Default>(src: &[T], g: &Geometry) -> Vec<T> {
    let mut dst = vec![T::default(); g.rows() * g.cols()];
    g.for_each(|d, s| dst[d] = src[s]);
    dst
}

fn col2im_impl<T: Copy + Default + std::ops::AddAssign>(src: &[T], g: &Geometry) -> Vec<T> {
    let mut dst = vec![T::default(); g.batch * g.channels * g.height * g.width];
    g.for_each(|c, s| dst[s] += src[c]);
    dst
}

struct Im2Col(Geometry);
struct Col2Im(Geometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(
        &self,
        storage: &CpuStorage,
        layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(im2col_impl(contiguous_slice(v, layout)?, g)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col_impl(contiguous_slice(v, layout)?, g)),
            _ => candle_core::bail!("im2col: unsupported dtype {:?}", storage.dtype()),
        };
        Ok((out, Shape::from((g.rows(), g.cols()))))
    }

    fn bwd(
        &self,
        _arg: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(
        &self,
        storage: &CpuStorage,
        layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(col2im_impl(contiguous_slice(v, layout)?, g)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im_impl(contiguous_slice(v, layout)?, g)),
            _ => candle_core::bail!("col2im: unsupported dtype {:?}", storage.dtype()),
        };
        Ok((out, Shape::from((g.batch, g.channels, g.height, g.width))))
    }

    fn bwd(
        &self,
        _arg: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

fn geometry(x: &Tensor, win: Window) -> Result<Geometry> {
    let (batch, channels, height, width) = x.dims4()?;
    let Some((out_h, out_w)) = win.out_size(height, width) else {
        contract!("window {win:?} does not fit a {height}x{width} input");
    };
    Ok(Geometry {
        batch,
        channels,
        height,
        width,
        out_h,
        out_w,
        win,
    })
}

/// Unfolds `(B, C, H, W)` into `(C·kh·kw, B·Ho·Wo)` columns.
pub fn im2col(x: &Tensor, win: Window) -> Result<Tensor> {
    let g = geometry(x, win)?;
    Ok(x.contiguous()?.apply_op1(Im2Col(g))?)
}

/// Folds `(C·kh·kw, B·Ho·Wo)` columns back into `(B, C, H, W)`, summing overlaps.
pub fn col2im(
    cols: &Tensor,
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    win: Window,
) -> Result<Tensor> {
    let Some((out_h, out_w)) = win.out_size(height, width) else {
        contract!("window {win:?} does not fit a {height}x{width} output");
    };
    let g = Geometry {
        batch,
        channels,
        height,
        width,
        out_h,
        out_w,
        win,
    };
    if cols.dims() != [g.rows(), g.cols()] {
        contract!(
            "col2im expects columns of shape ({}, {}), got {:?}",
            g.rows(),
            g.cols(),
            cols.dims()
        );
    }
    Ok(cols.contiguous()?.apply_op1(Col2Im(g))?)
}

/// 2-D convolution with an `(out, in, kh, kw)` kernel.
pub fn conv2d(x: &Tensor, kernel: &Tensor, bias: Option<&Tensor>, win: Window) -> Result<Tensor> {
    let (b, c, _, _) = x.dims4()?;
    let (co, ci, kh, kw) = kernel.dims4()?;
    if ci != c || kh != win.kernel_h || kw != win.kernel_w {
        contract!(
            "conv kernel {:?} does not match input channels {c} / window {win:?}",
            kernel.dims()
        );
    }
    let g = geometry(x, win)?;
    let cols = x.contiguous()?.apply_op1(Im2Col(g))?;
    let out = kernel.reshape((co, ci * kh * kw))?.matmul(&cols)?;
    let out = out
        .reshape((co, b, g.out_h, g.out_w))?
        .permute((1, 0, 2, 3))?;
    Ok(match bias {
        Some(bias) => out.broadcast_add(&bias.reshape((1, co, 1, 1))?)?,
        None => out,
    })
}

struct UpsampleNearest(usize);
struct SumPool(usize);

fn upsample_impl<T: Copy + Default>(src: &[T], n: usize, h: usize, w: usize, s: usize) -> Vec<T> {
    let (oh, ow) = (h * s, w * s);
    let mut dst = vec![T::default(); n * oh * ow];
    for p in 0..n {
        for y in 0..oh {
            let srow = &src[(p * h + y / s) * w..(p * h + y / s + 1) * w];
            let drow = &mut dst[(p * oh + y) * ow..(p * oh + y + 1) * ow];
            for (x, d) in drow.iter_mut().enumerate() {
                *d = srow[x / s];
            }
        }
    }
    dst
}

fn sum_pool_impl<T: Copy + Default + std::ops::AddAssign>(
    src: &[T],
    n: usize,
    h: usize,
    w: usize,
    s: usize,
) -> Vec<T> {
    let (oh, ow) = (h / s, w / s);
    let mut dst = vec![T::default(); n * oh * ow];
    for p in 0..n {
        for y in 0..h {
            for x in 0..w {
                dst[(p * oh + y / s) * ow + x / s] += src[(p * h + y) * w + x];
            }
        }
    }
    dst
}

fn planes(layout: &Layout) -> candle_core::Result<(usize, usize, usize)> {
    let dims = layout.dims();
    if dims.len() != 4 {
        candle_core::bail!("expected a 4-d tensor, got {dims:?}");
    }
    Ok((dims[0] * dims[1], dims[2], dims[3]))
}

impl CustomOp1 for UpsampleNearest {
    fn name(&self) -> &'static str {
        "upsample-nearest"
    }

    fn cpu_fwd(
        &self,
        storage: &CpuStorage,
        layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, h, w) = planes(layout)?;
        let s = self.0;
        let out = match storage {
            CpuStorage::F32(v) => {
                CpuStorage::F32(upsample_impl(contiguous_slice(v, layout)?, n, h, w, s))
            }
            CpuStorage::F64(v) => {
                CpuStorage::F64(upsample_impl(contiguous_slice(v, layout)?, n, h, w, s))
            }
            _ => candle_core::bail!("upsample: unsupported dtype"),
        };
        let d = layout.dims();
        Ok((out, Shape::from((d[0], d[1], h * s, w * s))))
    }

    fn bwd(
        &self,
        _arg: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(SumPool(self.0))?))
    }
}

impl CustomOp1 for SumPool {
    fn name(&self) -> &'static str {
        "sum-pool"
    }

    fn cpu_fwd(
        &self,
        storage: &CpuStorage,
        layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, h, w) = planes(layout)?;
        let s = self.0;
        let out = match storage {
            CpuStorage::F32(v) => {
                CpuStorage::F32(sum_pool_impl(contiguous_slice(v, layout)?, n, h, w, s))
            }
            CpuStorage::F64(v) => {
                CpuStorage::F64(sum_pool_impl(contiguous_slice(v, layout)?, n, h, w, s))
            }
            _ => candle_core::bail!("sum-pool: unsupported dtype"),
        };
        let d = layout.dims();
        Ok((out, Shape::from((d[0], d[1], h / s, w / s))))
    }
}

/// Nearest-neighbour upsampling of an NCHW tensor by an integer factor.
pub fn upsample_nearest(x: &Tensor, scale: usize) -> Result<Tensor> {
    if scale == 0 {
        contract!("upsample scale must be positive");
    }
    if scale == 1 {
        return Ok(x.clone());
    }
    x.dims4()?;
    Ok(x.contiguous()?.apply_op1(UpsampleNearest(scale))?)
}

/// Forward: returns `quantized` bit-for-bit. Backward: identity to `features`.
struct StraightThrough {
    quantized: Tensor,
}

impl CustomOp1 for StraightThrough {
    fn name(&self) -> &'static str {
        "straight-through"
    }

    fn cpu_fwd(
        &self,
        storage: &CpuStorage,
        layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        if storage.dtype() != self.quantized.dtype() || layout.shape() != self.quantized.shape() {
            candle_core::bail!("straight-through: quantized tensor does not match its input");
        }
        let q = self.quantized.contiguous()?;
        let (qs, ql) = q.storage_and_layout();
        let candle_core::Storage::Cpu(qs) = &*qs else {
            candle_core::bail!("straight-through: cpu only");
        };
        let out = match qs {
            CpuStorage::F32(v) => CpuStorage::F32(contiguous_slice(v, ql)?.to_vec()),
            CpuStorage::F64(v) => CpuStorage::F64(contiguous_slice(v, ql)?.to_vec()),
            _ => candle_core::bail!("straight-through: unsupported dtype"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(
        &self,
        _arg: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.clone()))
    }
}

/// Straight-through estimator: the value of `quantized`, the gradient path of `features`.
pub fn straight_through(features: &Tensor, quantized: &Tensor) -> Result<Tensor> {
    if features.dims() != quantized.dims() {
        contract!(
            "straight-through shapes differ: {:?} vs {:?}",
            features.dims(),
            quantized.dims()
        );
    }
    Ok(features.apply_op1(StraightThrough {
        quantized: quantized.detach(),
    })?)
}

/// Copies any float tensor into a flat `Vec<f64>` (row-major).
pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

/// Scalar value of a single-element float tensor as `f64`.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}

/// Numerically stable sigmoid built from differentiable primitives.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// Leaky ReLU with the given negative slope.
pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(candle_nn::ops::leaky_relu(x, slope)?)
}
