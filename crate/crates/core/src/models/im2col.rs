//! Convolution as `W x im2col(x)`. `Im2Col` and `Col2Im` are each other's
//! adjoint, so gradients flow through batched matmuls instead of the
//! backend's direct convolution kernels.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, Device, Layout, Shape, Tensor};
use rayon::prelude::*;

use crate::error::Result;

/// Geometry of a square-kernel convolution over `(n, c, h, w)` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Patches {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Patches {
    pub fn out_size(&self) -> (usize, usize) {
        let o = |s: usize| (s + 2 * self.padding - self.kernel) / self.stride + 1;
        (o(self.height), o(self.width))
    }

    /// Rows of the column matrix: `c * k * k`.
    pub fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        let (oh, ow) = self.out_size();
        oh * ow
    }

    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Visits `(row, col, pixel)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = self.out_size();
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        for ci in 0..self.channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    for oy in 0..oh {
                        let y = (oy * s + ky) as isize - p;
                        if y < 0 || y >= self.height as isize {
                            continue;
                        }
                        let base = (ci * self.height + y as usize) * self.width;
                        for ox in 0..ow {
                            let x = (ox * s + kx) as isize - p;
                            if x < 0 || x >= self.width as isize {
                                continue;
                            }
                            f(row, oy * ow + ox, base + x as usize);
                        }
                    }
                }
            }
        }
    }
}

fn contiguous<'a, T: candle_core::WithDType>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("im2col/col2im need contiguous input"),
    }
}

fn im2col<T: Copy + Default + Send + Sync>(src: &[T], n: usize, g: &Patches) -> Vec<T> {
    let (rows, cols, img) = (g.rows(), g.cols(), g.image_len());
    let mut out = vec![T::default(); n * rows * cols];
    out.par_chunks_mut(rows * cols).enumerate().for_each(|(b, dst)| {
        let x = &src[b * img..(b + 1) * img];
        g.for_each_tap(|r, c, i| dst[r * cols + c] = x[i]);
    });
    out
}

fn col2im<T: Copy + Default + Send + Sync + std::ops::AddAssign>(src: &[T], n: usize, g: &Patches) -> Vec<T> {
    let (rows, cols, img) = (g.rows(), g.cols(), g.image_len());
    let mut out = vec![T::default(); n * img];
    out.par_chunks_mut(img).enumerate().for_each(|(b, dst)| {
        let m = &src[b * rows * cols..(b + 1) * rows * cols];
        g.for_each_tap(|r, c, i| dst[i] += m[r * cols + c]);
    });
    out
}

/// `(n, c, h, w)` to `(n, c*k*k, oh*ow)`.
pub struct Im2Col(pub Patches);

/// `(n, c*k*k, oh*ow)` to `(n, c, h, w)`, summing overlapping taps.
pub struct Col2Im(pub Patches);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let n = layout.dims()[0];
        let shape = Shape::from((n, g.rows(), g.cols()));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(im2col(contiguous(v, layout)?, n, g)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col(contiguous(v, layout)?, n, g)),
            _ => candle_core::bail!("im2col: only f32 and f64 are supported"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let n = layout.dims()[0];
        let shape = Shape::from((n, g.channels, g.height, g.width));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(col2im(contiguous(v, layout)?, n, g)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im(contiguous(v, layout)?, n, g)),
            _ => candle_core::bail!("col2im: only f32 and f64 are supported"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Im2Col(self.0))?))
    }
}

/// Convolution whose column matrix lives only inside the forward and
/// backward calls, so activations cost no more than the output map.
struct ConvOp {
    g: Patches,
    c_out: usize,
}

impl ConvOp {
    fn forward(&self, x: &Tensor, w: &Tensor) -> candle_core::Result<Tensor> {
        let (n, (oh, ow)) = (x.dim(0)?, self.g.out_size());
        let cols = x.contiguous()?.apply_op1_no_bwd(&Im2Col(self.g))?;
        w.reshape((1, self.c_out, self.g.rows()))?
            .broadcast_matmul(&cols)?
            .reshape((n, self.c_out, oh, ow))
    }

    fn cpu_apply<T: candle_core::WithDType>(
        &self,
        x: &[T],
        xl: &Layout,
        w: &[T],
        wl: &Layout,
    ) -> candle_core::Result<(Vec<T>, Shape)> {
        let x = Tensor::from_slice(contiguous(x, xl)?, xl.shape(), &Device::Cpu)?;
        let w = Tensor::from_slice(contiguous(w, wl)?, wl.shape(), &Device::Cpu)?;
        let y = self.forward(&x, &w)?;
        let shape = y.shape().clone();
        Ok((y.flatten_all()?.to_vec1::<T>()?, shape))
    }
}

impl CustomOp2 for ConvOp {
    fn name(&self) -> &'static str {
        "conv2d_im2col"
    }

    fn cpu_fwd(
        &self,
        x: &CpuStorage,
        xl: &Layout,
        w: &CpuStorage,
        wl: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        match (x, w) {
            (CpuStorage::F32(x), CpuStorage::F32(w)) => {
                let (v, s) = self.cpu_apply(x, xl, w, wl)?;
                Ok((CpuStorage::F32(v), s))
            }
            (CpuStorage::F64(x), CpuStorage::F64(w)) => {
                let (v, s) = self.cpu_apply(x, xl, w, wl)?;
                Ok((CpuStorage::F64(v), s))
            }
            _ => candle_core::bail!("conv2d: input and weight must both be f32 or f64"),
        }
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (x, w, grad) = (x.detach(), w.detach(), grad.detach());
        let n = x.dim(0)?;
        let rows = self.g.rows();
        let g = grad.reshape((n, self.c_out, self.g.cols()))?;
        let cols = x.contiguous()?.apply_op1_no_bwd(&Im2Col(self.g))?;
        let grad_w = g.matmul(&cols.transpose(1, 2)?)?.sum(0)?.reshape(w.shape())?;
        drop(cols);
        let w_t = w.reshape((self.c_out, rows))?.t()?.contiguous()?.reshape((1, rows, self.c_out))?;
        let grad_cols = w_t.broadcast_matmul(&g)?;
        let grad_x = grad_cols.apply_op1_no_bwd(&Col2Im(self.g))?;
        Ok((Some(grad_x), Some(grad_w)))
    }
}

/// Cross-correlation of `x (n, c, h, w)` with `weight (c_out, c, k, k)`.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4()?;
    let (c_out, _, k, _) = weight.dims4()?;
    let g = Patches {
        channels: c,
        height: h,
        width: w,
        kernel: k,
        stride,
        padding,
    };
    Ok(x.apply_op2(weight, ConvOp { g, c_out })?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn max_abs(t: Tensor) -> f64 {
        t.abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_dtype(DType::F64).unwrap().to_scalar().unwrap()
    }

    #[test]
    fn matches_backend_convolution() {
        let d = Device::Cpu;
        for (c, k, s, p, hw) in [(3, 3, 1, 1, 8), (4, 3, 2, 1, 9), (3, 4, 4, 0, 8), (2, 1, 1, 0, 5)] {
            let x = Tensor::randn(0f64, 1.0, (2, c, hw, hw), &d).unwrap();
            let w = Tensor::randn(0f64, 1.0, (5, c, k, k), &d).unwrap();
            let ours = conv2d(&x, &w, s, p).unwrap();
            let theirs = x.conv2d(&w, p, s, 1, 1).unwrap();
            assert_eq!(ours.dims(), theirs.dims());
            assert!(max_abs((ours - theirs).unwrap()) < 1e-10);
        }
    }

    #[test]
    fn gradients_match_backend_convolution() {
        let d = Device::Cpu;
        let x = Var::randn(0f64, 1.0, (2, 3, 7, 7), &d).unwrap();
        let w = Var::randn(0f64, 1.0, (4, 3, 3, 3), &d).unwrap();
        let r = Tensor::randn(0f64, 1.0, (2, 4, 4, 4), &d).unwrap();
        let ours = (conv2d(x.as_tensor(), w.as_tensor(), 2, 1).unwrap() * &r).unwrap().sum_all().unwrap().backward().unwrap();
        let theirs = (x.as_tensor().conv2d(w.as_tensor(), 1, 2, 1, 1).unwrap() * &r).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&x, &w] {
            let a = ours.get(v).unwrap();
            let b = theirs.get(v).unwrap();
            assert!(max_abs((a - b).unwrap()) < 1e-10);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let d = Device::Cpu;
        let g = Patches { channels: 2, height: 5, width: 6, kernel: 3, stride: 2, padding: 1 };
        let (oh, ow) = g.out_size();
        let x = Tensor::randn(0f64, 1.0, (3, 2, 5, 6), &d).unwrap();
        let y = Tensor::randn(0f64, 1.0, (3, g.rows(), oh * ow), &d).unwrap();
        let lhs: f64 = (x.apply_op1_no_bwd(&Im2Col(g)).unwrap() * &y).unwrap().sum_all().unwrap().to_scalar().unwrap();
        let rhs: f64 = (y.apply_op1_no_bwd(&Col2Im(g)).unwrap() * &x).unwrap().sum_all().unwrap().to_scalar().unwrap();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
