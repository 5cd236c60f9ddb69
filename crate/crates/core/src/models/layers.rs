//! Basic layers: linear, 1x1 and kxk convolution, layer and batch normalization.

use candle_core::{Tensor, Var, D};

use super::params::{Init, ParamStore};
use crate::error::Result;

/// Forward-pass behaviour of normalization layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; batch-norm running statistics are updated.
    Train,
    /// Frozen running statistics, no state changes.
    Eval,
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Option<Var>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: store.param(&format!("{name}.weight"), (d_out, d_in), Init::TruncNormal(0.02))?,
            bias: Some(store.param(&format!("{name}.bias"), d_out, Init::Zeros)?),
        })
    }

    pub fn with_init(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        weight: Init,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.param(&format!("{name}.weight"), (d_out, d_in), weight)?,
            bias: Some(store.param(&format!("{name}.bias"), d_out, Init::Zeros)?),
        })
    }

    /// Applies `x W^T + b` over the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims.last().expect("non-scalar input");
        let rows = x.elem_count() / d_in;
        let y = x.reshape((rows, d_in))?.matmul(&self.weight.t()?)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b.as_tensor())?,
            None => y,
        };
        let mut out = dims;
        *out.last_mut().expect("non-scalar") = self.weight.dim(0)?;
        Ok(y.reshape(out)?)
    }
}

/// 1x1 convolution over `(n, C_in, H, W)` maps, applied as a per-pixel linear map.
#[derive(Debug, Clone)]
pub struct Conv1x1 {
    weight: Var,
    bias: Option<Var>,
}

impl Conv1x1 {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, init: Init, bias: bool) -> Result<Self> {
        Ok(Self {
            weight: store.param(&format!("{name}.weight"), (c_out, c_in, 1, 1), init)?,
            bias: if bias {
                Some(store.param(&format!("{name}.bias"), c_out, Init::Zeros)?)
            } else {
                None
            },
        })
    }

    fn add_bias(&self, y: Tensor) -> Result<Tensor> {
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b.as_tensor())?,
            None => y,
        })
    }

    fn matrix(&self) -> Result<Tensor> {
        let (c_out, c_in, _, _) = self.weight.dims4()?;
        Ok(self.weight.reshape((c_out, c_in))?)
    }

    /// `(n, C_in, H, W)` to `(n, C_out, H, W)`.
    pub fn forward_map(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let rows = x.permute((0, 2, 3, 1))?.reshape((n * h * w, c))?;
        let y = self.add_bias(rows.matmul(&self.matrix()?.t()?)?)?;
        let c_out = y.dim(1)?;
        Ok(y.reshape((n, h, w, c_out))?.permute((0, 3, 1, 2))?.contiguous()?)
    }

    /// Same map applied to token rows `(..., C_in)`; a token is a 1x1 spatial map.
    pub fn forward_tokens(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let c = *dims.last().expect("non-scalar");
        let rows = x.elem_count() / c;
        let y = self.add_bias(x.reshape((rows, c))?.matmul(&self.matrix()?.t()?)?)?;
        let mut out = dims;
        *out.last_mut().expect("non-scalar") = y.dim(1)?;
        Ok(y.reshape(out)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.param(
            &format!("{name}.weight"),
            (c_out, c_in, kernel, kernel),
            Init::Kaiming {
                fan: c_out * kernel * kernel,
            },
        )?;
        let bias = if bias {
            Some(store.param(&format!("{name}.bias"), c_out, Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = super::im2col::conv2d(x, self.weight.as_tensor(), self.stride, self.padding)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?,
            None => y,
        })
    }
}

/// Layer normalization over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Var,
    beta: Var,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Self::with_affine(store, name, dim, Init::Ones)
    }

    /// `gamma_init = Init::Zeros` gives a layer whose output is identically zero.
    pub fn with_affine(store: &mut ParamStore, name: &str, dim: usize, gamma_init: Init) -> Result<Self> {
        Ok(Self {
            gamma: store.param(&format!("{name}.gamma"), dim, gamma_init)?,
            beta: store.param(&format!("{name}.beta"), dim, Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(self.gamma.as_tensor())?
            .broadcast_add(self.beta.as_tensor())?)
    }
}

/// Batch normalization over the channel axis of `(n, C, H, W)` maps.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Self::with_affine(store, name, channels, Init::Ones)
    }

    pub fn with_affine(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        gamma_init: Init,
    ) -> Result<Self> {
        Ok(Self {
            gamma: store.param(&format!("{name}.gamma"), channels, gamma_init)?,
            beta: store.param(&format!("{name}.beta"), channels, Init::Zeros)?,
            running_mean: store.buffer(&format!("{name}.running_mean"), channels, Init::Zeros)?,
            running_var: store.buffer(&format!("{name}.running_var"), channels, Init::Ones)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let shape = (1, c, 1, 1);
        let (mean, var) = match mode {
            Mode::Train => {
                let mean = x.mean_keepdim(3)?.mean_keepdim(2)?.mean_keepdim(0)?;
                let var = x
                    .broadcast_sub(&mean)?
                    .sqr()?
                    .mean_keepdim(3)?
                    .mean_keepdim(2)?
                    .mean_keepdim(0)?;
                let count = (n * h * w) as f64;
                let unbiased = if count > 1.0 {
                    (var.detach() * (count / (count - 1.0)))?
                } else {
                    var.detach()
                };
                let m = self.momentum;
                let rm = ((self.running_mean.as_tensor() * (1.0 - m))?
                    + (mean.detach().flatten_all()? * m)?)?;
                let rv = ((self.running_var.as_tensor() * (1.0 - m))?
                    + (unbiased.flatten_all()? * m)?)?;
                self.running_mean.set(&rm)?;
                self.running_var.set(&rv)?;
                (mean, var)
            }
            Mode::Eval => (
                self.running_mean.reshape(shape)?,
                self.running_var.reshape(shape)?,
            ),
        };
        let normed = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.gamma.reshape(shape)?)?
            .broadcast_add(&self.beta.reshape(shape)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn store() -> ParamStore {
        ParamStore::new(1, DType::F64, Device::Cpu)
    }

    #[test]
    fn conv1x1_matches_per_pixel_linear() {
        let mut s = store();
        let conv = Conv1x1::new(&mut s, "a", 3, 2, Init::TruncNormal(0.5), true).unwrap();
        let x = Tensor::randn(0f64, 1.0, (2, 3, 4, 5), &Device::Cpu).unwrap();
        let via_map = conv.forward_map(&x).unwrap();
        let tokens = x.permute((0, 2, 3, 1)).unwrap();
        let via_tokens = conv.forward_tokens(&tokens).unwrap().permute((0, 3, 1, 2)).unwrap();
        let diff = (via_map - via_tokens).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f64>().unwrap() < 1e-12);
    }

    #[test]
    fn layer_norm_zero_affine_outputs_zero() {
        let mut s = store();
        let ln = LayerNorm::with_affine(&mut s, "ln", 4, Init::Zeros).unwrap();
        let x = Tensor::randn(0f64, 3.0, (5, 4), &Device::Cpu).unwrap();
        let y: Vec<Vec<f64>> = ln.forward(&x).unwrap().to_vec2().unwrap();
        assert!(y.iter().flatten().all(|&v| v == 0.0));
        let ln1 = LayerNorm::new(&mut s, "ln1", 4).unwrap();
        let y: Vec<Vec<f64>> = ln1.forward(&x).unwrap().to_vec2().unwrap();
        for row in y {
            assert!(row.iter().sum::<f64>().abs() < 1e-10);
        }
    }

    #[test]
    fn batch_norm_train_updates_running_stats_eval_uses_them() {
        let mut s = store();
        let bn = BatchNorm2d::new(&mut s, "bn", 2).unwrap();
        let x = Tensor::randn(0f64, 1.0, (4, 2, 3, 3), &Device::Cpu).unwrap().affine(2.0, 5.0).unwrap();
        let y = bn.forward(&x, Mode::Train).unwrap();
        let m: Vec<f64> = y.mean_keepdim(3).unwrap().mean_keepdim(2).unwrap().mean_keepdim(0).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(m.iter().all(|v| v.abs() < 1e-10));
        let rm: Vec<f64> = bn.running_mean.to_vec1().unwrap();
        assert!(rm.iter().all(|v| (v - 0.5).abs() < 0.2), "{rm:?}");
        let before: Vec<f64> = bn.running_var.to_vec1().unwrap();
        let _ = bn.forward(&x, Mode::Eval).unwrap();
        assert_eq!(before, bn.running_var.to_vec1::<f64>().unwrap());
    }

    #[test]
    fn linear_handles_token_batches() {
        let mut s = store();
        let lin = Linear::new(&mut s, "l", 6, 3).unwrap();
        let x = Tensor::ones((2, 5, 6), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(lin.forward(&x).unwrap().dims(), &[2, 5, 3]);
    }
}
