//! Cross-stream feature exchange between patch tokens and CNN feature maps.
//!
//! Patch token `i` of an `h_T x w_T` grid covers the same image area as an
//! `(H_C / h_T) x (W_C / w_T)` block of the CNN map. At each fusion point:
//!
//! * CNN to transformer: `token_i += LayerNorm(AvgPool(Align(M_C,i)))`
//! * transformer to CNN: `M_C,i += BatchNorm(Upsample(Align(token_i)))`
//!
//! where `Align` is a 1x1 convolution between channel widths. The class token
//! neither sends nor receives.

use candle_core::{DType, Device, Tensor};

use super::config::{FusionOrder, FusionPoint, Upsample};
use super::layers::{BatchNorm2d, Conv1x1, LayerNorm, Mode};
use super::params::{Init, ParamStore};
use super::transformer::split_class_token;
use crate::error::{Error, Result};

/// Checks that a CNN grid splits into whole per-token regions and returns the
/// region size `(H_C / h_T, W_C / w_T)`.
pub fn region_size(token_grid: (usize, usize), conv_grid: (usize, usize)) -> Result<(usize, usize)> {
    let ((ht, wt), (hc, wc)) = (token_grid, conv_grid);
    if ht == 0 || wt == 0 || hc < ht || wc < wt || hc % ht != 0 || wc % wt != 0 {
        return Err(Error::Config(format!(
            "CNN grid {hc}x{wc} does not split into whole regions for token grid {ht}x{wt}"
        )));
    }
    Ok((hc / ht, wc / wt))
}

/// Mean over each `rh x rw` block: `(n, d, h*rh, w*rw)` to `(n, d, h, w)`.
pub fn region_mean(map: &Tensor, grid: (usize, usize), region: (usize, usize)) -> Result<Tensor> {
    let (n, d, _, _) = map.dims4()?;
    Ok(map
        .reshape((n, d, grid.0, region.0, grid.1, region.1))?
        .mean(5)?
        .mean(3)?)
}

/// Copies each grid cell over its `rh x rw` block: `(n, d, h, w)` to `(n, d, h*rh, w*rw)`.
pub fn broadcast_regions(map: &Tensor, region: (usize, usize)) -> Result<Tensor> {
    let (n, d, h, w) = map.dims4()?;
    Ok(map
        .reshape((n, d, h, 1, w, 1))?
        .broadcast_as((n, d, h, region.0, w, region.1))?
        .reshape((n, d, h * region.0, w * region.1))?)
}

/// Linear interpolation weights `(out, in)` with half-pixel centers and edge clamping.
fn interpolation_matrix(size_in: usize, size_out: usize) -> Vec<f64> {
    let mut m = vec![0.0; size_out * size_in];
    let scale = size_in as f64 / size_out as f64;
    for o in 0..size_out {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (size_in - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(size_in - 1);
        let frac = src - i0 as f64;
        m[o * size_in + i0] += 1.0 - frac;
        m[o * size_in + i1] += frac;
    }
    m
}

#[derive(Debug, Clone)]
enum Upsampler {
    Nearest,
    /// `A_h (H x h)` and `A_w^T (w x W)`.
    Bilinear { rows: Tensor, cols_t: Tensor },
}

impl Upsampler {
    fn new(
        method: Upsample,
        grid: (usize, usize),
        region: (usize, usize),
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        Ok(match method {
            Upsample::Nearest => Upsampler::Nearest,
            Upsample::Bilinear => {
                let (h, w) = grid;
                let (hh, ww) = (h * region.0, w * region.1);
                let rows = Tensor::from_vec(interpolation_matrix(h, hh), (hh, h), device)?.to_dtype(dtype)?;
                let cols = Tensor::from_vec(interpolation_matrix(w, ww), (ww, w), device)?.to_dtype(dtype)?;
                Upsampler::Bilinear {
                    rows,
                    cols_t: cols.t()?.contiguous()?,
                }
            }
        })
    }

    fn forward(&self, map: &Tensor, region: (usize, usize)) -> Result<Tensor> {
        match self {
            Upsampler::Nearest => broadcast_regions(map, region),
            Upsampler::Bilinear { rows, cols_t } => {
                // (n,d,h,w) x (w,W) -> (n,d,h,W); then rows: (H,h) x (h,W)
                let wide = map.broadcast_matmul(cols_t)?;
                Ok(rows.broadcast_matmul(&wide)?)
            }
        }
    }
}

/// CNN-to-transformer half of a fusion point.
#[derive(Debug, Clone)]
pub struct ConvToTokens {
    align: Conv1x1,
    norm: LayerNorm,
    grid: (usize, usize),
    region: (usize, usize),
}

impl ConvToTokens {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        conv_channels: usize,
        token_dim: usize,
        grid: (usize, usize),
        region: (usize, usize),
        zero_init: bool,
    ) -> Result<Self> {
        let (w_init, g_init) = if zero_init {
            (Init::Zeros, Init::Zeros)
        } else {
            (Init::TruncNormal(0.02), Init::Ones)
        };
        Ok(Self {
            align: Conv1x1::new(store, &format!("{name}.align"), conv_channels, token_dim, w_init, true)?,
            norm: LayerNorm::with_affine(store, &format!("{name}.norm"), token_dim, g_init)?,
            grid,
            region,
        })
    }

    /// Per-token additive update `(n, h_T * w_T, d_T)` computed from the CNN map.
    pub fn delta(&self, conv_map: &Tensor) -> Result<Tensor> {
        let aligned = self.align.forward_map(conv_map)?;
        let pooled = region_mean(&aligned, self.grid, self.region)?;
        let per_token = pooled.flatten_from(2)?.transpose(1, 2)?.contiguous()?;
        self.norm.forward(&per_token)
    }

    /// `tokens: (n, 1 + L, d_T)`, `conv_map: (n, d_C, H_C, W_C)`.
    pub fn forward(&self, tokens: &Tensor, conv_map: &Tensor) -> Result<Tensor> {
        let (cls, patches) = split_class_token(tokens)?;
        let patches = (patches + self.delta(conv_map)?)?;
        Ok(Tensor::cat(&[&cls, &patches], 1)?)
    }
}

/// Transformer-to-CNN half of a fusion point.
#[derive(Debug, Clone)]
pub struct TokensToConv {
    align: Conv1x1,
    norm: BatchNorm2d,
    upsampler: Upsampler,
    grid: (usize, usize),
    region: (usize, usize),
}

impl TokensToConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        token_dim: usize,
        conv_channels: usize,
        grid: (usize, usize),
        region: (usize, usize),
        upsample: Upsample,
        zero_init: bool,
    ) -> Result<Self> {
        let (w_init, g_init) = if zero_init {
            (Init::Zeros, Init::Zeros)
        } else {
            (Init::TruncNormal(0.02), Init::Ones)
        };
        let upsampler = Upsampler::new(upsample, grid, region, store.dtype(), &store.device().clone())?;
        Ok(Self {
            // No bias: the BatchNorm that follows would cancel it.
            align: Conv1x1::new(store, &format!("{name}.align"), token_dim, conv_channels, w_init, false)?,
            norm: BatchNorm2d::with_affine(store, &format!("{name}.norm"), conv_channels, g_init)?,
            upsampler,
            grid,
            region,
        })
    }

    /// Additive update `(n, d_C, H_C, W_C)` computed from the patch tokens.
    pub fn delta(&self, tokens: &Tensor, mode: Mode) -> Result<Tensor> {
        let (_, patches) = split_class_token(tokens)?;
        let aligned = self.align.forward_tokens(&patches)?;
        let (n, _, d_c) = aligned.dims3()?;
        let grid_map = aligned
            .transpose(1, 2)?
            .reshape((n, d_c, self.grid.0, self.grid.1))?;
        let up = self.upsampler.forward(&grid_map, self.region)?;
        self.norm.forward(&up, mode)
    }

    pub fn forward(&self, conv_map: &Tensor, tokens: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok((conv_map + self.delta(tokens, mode)?)?)
    }
}

/// Both halves of one fusion point.
#[derive(Debug, Clone)]
pub struct FusionBlock {
    point: FusionPoint,
    order: FusionOrder,
    pub c2t: ConvToTokens,
    pub t2c: TokensToConv,
}

impl FusionBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        point: FusionPoint,
        token_grid: (usize, usize),
        token_dim: usize,
        conv_grid: (usize, usize),
        conv_channels: usize,
        upsample: Upsample,
        order: FusionOrder,
        zero_init: bool,
    ) -> Result<Self> {
        let region = region_size(token_grid, conv_grid).map_err(|e| {
            Error::Config(format!(
                "fusion point (block {}, stage {}): {e}",
                point.transformer_block_index, point.conv_stage_index
            ))
        })?;
        Ok(Self {
            point,
            order,
            c2t: ConvToTokens::new(
                store,
                &format!("{name}.c2t"),
                conv_channels,
                token_dim,
                token_grid,
                region,
                zero_init,
            )?,
            t2c: TokensToConv::new(
                store,
                &format!("{name}.t2c"),
                token_dim,
                conv_channels,
                token_grid,
                region,
                upsample,
                zero_init,
            )?,
        })
    }

    pub fn point(&self) -> FusionPoint {
        self.point
    }

    /// Exchanges features. In symmetric order both halves read the
    /// pre-fusion features; in sequential order the CNN update reads the
    /// already-updated tokens.
    pub fn exchange(&self, tokens: &Tensor, conv_map: &Tensor, mode: Mode) -> Result<(Tensor, Tensor)> {
        let new_tokens = self.c2t.forward(tokens, conv_map)?;
        let source = match self.order {
            FusionOrder::Symmetric => tokens,
            FusionOrder::Sequential => &new_tokens,
        };
        let new_map = self.t2c.forward(conv_map, source, mode)?;
        Ok((new_tokens, new_map))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        ParamStore::new(5, DType::F64, Device::Cpu)
    }

    fn max_abs(t: &Tensor) -> f64 {
        t.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn shapes_are_preserved() {
        let mut s = store();
        let fb = FusionBlock::new(
            &mut s, "f", FusionPoint { transformer_block_index: 0, conv_stage_index: 0 },
            (4, 4), 64, (8, 8), 32, Upsample::Nearest, FusionOrder::Symmetric, false,
        )
        .unwrap();
        let tokens = Tensor::randn(0f64, 1.0, (2, 17, 64), &Device::Cpu).unwrap();
        let map = Tensor::randn(0f64, 1.0, (2, 32, 8, 8), &Device::Cpu).unwrap();
        let (t2, m2) = fb.exchange(&tokens, &map, Mode::Train).unwrap();
        assert_eq!(t2.dims(), &[2, 17, 64]);
        assert_eq!(m2.dims(), &[2, 32, 8, 8]);
        // class token untouched
        let d = (t2.narrow(1, 0, 1).unwrap() - tokens.narrow(1, 0, 1).unwrap()).unwrap();
        assert_eq!(max_abs(&d), 0.0);
    }

    #[test]
    fn zero_init_is_identity() {
        let mut s = store();
        let fb = FusionBlock::new(
            &mut s, "f", FusionPoint { transformer_block_index: 0, conv_stage_index: 0 },
            (2, 2), 8, (4, 4), 6, Upsample::Bilinear, FusionOrder::Symmetric, true,
        )
        .unwrap();
        let tokens = Tensor::randn(0f64, 1.0, (3, 5, 8), &Device::Cpu).unwrap();
        let map = Tensor::randn(0f64, 1.0, (3, 6, 4, 4), &Device::Cpu).unwrap();
        for mode in [Mode::Train, Mode::Eval] {
            let (t2, m2) = fb.exchange(&tokens, &map, mode).unwrap();
            assert_eq!(max_abs(&(t2 - &tokens).unwrap()), 0.0);
            assert_eq!(max_abs(&(m2 - &map).unwrap()), 0.0);
        }
    }

    #[test]
    fn indivisible_grid_is_rejected_at_build() {
        let mut s = store();
        let err = FusionBlock::new(
            &mut s, "f", FusionPoint { transformer_block_index: 0, conv_stage_index: 1 },
            (3, 3), 8, (8, 8), 6, Upsample::Nearest, FusionOrder::Symmetric, false,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(region_size((4, 4), (2, 2)).is_err());
    }

    #[test]
    fn constant_map_gives_identical_token_updates() {
        let mut s = store();
        let c2t = ConvToTokens::new(&mut s, "c", 6, 8, (2, 2), (2, 2), false).unwrap();
        let map = Tensor::ones((1, 6, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let delta: Vec<Vec<f64>> = c2t.delta(&map).unwrap().squeeze(0).unwrap().to_vec2().unwrap();
        // Closed form: aligned vector a = W 1 + b, LayerNorm(a) with unit gamma, zero beta.
        let w: Vec<Vec<f64>> = s.params()["c.align.weight"].reshape((8, 6)).unwrap().to_vec2().unwrap();
        let a: Vec<f64> = w.iter().map(|row| row.iter().sum::<f64>()).collect();
        let mean = a.iter().sum::<f64>() / 8.0;
        let var = a.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        let expect: Vec<f64> = a.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect();
        for row in &delta {
            for (x, e) in row.iter().zip(&expect) {
                assert!((x - e).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn single_token_broadcasts_over_whole_map() {
        let v = Tensor::new(&[1.5f64, -2.0], &Device::Cpu).unwrap().reshape((1, 2, 1, 1)).unwrap();
        let up = broadcast_regions(&v, (4, 4)).unwrap();
        let vals: Vec<Vec<Vec<f64>>> = up.squeeze(0).unwrap().to_vec3().unwrap();
        assert!(vals[0].iter().flatten().all(|&x| x == 1.5));
        assert!(vals[1].iter().flatten().all(|&x| x == -2.0));
    }

    #[test]
    fn nearest_upsample_copies_value_to_region() {
        let v = Tensor::new(&[[1f64, 2.], [3., 4.]], &Device::Cpu).unwrap().reshape((1, 1, 2, 2)).unwrap();
        let up: Vec<Vec<f64>> = broadcast_regions(&v, (2, 2)).unwrap().reshape((4, 4)).unwrap().to_vec2().unwrap();
        assert_eq!(up[0], vec![1., 1., 2., 2.]);
        assert_eq!(up[1], vec![1., 1., 2., 2.]);
        assert_eq!(up[3], vec![3., 3., 4., 4.]);
    }

    #[test]
    fn bilinear_preserves_constants_and_rows_sum_to_one() {
        for (i, o) in [(1, 4), (2, 4), (4, 8), (3, 9)] {
            let m = interpolation_matrix(i, o);
            for row in m.chunks(i) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        let up = Upsampler::new(Upsample::Bilinear, (2, 2), (2, 2), DType::F64, &Device::Cpu).unwrap();
        let c = Tensor::full(0.7f64, (1, 3, 2, 2), &Device::Cpu).unwrap();
        let out = up.forward(&c, (2, 2)).unwrap();
        assert_eq!(out.dims(), &[1, 3, 4, 4]);
        assert!(max_abs(&(out - 0.7).unwrap()) < 1e-12);
    }

    #[test]
    fn region_mean_averages_blocks() {
        let x = Tensor::arange(0f64, 16.0, &Device::Cpu).unwrap().reshape((1, 1, 4, 4)).unwrap();
        let m: Vec<Vec<f64>> = region_mean(&x, (2, 2), (2, 2)).unwrap().reshape((2, 2)).unwrap().to_vec2().unwrap();
        assert_eq!(m, vec![vec![2.5, 4.5], vec![10.5, 12.5]]);
    }
}
