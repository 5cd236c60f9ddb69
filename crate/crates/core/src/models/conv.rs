//! Toy residual CNN stream.

use candle_core::Tensor;

use super::config::ConvStreamConfig;
use super::layers::{BatchNorm2d, Conv2d, Linear, Mode};
use super::params::ParamStore;
use crate::error::Result;

#[derive(Debug, Clone)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), c_in, c_out, 3, stride, 1, false)?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), c_out)?,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.bn.forward(&self.conv.forward(x)?, mode)
    }
}

#[derive(Debug, Clone)]
struct Residual {
    a: ConvBn,
    b: ConvBn,
}

impl Residual {
    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = self.a.forward(x, mode)?.relu()?;
        let h = self.b.forward(&h, mode)?;
        Ok((h + x)?.relu()?)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    transition: Option<ConvBn>,
    blocks: Vec<Residual>,
}

/// Stem, then stages of `[transition conv] + residual blocks`, then global
/// average pooling and a linear head.
#[derive(Debug, Clone)]
pub struct ConvStream {
    config: ConvStreamConfig,
    grids: Vec<(usize, usize)>,
    stem: ConvBn,
    stages: Vec<Stage>,
    head: Linear,
}

impl ConvStream {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        config: &ConvStreamConfig,
        (channels, height, width): (usize, usize, usize),
        num_classes: usize,
    ) -> Result<Self> {
        config.validate()?;
        let grids = config.stage_grids(height, width)?;
        let stem = ConvBn::new(store, &format!("{prefix}.stem"), channels, config.stem_channels, 1)?;
        let mut c_in = config.stem_channels;
        let mut stages = Vec::new();
        for (s, ((&c, &depth), &factor)) in config
            .stage_channels
            .iter()
            .zip(&config.stage_depths)
            .zip(&config.downsample_factors)
            .enumerate()
        {
            let name = format!("{prefix}.stages.{s}");
            let transition = if factor > 1 || c != c_in {
                Some(ConvBn::new(store, &format!("{name}.transition"), c_in, c, factor)?)
            } else {
                None
            };
            let blocks = (0..depth)
                .map(|b| {
                    Ok(Residual {
                        a: ConvBn::new(store, &format!("{name}.blocks.{b}.a"), c, c, 1)?,
                        b: ConvBn::new(store, &format!("{name}.blocks.{b}.b"), c, c, 1)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage { transition, blocks });
            c_in = c;
        }
        Ok(Self {
            config: config.clone(),
            grids,
            stem,
            stages,
            head: Linear::new(store, &format!("{prefix}.head"), c_in, num_classes)?,
        })
    }

    pub fn config(&self) -> &ConvStreamConfig {
        &self.config
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Output grid of each stage.
    pub fn stage_grids(&self) -> &[(usize, usize)] {
        &self.grids
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.config.stage_channels[stage]
    }

    pub fn stem(&self, images: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self.stem.forward(images, mode)?.relu()?)
    }

    pub fn stage(&self, index: usize, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let stage = &self.stages[index];
        let mut x = match &stage.transition {
            Some(t) => t.forward(x, mode)?.relu()?,
            None => x.clone(),
        };
        for block in &stage.blocks {
            x = block.forward(&x, mode)?;
        }
        Ok(x)
    }

    pub fn head(&self, map: &Tensor) -> Result<Tensor> {
        let pooled = map.mean(3)?.mean(2)?;
        self.head.forward(&pooled)
    }

    pub fn forward(&self, images: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut x = self.stem(images, mode)?;
        for i in 0..self.stages.len() {
            x = self.stage(i, &x, mode)?;
        }
        self.head(&x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn stage_shapes_follow_downsampling() {
        let mut s = ParamStore::new(0, DType::F32, Device::Cpu);
        let cfg = ConvStreamConfig {
            stem_channels: 4,
            stage_channels: vec![4, 8],
            stage_depths: vec![1, 1],
            downsample_factors: vec![1, 2],
        };
        let c = ConvStream::new(&mut s, "c", &cfg, (3, 8, 8), 3).unwrap();
        let x = Tensor::randn(0f32, 1.0, (2, 3, 8, 8), &Device::Cpu).unwrap();
        let m = c.stem(&x, Mode::Train).unwrap();
        let m0 = c.stage(0, &m, Mode::Train).unwrap();
        assert_eq!(m0.dims(), &[2, 4, 8, 8]);
        let m1 = c.stage(1, &m0, Mode::Train).unwrap();
        assert_eq!(m1.dims(), &[2, 8, 4, 4]);
        assert_eq!(c.forward(&x, Mode::Eval).unwrap().dims(), &[2, 3]);
    }
}
