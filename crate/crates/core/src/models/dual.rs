//! Two-stream model running the transformer and CNN in lockstep, with
//! feature exchange at configured fusion points.

use candle_core::{DType, Device, Tensor};

use super::config::{default_fusion_points, Architecture, FusionPoint, ModelConfig};
use super::conv::ConvStream;
use super::fusion::FusionBlock;
use super::layers::Mode;
use super::ops::{ensure_finite, softmax_last};
use super::params::ParamStore;
use super::transformer::TransformerStream;
use crate::error::{Error, Result};

pub const TRANSFORMER_PREFIX: &str = "transformer";
pub const CONV_PREFIX: &str = "conv";

/// Per-stream logits `(n, K)`. A stream absent from the architecture is `None`.
#[derive(Debug, Clone)]
pub struct StreamLogits {
    pub transformer: Option<Tensor>,
    pub conv: Option<Tensor>,
}

impl StreamLogits {
    /// Logits of whichever streams exist, transformer first.
    pub fn present(&self) -> Vec<&Tensor> {
        self.transformer.iter().chain(self.conv.iter()).collect()
    }

    pub fn detach(&self) -> Self {
        Self {
            transformer: self.transformer.as_ref().map(Tensor::detach),
            conv: self.conv.as_ref().map(Tensor::detach),
        }
    }

    /// Averaged softmax of the available streams.
    pub fn combined_probs(&self) -> Result<Tensor> {
        match (&self.transformer, &self.conv) {
            (Some(t), Some(c)) => combined_predict(t, c),
            (Some(z), None) | (None, Some(z)) => softmax_last(z),
            (None, None) => Err(Error::Contract("no stream logits".into())),
        }
    }
}

/// `½ (softmax(z_T) + softmax(z_C))` row-wise.
pub fn combined_predict(z_t: &Tensor, z_c: &Tensor) -> Result<Tensor> {
    Ok(((softmax_last(z_t)? + softmax_last(z_c)?)? * 0.5)?)
}

/// Checks ordering and range of fusion points.
pub fn validate_fusion_points(points: &[FusionPoint], depth: usize, stages: usize) -> Result<()> {
    for (k, p) in points.iter().enumerate() {
        if p.transformer_block_index >= depth || p.conv_stage_index >= stages {
            return Err(Error::Config(format!(
                "fusion point {k} (block {}, stage {}) out of range for depth {depth}, {stages} stages",
                p.transformer_block_index, p.conv_stage_index
            )));
        }
        if k > 0 {
            let q = points[k - 1];
            if p.transformer_block_index <= q.transformer_block_index
                || p.conv_stage_index < q.conv_stage_index
            {
                return Err(Error::Config(format!(
                    "fusion points must have increasing block and non-decreasing stage indices (point {k})"
                )));
            }
        }
    }
    Ok(())
}

#[derive(Debug)]
pub struct HybridModel {
    config: ModelConfig,
    image_shape: (usize, usize, usize),
    num_classes: usize,
    store: ParamStore,
    transformer: Option<TransformerStream>,
    conv: Option<ConvStream>,
    fusions: Vec<FusionBlock>,
}

impl HybridModel {
    pub fn new(
        config: &ModelConfig,
        image_shape: (usize, usize, usize),
        num_classes: usize,
        seed: u64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")));
        }
        let mut store = ParamStore::new(seed, dtype, device.clone());
        let arch = config.architecture;
        let transformer = match arch {
            Architecture::Conv => None,
            _ => Some(TransformerStream::new(
                &mut store,
                TRANSFORMER_PREFIX,
                &config.transformer,
                image_shape,
                num_classes,
            )?),
        };
        let conv = match arch {
            Architecture::Transformer => None,
            _ => Some(ConvStream::new(&mut store, CONV_PREFIX, &config.conv, image_shape, num_classes)?),
        };
        let mut fusions = Vec::new();
        if let (Some(t), Some(c)) = (&transformer, &conv) {
            let points = match &config.fusion.points {
                Some(p) => p.clone(),
                None => default_fusion_points(&config.transformer, &config.conv, t.grid(), c.stage_grids()),
            };
            validate_fusion_points(&points, t.depth(), c.num_stages())?;
            for (k, &p) in points.iter().enumerate() {
                fusions.push(FusionBlock::new(
                    &mut store,
                    &format!("fusion.{k}"),
                    p,
                    t.grid(),
                    t.embed_dim(),
                    c.stage_grids()[p.conv_stage_index],
                    c.stage_channels(p.conv_stage_index),
                    config.fusion.upsample,
                    config.fusion.order,
                    config.fusion.zero_init,
                )?);
            }
        } else if config.fusion.points.as_ref().is_some_and(|p| !p.is_empty()) {
            return Err(Error::Config(format!(
                "fusion points need the dual architecture, got {arch:?}"
            )));
        }
        Ok(Self {
            config: config.clone(),
            image_shape,
            num_classes,
            store,
            transformer,
            conv,
            fusions,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn architecture(&self) -> Architecture {
        self.config.architecture
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        self.image_shape
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn transformer(&self) -> Option<&TransformerStream> {
        self.transformer.as_ref()
    }

    pub fn conv(&self) -> Option<&ConvStream> {
        self.conv.as_ref()
    }

    pub fn fusion_points(&self) -> Vec<FusionPoint> {
        self.fusions.iter().map(FusionBlock::point).collect()
    }

    pub fn fusions(&self) -> &[FusionBlock] {
        &self.fusions
    }

    /// Forward pass on `(n, C, H, W)` images.
    pub fn forward(&self, images: &Tensor, mode: Mode) -> Result<StreamLogits> {
        match (&self.transformer, &self.conv) {
            (Some(t), Some(c)) => self.forward_dual(t, c, images, mode),
            (Some(t), None) => {
                let z = t.forward(images)?;
                ensure_finite(&z, "transformer.head")?;
                Ok(StreamLogits { transformer: Some(z), conv: None })
            }
            (None, Some(c)) => {
                let z = c.forward(images, mode)?;
                ensure_finite(&z, "conv.head")?;
                Ok(StreamLogits { transformer: None, conv: Some(z) })
            }
            (None, None) => unreachable!("architecture always builds a stream"),
        }
    }

    fn forward_dual(
        &self,
        t: &TransformerStream,
        c: &ConvStream,
        images: &Tensor,
        mode: Mode,
    ) -> Result<StreamLogits> {
        let mut tokens = t.embed(images)?;
        let mut map = c.stem(images, mode)?;
        ensure_finite(&tokens, "transformer.embed")?;
        ensure_finite(&map, "conv.stem")?;
        let mut next_stage = 0;
        let mut fusions = self.fusions.iter().peekable();
        for i in 0..t.depth() {
            tokens = t.block(i, &tokens)?;
            ensure_finite(&tokens, &format!("transformer.blocks.{i}"))?;
            while let Some(f) = fusions.next_if(|f| f.point().transformer_block_index == i) {
                let stage = f.point().conv_stage_index;
                while next_stage <= stage {
                    map = c.stage(next_stage, &map, mode)?;
                    ensure_finite(&map, &format!("conv.stages.{next_stage}"))?;
                    next_stage += 1;
                }
                (tokens, map) = f.exchange(&tokens, &map, mode)?;
                ensure_finite(&tokens, &format!("fusion.block{i}.c2t"))?;
                ensure_finite(&map, &format!("fusion.stage{stage}.t2c"))?;
            }
        }
        while next_stage < c.num_stages() {
            map = c.stage(next_stage, &map, mode)?;
            ensure_finite(&map, &format!("conv.stages.{next_stage}"))?;
            next_stage += 1;
        }
        let z_t = t.head(&tokens)?;
        let z_c = c.head(&map)?;
        ensure_finite(&z_t, "transformer.head")?;
        ensure_finite(&z_c, "conv.head")?;
        Ok(StreamLogits {
            transformer: Some(z_t),
            conv: Some(z_c),
        })
    }
}
