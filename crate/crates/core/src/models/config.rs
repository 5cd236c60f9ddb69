use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerStreamConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
}

impl Default for TransformerStreamConfig {
    fn default() -> Self {
        Self {
            patch_size: 4,
            embed_dim: 192,
            depth: 6,
            heads: 3,
            mlp_ratio: 4.0,
        }
    }
}

impl TransformerStreamConfig {
    /// Token grid `(h_T, w_T)` for an input of the given size.
    pub fn grid(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        if self.patch_size == 0 || height % self.patch_size != 0 || width % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image {height}x{width} is not divisible by patch size {}",
                self.patch_size
            )));
        }
        Ok((height / self.patch_size, width / self.patch_size))
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.embed_dim == 0 || self.heads == 0 {
            return Err(Error::Config("transformer depth, embed_dim and heads must be positive".into()));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.mlp_ratio <= 0.0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvStreamConfig {
    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
    pub stage_depths: Vec<usize>,
    pub downsample_factors: Vec<usize>,
}

impl Default for ConvStreamConfig {
    fn default() -> Self {
        Self {
            stem_channels: 32,
            stage_channels: vec![64, 128, 256],
            stage_depths: vec![2, 2, 2],
            downsample_factors: vec![1, 2, 2],
        }
    }
}

impl ConvStreamConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.stage_channels.len();
        if n == 0 || self.stage_depths.len() != n || self.downsample_factors.len() != n {
            return Err(Error::Config(
                "conv stream needs matching non-empty stage_channels, stage_depths and downsample_factors"
                    .into(),
            ));
        }
        if self.stem_channels == 0
            || self.stage_channels.contains(&0)
            || self.downsample_factors.contains(&0)
        {
            return Err(Error::Config("conv stream sizes must be positive".into()));
        }
        Ok(())
    }

    /// Spatial size after each stage for an input of the given size.
    pub fn stage_grids(&self, height: usize, width: usize) -> Result<Vec<(usize, usize)>> {
        let (mut h, mut w) = (height, width);
        let mut grids = Vec::with_capacity(self.downsample_factors.len());
        for (s, &f) in self.downsample_factors.iter().enumerate() {
            if h % f != 0 || w % f != 0 {
                return Err(Error::Config(format!(
                    "stage {s}: {h}x{w} map is not divisible by downsample factor {f}"
                )));
            }
            h /= f;
            w /= f;
            grids.push((h, w));
        }
        Ok(grids)
    }
}

/// A paired depth at which the two streams exchange features: after
/// transformer block `transformer_block_index` and conv stage `conv_stage_index`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionPoint {
    pub transformer_block_index: usize,
    pub conv_stage_index: usize,
}

/// How token vectors are spread over their CNN sub-region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Upsample {
    Nearest,
    Bilinear,
}

/// Whether the CNN update reads the pre-fusion tokens or the tokens already
/// updated by the CNN-to-transformer half.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionOrder {
    Symmetric,
    Sequential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// `None` places one point after each third of the transformer depth.
    pub points: Option<Vec<FusionPoint>>,
    pub upsample: Upsample,
    pub order: FusionOrder,
    /// Zero alignment weights and normalization affine parameters, making
    /// every fusion an exact no-op at initialization.
    pub zero_init: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            points: None,
            upsample: Upsample::Nearest,
            order: FusionOrder::Symmetric,
            zero_init: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Transformer,
    Conv,
    Dual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub transformer: TransformerStreamConfig,
    pub conv: ConvStreamConfig,
    pub fusion: FusionConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Dual,
            transformer: TransformerStreamConfig::default(),
            conv: ConvStreamConfig::default(),
            fusion: FusionConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Narrower streams (d_T 96, CNN widths 32/64/128, one block per stage)
    /// for machines where the default widths do not fit a full batch.
    pub fn small() -> Self {
        Self {
            transformer: TransformerStreamConfig {
                embed_dim: 96,
                ..Default::default()
            },
            conv: ConvStreamConfig {
                stem_channels: 16,
                stage_channels: vec![32, 64, 128],
                stage_depths: vec![1, 1, 1],
                downsample_factors: vec![1, 2, 2],
            },
            ..Default::default()
        }
    }
}

/// Default placement: after each third of the transformer depth, paired with
/// a conv stage (at or after the previous one) whose grid is an exact multiple
/// of the token grid.
pub fn default_fusion_points(
    transformer: &TransformerStreamConfig,
    conv: &ConvStreamConfig,
    token_grid: (usize, usize),
    stage_grids: &[(usize, usize)],
) -> Vec<FusionPoint> {
    let depth = transformer.depth;
    let stages = stage_grids.len();
    let divisible = |s: usize| {
        let (h, w) = stage_grids[s];
        h >= token_grid.0 && w >= token_grid.1 && h % token_grid.0 == 0 && w % token_grid.1 == 0
    };
    let _ = conv;
    let mut points: Vec<FusionPoint> = Vec::new();
    let mut min_stage = 0;
    for k in 1..=3usize {
        let block = (k * depth / 3).saturating_sub(1);
        if points.last().is_some_and(|p| p.transformer_block_index >= block) {
            continue;
        }
        let preferred = ((k * stages) / 3).saturating_sub(1).max(min_stage);
        let stage = (preferred..stages)
            .chain((min_stage..preferred).rev())
            .find(|&s| divisible(s));
        if let Some(stage) = stage {
            points.push(FusionPoint {
                transformer_block_index: block,
                conv_stage_index: stage,
            });
            min_stage = stage;
        }
    }
    points
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_defaults_place_three_points() {
        let t = TransformerStreamConfig::default();
        let c = ConvStreamConfig::default();
        let grids = c.stage_grids(32, 32).unwrap();
        assert_eq!(grids, vec![(32, 32), (16, 16), (8, 8)]);
        let pts = default_fusion_points(&t, &c, t.grid(32, 32).unwrap(), &grids);
        let pairs: Vec<_> = pts
            .iter()
            .map(|p| (p.transformer_block_index, p.conv_stage_index))
            .collect();
        assert_eq!(pairs, vec![(1, 0), (3, 1), (5, 2)]);
    }

    #[test]
    fn shallow_transformer_dedups_points() {
        let t = TransformerStreamConfig { depth: 2, ..Default::default() };
        let c = ConvStreamConfig::default();
        let grids = c.stage_grids(32, 32).unwrap();
        let pts = default_fusion_points(&t, &c, (8, 8), &grids);
        assert!(pts.windows(2).all(|w| w[0].transformer_block_index < w[1].transformer_block_index));
        assert!(!pts.is_empty());
    }

    #[test]
    fn validation_errors() {
        let t = TransformerStreamConfig { embed_dim: 10, heads: 3, ..Default::default() };
        assert!(t.validate().is_err());
        assert!(TransformerStreamConfig::default().grid(30, 32).is_err());
        let c = ConvStreamConfig { stage_depths: vec![1], ..Default::default() };
        assert!(c.validate().is_err());
        let c = ConvStreamConfig { downsample_factors: vec![3, 1, 1], ..Default::default() };
        assert!(c.stage_grids(32, 32).is_err());
    }
}
