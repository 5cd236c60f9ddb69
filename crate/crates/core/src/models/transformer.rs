//! Toy vision transformer stream: patch embedding, class token, pre-norm
//! blocks, linear head on the class token.

use candle_core::{Tensor, Var};

use super::config::TransformerStreamConfig;
use super::layers::{Conv2d, LayerNorm, Linear};
use super::ops::softmax_last;
use super::params::{Init, ParamStore};
use crate::error::Result;

#[derive(Debug, Clone)]
struct Attention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
}

impl Attention {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, l, d) = x.dims3()?;
        let hd = d / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((n, l, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (hd as f64).sqrt())?;
        let attn = softmax_last(&scores)?;
        let out = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .reshape((n, l, d))?;
        self.proj.forward(&out)
    }
}

#[derive(Debug, Clone)]
struct Block {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?)?)?;
        let h = self.fc1.forward(&self.norm2.forward(&x)?)?.gelu()?;
        Ok((&x + self.fc2.forward(&h)?)?)
    }
}

/// Token sequences are `(n, 1 + h_T * w_T, d_T)`, class token first, patch
/// tokens in row-major grid order.
#[derive(Debug, Clone)]
pub struct TransformerStream {
    config: TransformerStreamConfig,
    grid: (usize, usize),
    patch_embed: Conv2d,
    cls_token: Var,
    pos_embed: Var,
    blocks: Vec<Block>,
    norm: LayerNorm,
    head: Linear,
}

impl TransformerStream {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        config: &TransformerStreamConfig,
        (channels, height, width): (usize, usize, usize),
        num_classes: usize,
    ) -> Result<Self> {
        config.validate()?;
        let grid = config.grid(height, width)?;
        let d = config.embed_dim;
        let p = config.patch_size;
        let hidden = ((d as f64) * config.mlp_ratio).round().max(1.0) as usize;
        let patch_embed = Conv2d::new(store, &format!("{prefix}.patch_embed"), channels, d, p, p, 0, true)?;
        let cls_token = store.param(&format!("{prefix}.cls_token"), (1, 1, d), Init::TruncNormal(0.02))?;
        let pos_embed = store.param(
            &format!("{prefix}.pos_embed"),
            (1, 1 + grid.0 * grid.1, d),
            Init::TruncNormal(0.02),
        )?;
        let blocks = (0..config.depth)
            .map(|i| {
                let b = format!("{prefix}.blocks.{i}");
                Ok(Block {
                    norm1: LayerNorm::new(store, &format!("{b}.norm1"), d)?,
                    attn: Attention {
                        qkv: Linear::new(store, &format!("{b}.attn.qkv"), d, 3 * d)?,
                        proj: Linear::new(store, &format!("{b}.attn.proj"), d, d)?,
                        heads: config.heads,
                    },
                    norm2: LayerNorm::new(store, &format!("{b}.norm2"), d)?,
                    fc1: Linear::new(store, &format!("{b}.mlp.fc1"), d, hidden)?,
                    fc2: Linear::new(store, &format!("{b}.mlp.fc2"), hidden, d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            grid,
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            norm: LayerNorm::new(store, &format!("{prefix}.norm"), d)?,
            head: Linear::new(store, &format!("{prefix}.head"), d, num_classes)?,
        })
    }

    pub fn config(&self) -> &TransformerStreamConfig {
        &self.config
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        let n = images.dim(0)?;
        let d = self.config.embed_dim;
        let patches = self
            .patch_embed
            .forward(images)?
            .flatten_from(2)?
            .transpose(1, 2)?;
        let cls = self.cls_token.broadcast_as((n, 1, d))?;
        let tokens = Tensor::cat(&[&cls, &patches], 1)?;
        Ok(tokens.broadcast_add(self.pos_embed.as_tensor())?)
    }

    pub fn block(&self, index: usize, tokens: &Tensor) -> Result<Tensor> {
        self.blocks[index].forward(tokens)
    }

    pub fn head(&self, tokens: &Tensor) -> Result<Tensor> {
        let cls = self.norm.forward(tokens)?.narrow(1, 0, 1)?.squeeze(1)?;
        self.head.forward(&cls)
    }

    /// Runs the whole stream on its own.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let mut x = self.embed(images)?;
        for i in 0..self.blocks.len() {
            x = self.block(i, &x)?;
        }
        self.head(&x)
    }
}

/// Splits `(n, 1 + L, d)` into the class token `(n, 1, d)` and patches `(n, L, d)`.
pub fn split_class_token(tokens: &Tensor) -> Result<(Tensor, Tensor)> {
    let l = tokens.dim(1)?;
    Ok((tokens.narrow(1, 0, 1)?, tokens.narrow(1, 1, l - 1)?))
}


#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn shapes() {
        let mut s = ParamStore::new(0, DType::F32, Device::Cpu);
        let cfg = TransformerStreamConfig {
            embed_dim: 16,
            depth: 2,
            heads: 2,
            ..Default::default()
        };
        let t = TransformerStream::new(&mut s, "t", &cfg, (3, 16, 16), 5).unwrap();
        let x = Tensor::randn(0f32, 1.0, (3, 3, 16, 16), &Device::Cpu).unwrap();
        let tokens = t.embed(&x).unwrap();
        assert_eq!(tokens.dims(), &[3, 17, 16]);
        assert_eq!(t.block(0, &tokens).unwrap().dims(), &[3, 17, 16]);
        assert_eq!(t.forward(&x).unwrap().dims(), &[3, 5]);
    }
}
