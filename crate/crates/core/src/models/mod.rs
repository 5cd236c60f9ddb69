//! Transformer and CNN streams, cross-stream fusion and the combined model.

pub mod config;
pub mod conv;
pub mod dual;
pub mod fusion;
pub mod im2col;
pub mod layers;
pub mod ops;
pub mod params;
pub mod transformer;

pub use config::{
    Architecture, ConvStreamConfig, FusionConfig, FusionOrder, FusionPoint, ModelConfig,
    TransformerStreamConfig, Upsample,
};
pub use dual::{combined_predict, HybridModel, StreamLogits};
pub use fusion::{ConvToTokens, FusionBlock, TokensToConv};
pub use layers::Mode;
pub use params::{Init, ParamStore};
