//! Semi-supervised image classification with a dual-stream CNN/transformer
//! model, CNN-generated pseudo labels and cross-stream feature fusion.

pub mod data;
pub mod error;
pub mod models;
pub mod objective;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
