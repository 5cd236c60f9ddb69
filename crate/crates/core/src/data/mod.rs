//! Datasets, labeled/unlabeled splits, augmentation and batch composition.

pub mod augment;
pub mod batch;
pub mod dataset;
pub mod split;

pub use augment::{AugmentationPolicy, PolicyKind, RandOp, StrongPolicy, WeakPolicy};
pub use batch::{compose_indices, eval_tensor, one_hot, BatchComposer, BatchIndices, MixedBatch, Normalization};
pub use dataset::{DatasetId, DatasetPair, ImageDataset, SyntheticSpec};
pub use split::{make_split, DatasetSplit, SplitFile, SplitSpec};
