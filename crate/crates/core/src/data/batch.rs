//! Mixed labeled/unlabeled batch composition.

use candle_core::{DType, Device, Tensor};
use ndarray::{Array3, ArrayView3};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::augment::{strong_augment, weak_augment, StrongPolicy, WeakPolicy};
use super::dataset::ImageDataset;
use super::split::DatasetSplit;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from, Stream};

/// Per-channel standardization applied after augmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn cifar10() -> Self {
        Self {
            mean: vec![0.4914, 0.4822, 0.4465],
            std: vec![0.2470, 0.2435, 0.2616],
        }
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn from_dataset(ds: &ImageDataset) -> Self {
        let (mean, std) = ds.channel_stats();
        Self { mean, std }
    }

    fn apply_into(&self, img: ArrayView3<'_, f32>, out: &mut Vec<f32>) {
        for (c, plane) in img.outer_iter().enumerate() {
            let (m, s) = (self.mean[c], self.std[c]);
            out.extend(plane.iter().map(|&v| (v - m) / s));
        }
    }
}

/// One optimization step's inputs.
///
/// Unlabeled examples carry images only; their indices are kept so the
/// trainer can compute diagnostics against the split's hidden labels.
#[derive(Debug, Clone)]
pub struct MixedBatch {
    pub labeled_images_strong: Tensor,
    /// One-hot `(n_l, K)`.
    pub labels: Tensor,
    pub unlabeled_images_weak: Option<Tensor>,
    pub unlabeled_images_strong: Option<Tensor>,
    pub labeled_indices: Vec<usize>,
    pub unlabeled_indices: Vec<usize>,
}

impl MixedBatch {
    pub fn n_l(&self) -> usize {
        self.labeled_indices.len()
    }

    pub fn n_u(&self) -> usize {
        self.unlabeled_indices.len()
    }
}

/// Dataset indices drawn for one step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchIndices {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

/// Draws `count` items starting at absolute position `start` of an endless
/// sequence of independently shuffled passes over `pool`.
fn cyclic_draw(pool: &[usize], start: u64, count: usize, seed: u64, stream: Stream) -> Vec<usize> {
    let len = pool.len() as u64;
    let mut out = Vec::with_capacity(count);
    let mut cycle = u64::MAX;
    let mut order: Vec<usize> = Vec::new();
    for pos in start..start + count as u64 {
        let c = pos / len;
        if c != cycle {
            if cycle != u64::MAX {
                log::debug!("{stream:?} sampler wrapped into cycle {c}");
            }
            cycle = c;
            order = pool.to_vec();
            order.shuffle(&mut rng_from(&[stream as u64, seed, c]));
        }
        out.push(order[(pos % len) as usize]);
    }
    out
}

/// Indices for step `step`: labeled examples are drawn without replacement
/// within each pass over the labeled pool, unlabeled examples cycle through
/// their own pool independently. Pure in `(split, n_l, mu, seed, step)`.
pub fn compose_indices(
    split: &DatasetSplit,
    n_l: usize,
    mu: usize,
    seed: u64,
    step: u64,
) -> Result<BatchIndices> {
    if n_l == 0 || mu == 0 {
        return Err(Error::Contract(format!(
            "batch needs n_l >= 1 and mu >= 1 (got n_l={n_l}, mu={mu})"
        )));
    }
    if split.labeled_indices().is_empty() {
        return Err(Error::Contract("split has no labeled examples".into()));
    }
    let labeled = cyclic_draw(
        split.labeled_indices(),
        step * n_l as u64,
        n_l,
        seed,
        Stream::LabeledOrder,
    );
    let n_u = mu * n_l;
    let unlabeled = if split.unlabeled_indices().is_empty() {
        Vec::new()
    } else {
        cyclic_draw(
            split.unlabeled_indices(),
            step * n_u as u64,
            n_u,
            seed,
            Stream::UnlabeledOrder,
        )
    };
    Ok(BatchIndices { labeled, unlabeled })
}

/// Builds augmented, normalized tensors for each step.
#[derive(Debug, Clone)]
pub struct BatchComposer {
    pub n_l: usize,
    pub mu: usize,
    pub seed: u64,
    pub weak: WeakPolicy,
    pub strong: StrongPolicy,
    pub normalization: Normalization,
    pub dtype: DType,
    pub device: Device,
}

impl BatchComposer {
    pub fn indices(&self, split: &DatasetSplit, step: u64) -> Result<BatchIndices> {
        compose_indices(split, self.n_l, self.mu, self.seed, step)
    }

    fn view_tensor<F>(
        &self,
        dataset: &ImageDataset,
        indices: &[usize],
        step: u64,
        stream: Stream,
        augment: F,
    ) -> Result<Tensor>
    where
        F: Fn(ArrayView3<'_, f32>, u64) -> Array3<f32> + Sync,
    {
        let (c, h, w) = dataset.image_shape();
        let per_image: Vec<Vec<f32>> = indices
            .par_iter()
            .enumerate()
            .map(|(pos, &idx)| {
                let seed = derive_seed(&[self.seed, step, stream as u64, pos as u64]);
                let img = augment(dataset.image(idx), seed);
                let mut out = Vec::with_capacity(c * h * w);
                self.normalization.apply_into(img.view(), &mut out);
                out
            })
            .collect();
        let flat: Vec<f32> = per_image.concat();
        Ok(Tensor::from_vec(flat, (indices.len(), c, h, w), &self.device)?.to_dtype(self.dtype)?)
    }

    /// Composes the batch for `step`. When `with_unlabeled` is false the
    /// unlabeled views are skipped (labeled-only phases, supervised runs).
    pub fn compose(
        &self,
        dataset: &ImageDataset,
        split: &DatasetSplit,
        step: u64,
        with_unlabeled: bool,
    ) -> Result<MixedBatch> {
        let idx = self.indices(split, step)?;
        let strong = |img: ArrayView3<'_, f32>, s| strong_augment(img, &self.strong, s);
        let weak = |img: ArrayView3<'_, f32>, s| weak_augment(img, &self.weak, s);
        let labeled_images_strong =
            self.view_tensor(dataset, &idx.labeled, step, Stream::LabeledStrong, strong)?;
        let labels = one_hot(
            &idx.labeled.iter().map(|&i| dataset.label(i)).collect::<Vec<_>>(),
            dataset.num_classes(),
            self.dtype,
            &self.device,
        )?;
        let (unlabeled_images_weak, unlabeled_images_strong, unlabeled_indices) =
            if with_unlabeled && !idx.unlabeled.is_empty() {
                (
                    Some(self.view_tensor(dataset, &idx.unlabeled, step, Stream::UnlabeledWeak, weak)?),
                    Some(self.view_tensor(
                        dataset,
                        &idx.unlabeled,
                        step,
                        Stream::UnlabeledStrong,
                        strong,
                    )?),
                    idx.unlabeled,
                )
            } else {
                (None, None, Vec::new())
            };
        Ok(MixedBatch {
            labeled_images_strong,
            labels,
            unlabeled_images_weak,
            unlabeled_images_strong,
            labeled_indices: idx.labeled,
            unlabeled_indices,
        })
    }
}

/// Un-augmented, normalized tensor for evaluation.
pub fn eval_tensor(
    dataset: &ImageDataset,
    indices: &[usize],
    normalization: &Normalization,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let (c, h, w) = dataset.image_shape();
    let mut flat = Vec::with_capacity(indices.len() * c * h * w);
    for &i in indices {
        normalization.apply_into(dataset.image(i), &mut flat);
    }
    Ok(Tensor::from_vec(flat, (indices.len(), c, h, w), device)?.to_dtype(dtype)?)
}

pub fn one_hot(labels: &[usize], num_classes: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut data = vec![0f32; labels.len() * num_classes];
    for (row, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(Error::Contract(format!(
                "label {l} out of range for {num_classes} classes"
            )));
        }
        data[row * num_classes + l] = 1.0;
    }
    Ok(Tensor::from_vec(data, (labels.len(), num_classes), device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::dataset::{synthetic, DatasetId, SyntheticSpec};
    use crate::data::split::{make_split, SplitSpec};

    fn fixture() -> (ImageDataset, DatasetSplit) {
        let pair = synthetic(&SyntheticSpec {
            train_per_class: 10,
            test_per_class: 1,
            classes: 4,
            image_size: 8,
            ..Default::default()
        })
        .unwrap();
        let split = make_split(
            &SplitSpec::new(DatasetId::Synthetic, 0.3, 5),
            pair.train.labels(),
            4,
        )
        .unwrap();
        (pair.train, split)
    }

    fn composer(n_l: usize, mu: usize) -> BatchComposer {
        BatchComposer {
            n_l,
            mu,
            seed: 11,
            weak: WeakPolicy::default(),
            strong: StrongPolicy::default(),
            normalization: Normalization::identity(3),
            dtype: DType::F32,
            device: Device::Cpu,
        }
    }

    #[test]
    fn ratio_arithmetic() {
        let (ds, split) = fixture();
        let b = composer(2, 5).compose(&ds, &split, 0, true).unwrap();
        assert_eq!(b.n_u(), 10);
        assert_eq!(b.labeled_images_strong.dims(), &[2, 3, 8, 8]);
        assert_eq!(b.labels.dims(), &[2, 4]);
        assert_eq!(b.unlabeled_images_weak.unwrap().dims(), &[10, 3, 8, 8]);
        let b = composer(1, 7).compose(&ds, &split, 3, true).unwrap();
        assert_eq!(b.n_u(), 7);
    }

    #[test]
    fn labeled_draws_cover_pool_once_per_pass() {
        let (_, split) = fixture();
        let pool = split.labeled_indices().len();
        assert_eq!(pool, 12);
        let mut seen: Vec<usize> = (0..4)
            .flat_map(|s| compose_indices(&split, 3, 1, 1, s).unwrap().labeled)
            .collect();
        seen.sort_unstable();
        assert_eq!(seen, split.labeled_indices());
    }

    #[test]
    fn unlabeled_pool_wraps_instead_of_failing() {
        let (_, split) = fixture();
        // 28 unlabeled examples, 40 requested per step.
        let idx = compose_indices(&split, 4, 10, 2, 0).unwrap();
        assert_eq!(idx.unlabeled.len(), 40);
        assert!(idx.unlabeled.iter().all(|i| split.unlabeled_indices().contains(i)));
    }

    #[test]
    fn weak_and_strong_views_share_source() {
        let (ds, split) = fixture();
        let mut c = composer(2, 3);
        c.weak = WeakPolicy { flip_prob: 0.0, pad: 0 };
        c.strong = StrongPolicy {
            base: WeakPolicy { flip_prob: 0.0, pad: 0 },
            max_magnitude: 0.0,
            erase_prob: 0.0,
            jitter_strength: 0.0,
            ..Default::default()
        };
        let b = c.compose(&ds, &split, 1, true).unwrap();
        let weak = b.unlabeled_images_weak.unwrap();
        let strong = b.unlabeled_images_strong.unwrap();
        let diff = (weak - strong).unwrap().abs().unwrap().sum_all().unwrap();
        assert_eq!(diff.to_scalar::<f32>().unwrap(), 0.0);
        let expected = eval_tensor(&ds, &b.unlabeled_indices, &c.normalization, DType::F32, &Device::Cpu).unwrap();
        let diff = (expected - &c.compose(&ds, &split, 1, true).unwrap().unlabeled_images_weak.unwrap())
            .unwrap().abs().unwrap().sum_all().unwrap();
        assert_eq!(diff.to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn composition_is_reproducible() {
        let (ds, split) = fixture();
        let c = composer(2, 2);
        let a = c.compose(&ds, &split, 7, true).unwrap();
        let b = c.compose(&ds, &split, 7, true).unwrap();
        let va: Vec<f32> = a.unlabeled_images_strong.unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let vb: Vec<f32> = b.unlabeled_images_strong.unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(va, vb);
        assert_eq!(a.unlabeled_indices, b.unlabeled_indices);
    }

    #[test]
    fn degenerate_arguments_are_contract_errors() {
        let (_, split) = fixture();
        assert!(compose_indices(&split, 0, 1, 0, 0).is_err());
        assert!(compose_indices(&split, 1, 0, 0, 0).is_err());
    }
}
