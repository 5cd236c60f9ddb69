//! Top-1 accuracy of each stream and of the averaged prediction.

use candle_core::{DType, Device};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{eval_tensor, ImageDataset, Normalization};
use crate::error::{Error, Result};
use crate::models::ops::{argmax_rows, softmax_last};
use crate::models::{HybridModel, Mode, StreamLogits};

/// Anything that maps a normalized image batch to per-stream logits.
pub trait Predictor: Sync {
    fn predict(&self, images: &candle_core::Tensor) -> Result<StreamLogits>;
}

impl Predictor for HybridModel {
    fn predict(&self, images: &candle_core::Tensor) -> Result<StreamLogits> {
        self.forward(images, Mode::Eval)
    }
}

/// Percent top-1 accuracy. Streams the model lacks are `None`; for a
/// single-stream model the combined accuracy is that stream's.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub top1_t: Option<f64>,
    pub top1_c: Option<f64>,
    pub top1_combined: f64,
    pub count: usize,
}

#[derive(Debug, Default, Clone, Copy)]
struct Hits {
    t: usize,
    c: usize,
    combined: usize,
    has_t: bool,
    has_c: bool,
}

fn count_hits(logits: &StreamLogits, labels: &[usize]) -> Result<Hits> {
    let hits = |pred: Vec<usize>| pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    let mut h = Hits::default();
    if let Some(z) = &logits.transformer {
        h.t = hits(argmax_rows(&softmax_last(z)?)?);
        h.has_t = true;
    }
    if let Some(z) = &logits.conv {
        h.c = hits(argmax_rows(&softmax_last(z)?)?);
        h.has_c = true;
    }
    h.combined = hits(argmax_rows(&logits.combined_probs()?)?);
    Ok(h)
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub batch_size: usize,
    pub dtype: DType,
    pub device: Device,
    /// Evaluate batches concurrently (read-only model access).
    pub parallel: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            batch_size: 256,
            dtype: DType::F32,
            device: Device::Cpu,
            parallel: false,
        }
    }
}

/// Un-augmented evaluation over `indices` of `dataset`.
pub fn evaluate<P: Predictor>(
    model: &P,
    dataset: &ImageDataset,
    indices: &[usize],
    normalization: &Normalization,
    options: &EvalOptions,
) -> Result<EvalResult> {
    if indices.is_empty() {
        return Err(Error::Contract("empty evaluation set".into()));
    }
    let run = |chunk: &[usize]| -> Result<Hits> {
        let x = eval_tensor(dataset, chunk, normalization, options.dtype, &options.device)?;
        let labels: Vec<usize> = chunk.iter().map(|&i| dataset.label(i)).collect();
        count_hits(&model.predict(&x)?, &labels)
    };
    let chunks: Vec<&[usize]> = indices.chunks(options.batch_size.max(1)).collect();
    let parts: Vec<Hits> = if options.parallel {
        chunks.par_iter().map(|c| run(c)).collect::<Result<_>>()?
    } else {
        chunks.iter().map(|c| run(c)).collect::<Result<_>>()?
    };
    let n = indices.len();
    let pct = |k: usize| 100.0 * k as f64 / n as f64;
    let sum = |f: fn(&Hits) -> usize| parts.iter().map(f).sum::<usize>();
    let (has_t, has_c) = (parts[0].has_t, parts[0].has_c);
    Ok(EvalResult {
        top1_t: has_t.then(|| pct(sum(|h| h.t))),
        top1_c: has_c.then(|| pct(sum(|h| h.c))),
        top1_combined: pct(sum(|h| h.combined)),
        count: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Tensor;

    struct Fixed(Vec<usize>, usize);

    impl Predictor for Fixed {
        fn predict(&self, images: &Tensor) -> Result<StreamLogits> {
            let n = images.dim(0)?;
            let mut z = vec![0f32; n * self.1];
            for r in 0..n {
                z[r * self.1 + self.0[r % self.0.len()]] = 5.0;
            }
            let t = Tensor::from_vec(z, (n, self.1), &Device::Cpu)?;
            Ok(StreamLogits { transformer: Some(t.clone()), conv: Some(t) })
        }
    }

    fn tiny(labels: Vec<usize>) -> ImageDataset {
        let n = labels.len();
        ImageDataset::new((1, 2, 2), 3, vec![0.5; n * 4], labels).unwrap()
    }

    #[test]
    fn identical_streams_give_identical_accuracies() {
        let ds = tiny(vec![0, 1, 2, 0]);
        let r = evaluate(&Fixed(vec![0], 3), &ds, &[0, 1, 2, 3], &Normalization::identity(1), &EvalOptions::default()).unwrap();
        assert_eq!(r.top1_t, Some(50.0));
        assert_eq!(r.top1_c, Some(50.0));
        assert_eq!(r.top1_combined, 50.0);
    }

    #[test]
    fn single_correct_example_and_empty_set() {
        let ds = tiny(vec![2]);
        let opts = EvalOptions { batch_size: 1, parallel: true, ..Default::default() };
        let r = evaluate(&Fixed(vec![2], 3), &ds, &[0], &Normalization::identity(1), &opts).unwrap();
        assert_eq!((r.top1_t, r.top1_c, r.top1_combined), (Some(100.0), Some(100.0), 100.0));
        assert!(matches!(
            evaluate(&Fixed(vec![2], 3), &ds, &[], &Normalization::identity(1), &opts),
            Err(Error::Contract(_))
        ));
    }
}
