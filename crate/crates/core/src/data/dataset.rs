//! In-memory image classification datasets.
//!
//! Pixels are stored as `f32` in `[0, 1]`, channel-major per image. CIFAR-10 and
//! CIFAR-100 are read from their binary archive layout; `synthetic` is a
//! procedurally generated CIFAR-shaped dataset for offline runs and tests.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{ArrayView3, ArrayViewMut3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from, Stream};

pub const DATA_DIR_ENV: &str = "SEMIFORMER_DATA";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetId {
    Cifar10,
    Cifar100,
    Synthetic,
}

impl DatasetId {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetId::Cifar10 => "cifar10",
            DatasetId::Cifar100 => "cifar100",
            DatasetId::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cifar10" | "cifar-10" => Ok(DatasetId::Cifar10),
            "cifar100" | "cifar-100" => Ok(DatasetId::Cifar100),
            "synthetic" => Ok(DatasetId::Synthetic),
            other => Err(Error::Config(format!("unknown dataset id `{other}`"))),
        }
    }
}

/// A labeled image set held in memory.
#[derive(Debug, Clone)]
pub struct ImageDataset {
    channels: usize,
    height: usize,
    width: usize,
    num_classes: usize,
    pixels: Vec<f32>,
    labels: Vec<usize>,
}

impl ImageDataset {
    pub fn new(
        (channels, height, width): (usize, usize, usize),
        num_classes: usize,
        pixels: Vec<f32>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let per = channels * height * width;
        if pixels.len() != per * labels.len() {
            return Err(Error::Dataset(format!(
                "pixel buffer holds {} values, expected {} images of {per}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Dataset(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            num_classes,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// `(C, H, W)`
    pub fn image_shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, index: usize) -> ArrayView3<'_, f32> {
        let n = self.image_len();
        ArrayView3::from_shape(
            (self.channels, self.height, self.width),
            &self.pixels[index * n..(index + 1) * n],
        )
        .expect("image buffer matches shape")
    }

    pub fn label(&self, index: usize) -> usize {
        self.labels[index]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Number of examples per class, indexed by class id.
    pub fn class_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_classes];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }

    /// New dataset holding the given indices, in the given order.
    pub fn subset(&self, indices: &[usize]) -> ImageDataset {
        let n = self.image_len();
        let mut pixels = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            pixels.extend_from_slice(&self.pixels[i * n..(i + 1) * n]);
        }
        ImageDataset {
            channels: self.channels,
            height: self.height,
            width: self.width,
            num_classes: self.num_classes,
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Keeps the first `per_class` examples of every class, preserving index order.
    pub fn limit_per_class(&self, per_class: usize) -> ImageDataset {
        let mut seen = vec![0usize; self.num_classes];
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let c = self.labels[i];
                seen[c] += 1;
                seen[c] <= per_class
            })
            .collect();
        self.subset(&keep)
    }

    /// Per-channel mean and standard deviation over the whole set.
    pub fn channel_stats(&self) -> (Vec<f32>, Vec<f32>) {
        let hw = self.height * self.width;
        let mut sum = vec![0f64; self.channels];
        let mut sq = vec![0f64; self.channels];
        for img in self.pixels.chunks(self.image_len()) {
            for (c, plane) in img.chunks(hw).enumerate() {
                for &v in plane {
                    sum[c] += f64::from(v);
                    sq[c] += f64::from(v) * f64::from(v);
                }
            }
        }
        let count = (self.len() * hw).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| ((s / count - m * m).max(1e-12)).sqrt() as f32)
            .collect();
        (mean.into_iter().map(|m| m as f32).collect(), std)
    }
}

/// Train and test partitions of one dataset.
#[derive(Debug, Clone)]
pub struct DatasetPair {
    pub train: ImageDataset,
    pub test: ImageDataset,
}

/// Size knobs for the procedural dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    pub noise: f32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            train_per_class: 100,
            test_per_class: 50,
            image_size: 32,
            noise: 0.08,
            seed: 0,
        }
    }
}

/// Generates class-conditional oriented textures with random phase, contrast,
/// tint and a randomly placed occluding blob. Class identity lives in local
/// texture (frequency and orientation), not in any single pixel.
pub fn synthetic(spec: &SyntheticSpec) -> Result<DatasetPair> {
    if spec.classes == 0 || spec.image_size < 4 {
        return Err(Error::Config(
            "synthetic dataset needs at least one class and image_size >= 4".into(),
        ));
    }
    let make = |per_class: usize, part: u64| -> Result<ImageDataset> {
        let s = spec.image_size;
        let n = per_class * spec.classes;
        let mut pixels = vec![0f32; n * 3 * s * s];
        let mut labels = Vec::with_capacity(n);
        let noise = Normal::new(0.0f32, spec.noise.max(0.0)).expect("valid std");
        for i in 0..n {
            // interleave classes so any prefix stays roughly balanced
            let class = i % spec.classes;
            labels.push(class);
            let mut rng = rng_from(&[Stream::Synthetic as u64, spec.seed, part, i as u64]);
            let angle = std::f32::consts::PI * class as f32 / spec.classes as f32
                + rng.random_range(-0.15..0.15);
            let freq = 0.35 + 0.5 * ((class * 7) % spec.classes) as f32 / spec.classes as f32;
            let phase = rng.random_range(0.0..std::f32::consts::TAU);
            let contrast = rng.random_range(0.25..0.45);
            let base = rng.random_range(0.35..0.65);
            let tint: [f32; 3] = [
                rng.random_range(0.8..1.2),
                rng.random_range(0.8..1.2),
                rng.random_range(0.8..1.2),
            ];
            let (bx, by) = (rng.random_range(0..s), rng.random_range(0..s));
            let br = rng.random_range(2..=s / 4 + 2) as isize;
            let blob = rng.random_range(0.0..1.0f32);
            let (ca, sa) = (angle.cos(), angle.sin());
            let mut img = ArrayViewMut3::from_shape(
                (3, s, s),
                &mut pixels[i * 3 * s * s..(i + 1) * 3 * s * s],
            )
            .expect("shape");
            for y in 0..s {
                for x in 0..s {
                    let u = ca * x as f32 + sa * y as f32;
                    let wave = (freq * u + phase).sin();
                    let (dx, dy) = (x as isize - bx as isize, y as isize - by as isize);
                    let in_blob = dx * dx + dy * dy <= br * br;
                    for c in 0..3 {
                        let v = if in_blob {
                            blob
                        } else {
                            (base + contrast * wave) * tint[c]
                        };
                        img[[c, y, x]] = (v + noise.sample(&mut rng)).clamp(0.0, 1.0);
                    }
                }
            }
        }
        ImageDataset::new((3, s, s), spec.classes, pixels, labels)
    };
    Ok(DatasetPair {
        train: make(spec.train_per_class, 0)?,
        test: make(spec.test_per_class, 1)?,
    })
}

const CIFAR_SIDE: usize = 32;
const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;

fn read_cifar_file(path: &Path, label_bytes: usize, num_classes: usize) -> Result<ImageDataset> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    let record = label_bytes + CIFAR_PIXELS;
    if raw.is_empty() || raw.len() % record != 0 {
        return Err(Error::Dataset(format!(
            "{} is not a CIFAR binary archive ({} bytes)",
            path.display(),
            raw.len()
        )));
    }
    let n = raw.len() / record;
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for rec in raw.chunks_exact(record) {
        // CIFAR-100 records carry (coarse, fine); the fine label is the class.
        labels.push(usize::from(rec[label_bytes - 1]));
        pixels.extend(rec[label_bytes..].iter().map(|&b| f32::from(b) / 255.0));
    }
    ImageDataset::new((3, CIFAR_SIDE, CIFAR_SIDE), num_classes, pixels, labels)
}

fn concat(parts: Vec<ImageDataset>) -> Result<ImageDataset> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Dataset("no archive files".into()))?;
    let shape = first.image_shape();
    let classes = first.num_classes;
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for p in parts {
        pixels.extend(p.pixels);
        labels.extend(p.labels);
    }
    ImageDataset::new(shape, classes, pixels, labels)
}

fn locate(root: &Path, subdir: &str, probe: &str) -> Result<PathBuf> {
    [root.join(subdir), root.to_path_buf()]
        .into_iter()
        .find(|d| d.join(probe).is_file())
        .ok_or_else(|| {
            Error::Dataset(format!(
                "cannot find `{probe}` under {} or {}",
                root.join(subdir).display(),
                root.display()
            ))
        })
}

pub fn load_cifar10(root: &Path) -> Result<DatasetPair> {
    let dir = locate(root, "cifar-10-batches-bin", "data_batch_1.bin")?;
    let train = (1..=5)
        .map(|k| read_cifar_file(&dir.join(format!("data_batch_{k}.bin")), 1, 10))
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetPair {
        train: concat(train)?,
        test: read_cifar_file(&dir.join("test_batch.bin"), 1, 10)?,
    })
}

pub fn load_cifar100(root: &Path) -> Result<DatasetPair> {
    let dir = locate(root, "cifar-100-binary", "train.bin")?;
    Ok(DatasetPair {
        train: read_cifar_file(&dir.join("train.bin"), 2, 100)?,
        test: read_cifar_file(&dir.join("test.bin"), 2, 100)?,
    })
}

/// Dataset root: explicit path, else `$SEMIFORMER_DATA`, else `./data`.
pub fn data_root(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

pub fn load(id: DatasetId, root: &Path, synthetic_spec: &SyntheticSpec) -> Result<DatasetPair> {
    match id {
        DatasetId::Cifar10 => load_cifar10(root),
        DatasetId::Cifar100 => load_cifar100(root),
        DatasetId::Synthetic => synthetic(synthetic_spec),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_dataset_id_is_a_config_error() {
        assert!(matches!("imagenet".parse::<DatasetId>(), Err(Error::Config(_))));
        assert_eq!("CIFAR10".parse::<DatasetId>().unwrap(), DatasetId::Cifar10);
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let spec = SyntheticSpec {
            train_per_class: 6,
            test_per_class: 2,
            ..Default::default()
        };
        let a = synthetic(&spec).unwrap();
        let b = synthetic(&spec).unwrap();
        assert_eq!(a.train.pixels, b.train.pixels);
        assert_eq!(a.train.class_sizes(), vec![6; 10]);
        assert_eq!(a.test.len(), 20);
        assert!(a.train.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn cifar_binary_layout_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = Vec::new();
        for label in [3u8, 7] {
            bytes.push(label);
            bytes.extend((0..CIFAR_PIXELS).map(|i| (i % 256) as u8));
        }
        let path = dir.path().join("batch.bin");
        fs::write(&path, &bytes).unwrap();
        let ds = read_cifar_file(&path, 1, 10).unwrap();
        assert_eq!(ds.labels(), &[3, 7]);
        assert_eq!(ds.image(1)[[0, 0, 1]], 1.0 / 255.0);
        fs::write(&path, &bytes[..100]).unwrap();
        assert!(read_cifar_file(&path, 1, 10).is_err());
    }

    #[test]
    fn limit_per_class_keeps_prefix() {
        let pair = synthetic(&SyntheticSpec::default()).unwrap();
        let small = pair.train.limit_per_class(3);
        assert_eq!(small.class_sizes(), vec![3; 10]);
        assert_eq!(small.label(0), pair.train.label(0));
    }
}
