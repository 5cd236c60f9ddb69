//! Deterministic labeled/unlabeled partitions.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::dataset::DatasetId;
use crate::error::{Error, Result};
use crate::rng::{rng_from, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub dataset_id: DatasetId,
    pub label_fraction: f64,
    pub seed: u64,
    pub stratified: bool,
}

impl SplitSpec {
    pub fn new(dataset_id: DatasetId, label_fraction: f64, seed: u64) -> Self {
        Self {
            dataset_id,
            label_fraction,
            seed,
            stratified: true,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "label_fraction must lie in (0, 1], got {}",
                self.label_fraction
            )));
        }
        Ok(())
    }
}

/// On-disk form of a split: `{spec, labeled_indices, unlabeled_indices}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub spec: SplitSpec,
    pub labeled_indices: Vec<usize>,
    pub unlabeled_indices: Vec<usize>,
}

/// A labeled/unlabeled partition of a training set.
///
/// The true classes of unlabeled examples are kept for diagnostics
/// (pseudo-label accuracy) and are only reachable through
/// [`DatasetSplit::hidden_label`]; batches handed to losses never carry them.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    spec: SplitSpec,
    labeled_indices: Vec<usize>,
    unlabeled_indices: Vec<usize>,
    hidden_labels: BTreeMap<usize, usize>,
}

impl DatasetSplit {
    pub fn spec(&self) -> &SplitSpec {
        &self.spec
    }

    pub fn labeled_indices(&self) -> &[usize] {
        &self.labeled_indices
    }

    pub fn unlabeled_indices(&self) -> &[usize] {
        &self.unlabeled_indices
    }

    pub fn hidden_label(&self, index: usize) -> Option<usize> {
        self.hidden_labels.get(&index).copied()
    }

    pub fn to_file(&self) -> SplitFile {
        SplitFile {
            spec: self.spec,
            labeled_indices: self.labeled_indices.clone(),
            unlabeled_indices: self.unlabeled_indices.clone(),
        }
    }

    /// Serialized JSON; identical splits give identical bytes.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_file())? + "\n")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    /// Rebuilds a split from its file form against the dataset's labels,
    /// checking that the two index lists partition the training set.
    pub fn from_file(file: SplitFile, labels: &[usize]) -> Result<Self> {
        let n = labels.len();
        let mut seen = vec![false; n];
        for &i in file.labeled_indices.iter().chain(&file.unlabeled_indices) {
            if i >= n || seen[i] {
                return Err(Error::Split(format!(
                    "index {i} is out of range or listed twice for a dataset of {n}"
                )));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Split(
                "split does not cover the full training set".into(),
            ));
        }
        let hidden_labels = file
            .unlabeled_indices
            .iter()
            .map(|&i| (i, labels[i]))
            .collect();
        Ok(Self {
            spec: file.spec,
            labeled_indices: file.labeled_indices,
            unlabeled_indices: file.unlabeled_indices,
            hidden_labels,
        })
    }

    pub fn load(path: &Path, labels: &[usize]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_file(serde_json::from_str(&text)?, labels)
    }
}

fn labeled_count(fraction: f64, size: usize) -> usize {
    (fraction * size as f64).round() as usize
}

/// Partitions `labels` (one class id per training index) into labeled and
/// unlabeled index lists. Both lists are returned in ascending order.
pub fn make_split(spec: &SplitSpec, labels: &[usize], num_classes: usize) -> Result<DatasetSplit> {
    spec.validate()?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &c) in labels.iter().enumerate() {
        let slot = by_class.get_mut(c).ok_or_else(|| {
            Error::Split(format!("label {c} out of range for {num_classes} classes"))
        })?;
        slot.push(i);
    }
    if let Some(c) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::Split(format!("class {c} has no examples")));
    }

    let mut is_labeled = vec![false; labels.len()];
    if spec.stratified {
        for (c, members) in by_class.iter_mut().enumerate() {
            let take = labeled_count(spec.label_fraction, members.len());
            if take == 0 {
                return Err(Error::Split(format!(
                    "label_fraction {} leaves class {c} ({} examples) with no labeled examples",
                    spec.label_fraction,
                    members.len()
                )));
            }
            let mut rng = rng_from(&[Stream::Split as u64, spec.seed, c as u64]);
            members.shuffle(&mut rng);
            for &i in &members[..take] {
                is_labeled[i] = true;
            }
        }
    } else {
        let mut order: Vec<usize> = (0..labels.len()).collect();
        let mut rng = rng_from(&[Stream::Split as u64, spec.seed, u64::MAX]);
        order.shuffle(&mut rng);
        for &i in &order[..labeled_count(spec.label_fraction, labels.len())] {
            is_labeled[i] = true;
        }
        for (c, members) in by_class.iter().enumerate() {
            if !members.iter().any(|&i| is_labeled[i]) {
                return Err(Error::Split(format!(
                    "label_fraction {} leaves class {c} with no labeled examples",
                    spec.label_fraction
                )));
            }
        }
    }

    let (labeled_indices, unlabeled_indices): (Vec<usize>, Vec<usize>) =
        (0..labels.len()).partition(|&i| is_labeled[i]);
    let hidden_labels = unlabeled_indices.iter().map(|&i| (i, labels[i])).collect();
    Ok(DatasetSplit {
        spec: *spec,
        labeled_indices,
        unlabeled_indices,
        hidden_labels,
    })
}
