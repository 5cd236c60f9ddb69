//! Metric stream records (JSON lines).

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::LossBreakdown;

pub const METRICS_SCHEMA: u32 = 1;
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const STEPS_FILE: &str = "steps.jsonl";
pub const ABORT_FILE: &str = "abort.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    LabeledOnly,
    SemiSupervised,
}

/// One record per epoch. Losses are epoch means over steps; `lr` is the rate
/// of the epoch's last step; accuracies are percentages and present only on
/// evaluation epochs. `L_u`, `coverage` and `pseudo_label_accuracy` are absent
/// while no unlabeled term is trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub schema: u32,
    pub step: u64,
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    #[serde(rename = "L")]
    pub l: f64,
    #[serde(rename = "L_l")]
    pub l_l: f64,
    #[serde(rename = "L_u")]
    pub l_u: Option<f64>,
    pub coverage: Option<f64>,
    /// Share of retained pseudo labels that match the hidden label.
    pub pseudo_label_accuracy: Option<f64>,
    #[serde(rename = "top1_T")]
    pub top1_t: Option<f64>,
    #[serde(rename = "top1_C")]
    pub top1_c: Option<f64>,
    pub top1_combined: Option<f64>,
    /// Seconds since the run (or resumed run) started. Not reproducible.
    pub wall_time: f64,
}

impl MetricRecord {
    /// Largest absolute difference over every numeric field except
    /// `wall_time`; `None` when the records differ structurally.
    pub fn max_difference(&self, other: &Self) -> Option<f64> {
        if self.schema != other.schema
            || self.step != other.step
            || self.epoch != other.epoch
            || self.phase != other.phase
        {
            return None;
        }
        let pairs = [
            (Some(self.lr), Some(other.lr)),
            (Some(self.l), Some(other.l)),
            (Some(self.l_l), Some(other.l_l)),
            (self.l_u, other.l_u),
            (self.coverage, other.coverage),
            (self.pseudo_label_accuracy, other.pseudo_label_accuracy),
            (self.top1_t, other.top1_t),
            (self.top1_c, other.top1_c),
            (self.top1_combined, other.top1_combined),
        ];
        let mut worst = 0.0f64;
        for (a, b) in pairs {
            match (a, b) {
                (None, None) => {}
                (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
                _ => return None,
            }
        }
        Some(worst)
    }
}

/// Per-step loss record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub schema: u32,
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub grad_norm: f64,
    pub coverage: Option<f64>,
    pub pseudo_label_accuracy: Option<f64>,
    #[serde(flatten)]
    pub losses: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbortRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    #[serde(rename = "L")]
    pub l: Option<f64>,
    #[serde(rename = "L_l")]
    pub l_l: Option<f64>,
    #[serde(rename = "L_u")]
    pub l_u: Option<f64>,
    pub error: String,
}

pub fn append_jsonl<T: Serialize>(path: &Path, record: &T) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut line = serde_json::to_string(record)?;
    line.push('\n');
    f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Parses every line; the first malformed line is an error.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            Error::Dataset(format!("{}:{}: {e}", path.display(), i + 1))
        })?);
    }
    Ok(out)
}

/// Keeps only the lines for which `keep` holds. Missing files are left alone.
pub fn retain_jsonl(path: &Path, keep: impl Fn(&serde_json::Value) -> bool) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line)?;
        if keep(&v) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    std::fs::write(path, kept).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record() -> MetricRecord {
        MetricRecord {
            schema: METRICS_SCHEMA,
            step: 10,
            epoch: 0,
            phase: Phase::SemiSupervised,
            lr: 1e-3,
            l: 2.0,
            l_l: 1.0,
            l_u: Some(0.25),
            coverage: Some(0.5),
            pseudo_label_accuracy: None,
            top1_t: Some(50.0),
            top1_c: Some(40.0),
            top1_combined: Some(55.0),
            wall_time: 1.0,
        }
    }

    #[test]
    fn field_names_and_round_trip() {
        let r = record();
        let s = serde_json::to_string(&r).unwrap();
        for key in ["\"L\":", "\"L_l\":", "\"L_u\":", "\"top1_T\":", "\"top1_C\":", "\"schema\":1"] {
            assert!(s.contains(key), "{s}");
        }
        assert_eq!(serde_json::from_str::<MetricRecord>(&s).unwrap(), r);
    }

    #[test]
    fn difference_ignores_wall_time() {
        let a = record();
        let mut b = record();
        b.wall_time = 99.0;
        assert_eq!(a.max_difference(&b), Some(0.0));
        b.l_u = None;
        assert_eq!(a.max_difference(&b), None);
    }

    #[test]
    fn jsonl_append_read_retain() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        for e in 0..3 {
            append_jsonl(&p, &MetricRecord { epoch: e, ..record() }).unwrap();
        }
        retain_jsonl(&p, |v| v["epoch"].as_u64() < Some(2)).unwrap();
        let back: Vec<MetricRecord> = read_jsonl(&p).unwrap();
        assert_eq!(back.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![0, 1]);
    }
}
