//! Training loop: labeled-only warmup/pretraining, then the full
//! semi-supervised objective, with per-epoch evaluation and checkpoints.

pub mod checkpoint;
pub mod evaluate;
pub mod metrics;
pub mod optim;
pub mod schedule;

use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use crate::data::{BatchComposer, DatasetSplit, ImageDataset, Normalization, StrongPolicy, WeakPolicy};
use crate::error::{Error, Result};
use crate::models::{HybridModel, ModelConfig};
use crate::objective::{step_objective, MethodVariant, ObjectiveSettings};
use crate::rng::{derive_seed, Stream};

pub use checkpoint::{Checkpoint, StoredTensor};
pub use evaluate::{evaluate, EvalOptions, EvalResult, Predictor};
pub use metrics::{AbortRecord, MetricRecord, Phase, StepRecord};
pub use optim::{AdamW, AdamWConfig};
pub use schedule::Schedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_epochs: usize,
    pub warmup_epochs: usize,
    /// Epochs after warmup that still train on labeled data only.
    pub labeled_only_epochs: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub n_l: usize,
    pub mu: usize,
    pub tau: f64,
    pub lambda: f64,
    pub seed: u64,
    pub deterministic: bool,
    pub eval_every: usize,
    pub variant: MethodVariant,
    pub label_smoothing: f64,
    pub optimizer: AdamWConfig,
    /// Defaults to one pass over the labeled set: `ceil(N_labeled / n_l)`.
    pub steps_per_epoch: Option<usize>,
    pub eval_batch_size: usize,
    /// Evaluate on the first `n` test images only.
    pub eval_limit: Option<usize>,
    /// Keep `epoch_XXXX.ckpt` at every evaluation, not just `last.ckpt`.
    pub keep_epoch_checkpoints: bool,
    pub weak: WeakPolicy,
    pub strong: StrongPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_epochs: 100,
            warmup_epochs: 5,
            labeled_only_epochs: 25,
            lr_init: 1e-3,
            lr_final: 1e-5,
            n_l: 16,
            mu: 5,
            tau: 0.7,
            lambda: 4.0,
            seed: 0,
            deterministic: true,
            eval_every: 1,
            variant: MethodVariant::default(),
            label_smoothing: 0.0,
            optimizer: AdamWConfig::default(),
            steps_per_epoch: None,
            eval_batch_size: 256,
            eval_limit: None,
            keep_epoch_checkpoints: false,
            weak: WeakPolicy::default(),
            strong: StrongPolicy::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.total_epochs == 0 {
            return fail("total_epochs must be positive".into());
        }
        if self.warmup_epochs + self.labeled_only_epochs > self.total_epochs {
            return fail(format!(
                "warmup_epochs + labeled_only_epochs = {} exceeds total_epochs = {}",
                self.warmup_epochs + self.labeled_only_epochs,
                self.total_epochs
            ));
        }
        if !(self.lr_final >= 0.0 && self.lr_final <= self.lr_init) {
            return fail(format!("need 0 <= lr_final <= lr_init, got {} and {}", self.lr_final, self.lr_init));
        }
        if self.n_l == 0 || self.mu == 0 {
            return fail("n_l and mu must be positive".into());
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return fail(format!("tau must lie in (0, 1), got {}", self.tau));
        }
        if !(self.lambda >= 0.0) {
            return fail(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail(format!("label_smoothing must lie in [0, 1), got {}", self.label_smoothing));
        }
        if self.eval_every == 0 || self.eval_batch_size == 0 || self.steps_per_epoch == Some(0) {
            return fail("eval_every, eval_batch_size and steps_per_epoch must be positive".into());
        }
        self.variant.validate()
    }

    /// Epochs trained without the unlabeled term.
    pub fn supervised_epochs(&self) -> usize {
        self.warmup_epochs + self.labeled_only_epochs
    }

    pub fn steps_per_epoch(&self, labeled_count: usize) -> usize {
        self.steps_per_epoch.unwrap_or_else(|| labeled_count.div_ceil(self.n_l).max(1))
    }

    pub fn schedule(&self, steps_per_epoch: usize) -> Schedule {
        Schedule {
            warmup_steps: (self.warmup_epochs * steps_per_epoch) as u64,
            total_steps: (self.total_epochs * steps_per_epoch) as u64,
            lr_init: self.lr_init,
            lr_final: self.lr_final,
        }
    }

    fn objective(&self) -> ObjectiveSettings {
        ObjectiveSettings {
            threshold: self.tau,
            lambda: self.lambda,
            label_smoothing: self.label_smoothing,
        }
    }
}

/// Learning rate at `step` for a run whose epochs have `steps_per_epoch` steps.
pub fn lr_at(step: u64, config: &TrainConfig, steps_per_epoch: usize) -> f64 {
    config.schedule(steps_per_epoch).lr_at(step)
}

/// Progress counters. Data order and augmentation are pure functions of
/// `(seed, global_step)`, so these plus the tensors restore a run exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    /// Completed epochs.
    pub epoch: usize,
    pub global_step: u64,
    /// Best `top1_combined` so far.
    pub best_metric: Option<f64>,
    pub optimizer_step: u64,
    pub data_seed: u64,
    pub steps_per_epoch: usize,
}

/// Training inputs. `eval` is typically the test set.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub train: &'a ImageDataset,
    pub eval: &'a ImageDataset,
    pub split: &'a DatasetSplit,
    pub normalization: &'a Normalization,
}

pub const LAST_CHECKPOINT: &str = "last.ckpt";

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}.ckpt")
}

#[derive(Debug, Default, Clone, Copy)]
struct EpochTotals {
    steps: usize,
    l: f64,
    l_l: f64,
    l_u: f64,
    coverage: f64,
    unlabeled_steps: usize,
    retained: usize,
    correct: usize,
    last_lr: f64,
}

pub struct Trainer<'a> {
    config: TrainConfig,
    model_config: ModelConfig,
    data: TrainData<'a>,
    model: HybridModel,
    optimizer: AdamW,
    composer: BatchComposer,
    schedule: Schedule,
    state: RunState,
    out_dir: Option<PathBuf>,
    eval_indices: Vec<usize>,
    started: Instant,
}

impl<'a> Trainer<'a> {
    /// Builds the model the variant trains (from `model_config`) and an
    /// optimizer. Nothing is written until the first epoch ends.
    pub fn new(
        config: &TrainConfig,
        model_config: &ModelConfig,
        data: TrainData<'a>,
        out_dir: Option<&Path>,
    ) -> Result<Self> {
        config.validate()?;
        let model_config = config.variant.model_config(model_config);
        if data.split.labeled_indices().is_empty() {
            return Err(Error::Config("split has no labeled examples".into()));
        }
        if config.variant.uses_unlabeled()
            && config.total_epochs > config.supervised_epochs()
            && data.split.unlabeled_indices().is_empty()
        {
            return Err(Error::Config(format!(
                "variant {} needs unlabeled data but the split has none",
                config.variant.name
            )));
        }
        let device = Device::Cpu;
        let model = HybridModel::new(
            &model_config,
            data.train.image_shape(),
            data.train.num_classes(),
            derive_seed(&[config.seed, Stream::Init as u64]),
            DType::F32,
            &device,
        )?;
        config.variant.validate_model(&model)?;
        let steps_per_epoch = config.steps_per_epoch(data.split.labeled_indices().len());
        let data_seed = derive_seed(&[config.seed, Stream::LabeledOrder as u64]);
        let composer = BatchComposer {
            n_l: config.n_l,
            mu: config.mu,
            seed: data_seed,
            weak: config.weak,
            strong: config.strong.clone(),
            normalization: data.normalization.clone(),
            dtype: DType::F32,
            device,
        };
        let eval_n = config.eval_limit.unwrap_or(data.eval.len()).min(data.eval.len());
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        Ok(Self {
            schedule: config.schedule(steps_per_epoch),
            config: config.clone(),
            model_config,
            data,
            model,
            optimizer: AdamW::new(config.optimizer),
            composer,
            state: RunState {
                epoch: 0,
                global_step: 0,
                best_metric: None,
                optimizer_step: 0,
                data_seed,
                steps_per_epoch,
            },
            out_dir: out_dir.map(Path::to_path_buf),
            eval_indices: (0..eval_n).collect(),
            started: Instant::now(),
        })
    }

    pub fn model(&self) -> &HybridModel {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.model_config
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.state.steps_per_epoch
    }

    pub fn is_finished(&self) -> bool {
        self.state.epoch >= self.config.total_epochs
    }

    fn snapshot_config(&self) -> serde_json::Value {
        serde_json::json!({ "train": self.config, "model": self.model_config })
    }

    /// Parameters, normalization statistics, optimizer moments and counters.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors = std::collections::BTreeMap::new();
        let store = self.model.store();
        for (name, v) in store.params() {
            tensors.insert(format!("param/{name}"), StoredTensor::from_tensor(v.as_tensor())?);
        }
        for (name, v) in store.buffers() {
            tensors.insert(format!("buffer/{name}"), StoredTensor::from_tensor(v.as_tensor())?);
        }
        for (name, t) in &self.optimizer.m {
            tensors.insert(format!("adam_m/{name}"), StoredTensor::from_tensor(t)?);
        }
        for (name, t) in &self.optimizer.v {
            tensors.insert(format!("adam_v/{name}"), StoredTensor::from_tensor(t)?);
        }
        let state = RunState {
            optimizer_step: self.optimizer.step,
            ..self.state.clone()
        };
        Ok(Checkpoint {
            config: self.snapshot_config(),
            state: serde_json::to_value(state)?,
            tensors,
        })
    }

    /// Restores a checkpoint written by a run with the same configuration.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.config != self.snapshot_config() {
            return Err(Error::Checkpoint(
                "checkpoint was written with a different train/model configuration".into(),
            ));
        }
        let state: RunState = serde_json::from_value(ckpt.state.clone())?;
        if state.steps_per_epoch != self.state.steps_per_epoch || state.data_seed != self.state.data_seed {
            return Err(Error::Checkpoint("checkpoint data schedule does not match this split".into()));
        }
        let device = self.model.store().device().clone();
        let store = self.model.store();
        let expected = store.params().len() + store.buffers().len();
        let mut seen = 0;
        let mut m = std::collections::BTreeMap::new();
        let mut v = std::collections::BTreeMap::new();
        for (key, stored) in &ckpt.tensors {
            let (group, name) = key
                .split_once('/')
                .ok_or_else(|| Error::Checkpoint(format!("bad tensor key {key}")))?;
            let t = stored.to_tensor(&device)?;
            match group {
                "param" | "buffer" => {
                    store.assign(name, &t)?;
                    seen += 1;
                }
                "adam_m" => {
                    m.insert(name.to_string(), t);
                }
                "adam_v" => {
                    v.insert(name.to_string(), t);
                }
                _ => return Err(Error::Checkpoint(format!("unknown tensor group {group}"))),
            }
        }
        if seen != expected {
            return Err(Error::Checkpoint(format!("checkpoint holds {seen} of {expected} model tensors")));
        }
        self.optimizer.m = m;
        self.optimizer.v = v;
        self.optimizer.step = state.optimizer_step;
        self.state = state;
        self.truncate_streams()?;
        Ok(())
    }

    pub fn resume(&mut self, path: &Path) -> Result<()> {
        self.restore(&Checkpoint::load(path)?)
    }

    /// Drops metric lines past the restored position so the stream continues cleanly.
    fn truncate_streams(&self) -> Result<()> {
        let Some(dir) = &self.out_dir else { return Ok(()) };
        let epoch = self.state.epoch as u64;
        let step = self.state.global_step;
        metrics::retain_jsonl(&dir.join(metrics::METRICS_FILE), |v| v["epoch"].as_u64() < Some(epoch))?;
        metrics::retain_jsonl(&dir.join(metrics::STEPS_FILE), |v| v["step"].as_u64() <= Some(step))
    }

    fn write_abort(&self, epoch: usize, lr: f64, err: &Error) {
        let Some(dir) = &self.out_dir else { return };
        let (l, l_l, l_u) = match err {
            Error::NonFiniteLoss { total, labeled, unlabeled, .. } => (Some(*total), Some(*labeled), Some(*unlabeled)),
            _ => (None, None, None),
        };
        let record = AbortRecord {
            step: self.state.global_step + 1,
            epoch,
            lr,
            l,
            l_l,
            l_u,
            error: err.to_string(),
        };
        let path = dir.join(metrics::ABORT_FILE);
        if let Ok(text) = serde_json::to_string_pretty(&record) {
            if let Err(e) = std::fs::write(&path, text) {
                log::error!("could not write {}: {e}", path.display());
            }
        }
    }

    fn step(&mut self, epoch: usize, totals: &mut EpochTotals) -> Result<StepRecord> {
        let step = self.state.global_step;
        let lr = self.schedule.lr_at(step);
        let unlabeled_phase = epoch >= self.config.supervised_epochs();
        let with_unlabeled = unlabeled_phase && self.config.variant.uses_unlabeled();
        let batch = self.composer.compose(self.data.train, self.data.split, step, with_unlabeled)?;
        let out = step_objective(
            &self.model,
            &batch,
            &self.config.variant,
            &self.config.objective(),
            unlabeled_phase,
        )?;
        let b = out.breakdown;
        if !(b.l.is_finite() && b.l_l.is_finite() && b.l_u.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step: step + 1,
                total: b.l,
                labeled: b.l_l,
                unlabeled: b.l_u,
                lr,
            });
        }
        let grads = out.loss.backward()?;
        let grad_norm = self.optimizer.step(self.model.store().params(), &grads, lr)?;
        self.state.global_step += 1;

        let (coverage, pla) = match &out.pseudo {
            Some(plr) => {
                let truth: Vec<usize> = batch
                    .unlabeled_indices
                    .iter()
                    .map(|&i| self.data.split.hidden_label(i).unwrap_or_else(|| self.data.train.label(i)))
                    .collect();
                let kept = plr.retained();
                totals.retained += kept.len();
                totals.correct += kept.iter().filter(|&&j| plr.classes[j] == truth[j]).count();
                totals.coverage += plr.coverage;
                totals.unlabeled_steps += 1;
                (Some(plr.coverage), plr.accuracy(&truth))
            }
            None => (None, None),
        };
        totals.steps += 1;
        totals.l += b.l;
        totals.l_l += b.l_l;
        totals.l_u += b.l_u;
        totals.last_lr = lr;
        Ok(StepRecord {
            schema: metrics::METRICS_SCHEMA,
            step: self.state.global_step,
            epoch,
            lr,
            grad_norm,
            coverage,
            pseudo_label_accuracy: pla,
            losses: b,
        })
    }

    /// Runs one epoch, evaluates if due, writes metrics and checkpoints.
    pub fn run_epoch(&mut self) -> Result<MetricRecord> {
        let epoch = self.state.epoch;
        if self.is_finished() {
            return Err(Error::Contract(format!("run already finished {epoch} epochs")));
        }
        let mut totals = EpochTotals::default();
        for _ in 0..self.state.steps_per_epoch {
            let record = match self.step(epoch, &mut totals) {
                Ok(r) => r,
                Err(e) => {
                    self.write_abort(epoch, self.schedule.lr_at(self.state.global_step), &e);
                    return Err(e);
                }
            };
            if let Some(dir) = &self.out_dir {
                metrics::append_jsonl(&dir.join(metrics::STEPS_FILE), &record)?;
            }
        }
        let done = epoch + 1;
        let eval_due = done % self.config.eval_every == 0 || done == self.config.total_epochs;
        let eval = if eval_due {
            Some(self.evaluate()?)
        } else {
            None
        };
        if let Some(e) = &eval {
            if self.state.best_metric.is_none_or(|b| e.top1_combined > b) {
                self.state.best_metric = Some(e.top1_combined);
            }
        }
        self.state.epoch = done;
        self.state.optimizer_step = self.optimizer.step;
        let n = totals.steps as f64;
        let unlabeled = totals.unlabeled_steps > 0;
        let record = MetricRecord {
            schema: metrics::METRICS_SCHEMA,
            step: self.state.global_step,
            epoch,
            phase: if epoch >= self.config.supervised_epochs() {
                Phase::SemiSupervised
            } else {
                Phase::LabeledOnly
            },
            lr: totals.last_lr,
            l: totals.l / n,
            l_l: totals.l_l / n,
            l_u: unlabeled.then(|| totals.l_u / n),
            coverage: unlabeled.then(|| totals.coverage / totals.unlabeled_steps as f64),
            pseudo_label_accuracy: (totals.retained > 0).then(|| totals.correct as f64 / totals.retained as f64),
            top1_t: eval.and_then(|e| e.top1_t),
            top1_c: eval.and_then(|e| e.top1_c),
            top1_combined: eval.map(|e| e.top1_combined),
            wall_time: self.started.elapsed().as_secs_f64(),
        };
        if let Some(dir) = self.out_dir.clone() {
            metrics::append_jsonl(&dir.join(metrics::METRICS_FILE), &record)?;
            if eval_due {
                let ckpt = self.checkpoint()?;
                ckpt.save(&dir.join(LAST_CHECKPOINT))?;
                if self.config.keep_epoch_checkpoints {
                    ckpt.save(&dir.join(epoch_checkpoint_name(done)))?;
                }
            }
        }
        Ok(record)
    }

    pub fn evaluate(&self) -> Result<EvalResult> {
        evaluate(
            &self.model,
            self.data.eval,
            &self.eval_indices,
            self.data.normalization,
            &EvalOptions {
                batch_size: self.config.eval_batch_size,
                dtype: DType::F32,
                device: self.model.store().device().clone(),
                parallel: !self.config.deterministic,
            },
        )
    }

    /// Runs the remaining epochs, calling `on_epoch` after each.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&MetricRecord)) -> Result<Vec<MetricRecord>> {
        let mut records = Vec::new();
        while !self.is_finished() {
            let r = self.run_epoch()?;
            on_epoch(&r);
            records.push(r);
        }
        Ok(records)
    }
}

/// Builds a trainer and runs it to completion.
pub fn train(
    config: &TrainConfig,
    model_config: &ModelConfig,
    data: TrainData<'_>,
    out_dir: Option<&Path>,
) -> Result<(RunState, Vec<MetricRecord>)> {
    let mut trainer = Trainer::new(config, model_config, data, out_dir)?;
    let records = trainer.run(|_| {})?;
    Ok((trainer.state().clone(), records))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_phases_add_up() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!(c.supervised_epochs(), 30);
        assert_eq!(c.steps_per_epoch(5000), 313);
        let s = c.schedule(313);
        assert!((s.lr_at(5 * 313) - 1e-3).abs() < 1e-15);
        assert!((s.lr_at(100 * 313 - 1) - 1e-5).abs() < 1e-15);
        assert_eq!(lr_at(0, &c, 313), 0.0);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            TrainConfig { warmup_epochs: 50, labeled_only_epochs: 60, ..Default::default() },
            TrainConfig { lr_final: 1.0, ..Default::default() },
            TrainConfig { tau: 1.0, ..Default::default() },
            TrainConfig { lambda: -1.0, ..Default::default() },
            TrainConfig { n_l: 0, ..Default::default() },
            TrainConfig { total_epochs: 0, warmup_epochs: 0, labeled_only_epochs: 0, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn config_serializes_to_toml_and_back() {
        let c = TrainConfig::default();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<TrainConfig>(&text).unwrap(), c);
    }
}
