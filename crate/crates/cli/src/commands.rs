use std::path::{Path, PathBuf};

use serde::Serialize;

use semiformer::data::dataset::{data_root, load};
use semiformer::data::{make_split, DatasetId, DatasetSplit, ImageDataset, Normalization, SplitSpec};
use semiformer::objective::MethodVariant;
use semiformer::trainer::checkpoint::Checkpoint;
use semiformer::trainer::evaluate::{evaluate, EvalOptions, EvalResult};
use semiformer::trainer::metrics::{MetricRecord, METRICS_FILE};
use semiformer::trainer::{TrainData, Trainer, LAST_CHECKPOINT};

use crate::args::{DataArgs, EvalArgs, SplitArgs, TrainArgs};
use crate::config::{ExperimentConfig, CONFIG_FILE, SPLIT_FILE};
use crate::error::{CliError, CliResult};
use crate::lock::RunLock;

pub const EVAL_FILE: &str = "eval.json";

pub fn apply_data_args(cfg: &mut ExperimentConfig, args: &DataArgs) {
    let d = &mut cfg.data;
    if let Some(v) = args.dataset {
        d.dataset = v;
    }
    if let Some(v) = &args.data_dir {
        d.data_dir = Some(v.clone());
    }
    if let Some(v) = args.fraction {
        d.label_fraction = v;
    }
    if let Some(v) = args.split_seed {
        d.split_seed = v;
    }
    if let Some(v) = args.per_class_limit {
        d.per_class_limit = Some(v);
    }
}

pub fn apply_train_args(cfg: &mut ExperimentConfig, args: &TrainArgs) {
    apply_data_args(cfg, &args.data);
    let t = &mut cfg.train;
    match (args.variant, args.pseudo_source) {
        (Some(name), Some(source)) => t.variant = MethodVariant::with_source(name, source),
        (Some(name), None) => t.variant = MethodVariant::new(name),
        (None, Some(source)) => t.variant.pseudo_source = source,
        (None, None) => {}
    }
    if let Some(v) = args.tau {
        t.tau = v;
    }
    if let Some(v) = args.lambda {
        t.lambda = v;
    }
    if let Some(v) = args.seed {
        t.seed = v;
    }
    if let Some(v) = args.epochs {
        t.total_epochs = v;
    }
    if let Some(v) = args.warmup_epochs {
        t.warmup_epochs = v;
    }
    if let Some(v) = args.labeled_only_epochs {
        t.labeled_only_epochs = v;
    }
    if let Some(v) = args.steps_per_epoch {
        t.steps_per_epoch = Some(v);
    }
    if let Some(v) = args.eval_limit {
        t.eval_limit = Some(v);
    }
    if let Some(p) = args.preset {
        cfg.model = p.model();
    }
    if let Some(v) = &args.split {
        cfg.data.split_file = Some(v.clone());
    }
    if let Some(v) = &args.out {
        cfg.output.dir = v.clone();
    }
}

/// Datasets, split and normalization for one experiment.
pub struct Prepared {
    pub train: ImageDataset,
    pub test: ImageDataset,
    pub split: DatasetSplit,
    pub normalization: Normalization,
}

impl Prepared {
    pub fn data(&self) -> TrainData<'_> {
        TrainData {
            train: &self.train,
            eval: &self.test,
            split: &self.split,
            normalization: &self.normalization,
        }
    }
}

pub fn load_datasets(cfg: &ExperimentConfig) -> CliResult<(ImageDataset, ImageDataset)> {
    let root = data_root(cfg.data.data_dir.as_deref());
    let pair = load(cfg.data.dataset, &root, &cfg.data.synthetic)?;
    let train = match cfg.data.per_class_limit {
        Some(k) => pair.train.limit_per_class(k),
        None => pair.train,
    };
    Ok((train, pair.test))
}

pub fn draw_split(cfg: &ExperimentConfig, train: &ImageDataset) -> CliResult<DatasetSplit> {
    let spec = SplitSpec {
        stratified: cfg.data.stratified,
        ..SplitSpec::new(cfg.data.dataset, cfg.data.label_fraction, cfg.data.split_seed)
    };
    Ok(make_split(&spec, train.labels(), train.num_classes())?)
}

fn warn_if_fully_labeled(split: &DatasetSplit) {
    if split.unlabeled_indices().is_empty() {
        eprintln!("warning: no unlabeled data; only sup_only is meaningful");
    }
}

/// Loads data and resolves the split: `split_path` if given, else the
/// config's split file, else a fresh draw.
pub fn prepare(cfg: &mut ExperimentConfig, split_path: Option<&Path>) -> CliResult<Prepared> {
    let (train, test) = load_datasets(cfg)?;
    let split = match split_path.or(cfg.data.split_file.as_deref()) {
        Some(path) => {
            let split = DatasetSplit::load(path, train.labels())?;
            let spec = split.spec();
            if spec.dataset_id != cfg.data.dataset {
                return Err(CliError::Usage(format!(
                    "split {} is for {}, config uses {}",
                    path.display(),
                    spec.dataset_id,
                    cfg.data.dataset
                )));
            }
            cfg.data.label_fraction = spec.label_fraction;
            cfg.data.split_seed = spec.seed;
            cfg.data.stratified = spec.stratified;
            split
        }
        None => draw_split(cfg, &train)?,
    };
    let normalization = match &cfg.data.normalization {
        Some(n) => n.clone(),
        None if cfg.data.dataset == DatasetId::Cifar10 => Normalization::cifar10(),
        None => Normalization::from_dataset(&train),
    };
    Ok(Prepared {
        train,
        test,
        split,
        normalization,
    })
}

pub fn split(args: &SplitArgs) -> CliResult<DatasetSplit> {
    let mut cfg = ExperimentConfig::load_or_default(args.data.config.as_deref())?;
    apply_data_args(&mut cfg, &args.data);
    if let Some(seed) = args.seed {
        cfg.data.split_seed = seed;
    }
    cfg.validate()?;
    let (train, _) = load_datasets(&cfg)?;
    let split = draw_split(&cfg, &train)?;
    warn_if_fully_labeled(&split);
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    split.save(&args.out)?;
    eprintln!(
        "wrote {}: {} labeled, {} unlabeled",
        args.out.display(),
        split.labeled_indices().len(),
        split.unlabeled_indices().len()
    );
    Ok(split)
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.digits$}"))
}

pub fn progress_line(r: &MetricRecord, total_epochs: usize) -> String {
    let mut line = format!(
        "epoch {}/{} step {} lr {:.3e} L {:.4} L_l {:.4}",
        r.epoch + 1,
        total_epochs,
        r.step,
        r.lr,
        r.l,
        r.l_l
    );
    if r.l_u.is_some() {
        line += &format!(
            " L_u {} coverage {} pl_acc {}",
            fmt_opt(r.l_u, 4),
            fmt_opt(r.coverage, 3),
            fmt_opt(r.pseudo_label_accuracy, 3)
        );
    }
    if r.top1_combined.is_some() {
        line += &format!(
            " top1 {} (T {} C {})",
            fmt_opt(r.top1_combined, 2),
            fmt_opt(r.top1_t, 2),
            fmt_opt(r.top1_c, 2)
        );
    }
    line + &format!(" [{:.1}s]", r.wall_time)
}

/// Resolved configuration for `train`. On resume the run directory's saved
/// config is the base instead of `--config`.
pub fn resolve_train_config(args: &TrainArgs) -> CliResult<ExperimentConfig> {
    let mut cfg = if args.resume {
        let out = args
            .out
            .as_ref()
            .ok_or_else(|| CliError::Usage("--resume needs --out <run dir>".into()))?;
        ExperimentConfig::load(&out.join(CONFIG_FILE))?
    } else {
        ExperimentConfig::load_or_default(args.data.config.as_deref())?
    };
    apply_train_args(&mut cfg, args);
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(args: &TrainArgs) -> CliResult<Vec<MetricRecord>> {
    let mut cfg = resolve_train_config(args)?;
    let out = cfg.output.dir.clone();
    let split_path = out.join(SPLIT_FILE);
    let ckpt_path = out.join(LAST_CHECKPOINT);
    if args.resume {
        if !ckpt_path.exists() {
            return Err(CliError::Usage(format!("nothing to resume: {} is missing", ckpt_path.display())));
        }
    } else if ckpt_path.exists() || out.join(METRICS_FILE).exists() {
        return Err(CliError::Usage(format!(
            "{} already holds a run; pass --resume or choose another --out",
            out.display()
        )));
    }
    let prepared = prepare(&mut cfg, args.resume.then_some(split_path.as_path()))?;
    warn_if_fully_labeled(&prepared.split);
    std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    let _lock = RunLock::acquire(&out)?;
    if !args.resume {
        cfg.save(&out.join(CONFIG_FILE))?;
        prepared.split.save(&split_path)?;
    }
    let mut trainer = Trainer::new(&cfg.train, &cfg.model, prepared.data(), Some(&out))?;
    if args.resume {
        trainer.resume(&ckpt_path)?;
        eprintln!("resumed at epoch {} (step {})", trainer.state().epoch, trainer.state().global_step);
    }
    eprintln!(
        "training {} on {} ({} labeled, {} unlabeled), {} steps/epoch, writing to {}",
        cfg.train.variant.name,
        cfg.data.dataset,
        prepared.split.labeled_indices().len(),
        prepared.split.unlabeled_indices().len(),
        trainer.steps_per_epoch(),
        out.display()
    );
    let total = cfg.train.total_epochs;
    Ok(trainer.run(|r| eprintln!("{}", progress_line(r, total)))?)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub checkpoint: PathBuf,
    pub epoch: usize,
    pub step: u64,
    #[serde(flatten)]
    pub result: EvalResult,
}

pub fn eval(args: &EvalArgs) -> CliResult<EvalReport> {
    let mut cfg = ExperimentConfig::load(&args.run.join(CONFIG_FILE))?;
    let prepared = prepare(&mut cfg, Some(&args.run.join(SPLIT_FILE)))?;
    let ckpt_path = args.checkpoint.clone().unwrap_or_else(|| args.run.join(LAST_CHECKPOINT));
    let mut trainer = Trainer::new(&cfg.train, &cfg.model, prepared.data(), None)?;
    trainer.restore(&Checkpoint::load(&ckpt_path)?)?;
    let n = args
        .limit
        .or(cfg.train.eval_limit)
        .unwrap_or(prepared.test.len())
        .min(prepared.test.len());
    let indices: Vec<usize> = (0..n).collect();
    let result = evaluate(
        trainer.model(),
        &prepared.test,
        &indices,
        &prepared.normalization,
        &EvalOptions {
            batch_size: cfg.train.eval_batch_size,
            ..Default::default()
        },
    )?;
    let report = EvalReport {
        checkpoint: ckpt_path,
        epoch: trainer.state().epoch,
        step: trainer.state().global_step,
        result,
    };
    let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(e.to_string()))? + "\n";
    let path = args.run.join(EVAL_FILE);
    std::fs::write(&path, &text).map_err(|e| CliError::io(&path, e))?;
    print!("{text}");
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use semiformer::objective::{PseudoSource, VariantName};

    #[test]
    fn flags_override_file_values() {
        let mut cfg = ExperimentConfig::from_toml("[train]\ntau = 0.9\nlambda = 2.0\n").unwrap();
        let args = TrainArgs {
            tau: Some(0.8),
            variant: Some(VariantName::VanillaVit),
            ..Default::default()
        };
        apply_train_args(&mut cfg, &args);
        assert_eq!(cfg.train.tau, 0.8);
        assert_eq!(cfg.train.lambda, 2.0);
        assert_eq!(cfg.train.variant, MethodVariant::new(VariantName::VanillaVit));
        assert_eq!(cfg.train.variant.pseudo_source, PseudoSource::Transformer);
    }

    #[test]
    fn pseudo_source_alone_keeps_variant() {
        let mut cfg = ExperimentConfig::default();
        apply_train_args(
            &mut cfg,
            &TrainArgs {
                pseudo_source: Some(PseudoSource::FusedAverage),
                ..Default::default()
            },
        );
        assert_eq!(cfg.train.variant.name, VariantName::Semiformer);
        assert_eq!(cfg.train.variant.pseudo_source, PseudoSource::FusedAverage);
    }
}
