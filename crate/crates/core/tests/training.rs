use std::path::Path;
use std::sync::Mutex;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semiformer::data::dataset::synthetic;
use semiformer::data::{make_split, DatasetId, DatasetPair, DatasetSplit, Normalization, SplitSpec, SyntheticSpec};
use semiformer::models::{ModelConfig, StreamLogits};
use semiformer::objective::{MethodVariant, VariantName};
use semiformer::trainer::checkpoint::Checkpoint;
use semiformer::trainer::evaluate::{evaluate, EvalOptions, Predictor};
use semiformer::trainer::metrics::{read_jsonl, MetricRecord, Phase, StepRecord, ABORT_FILE, METRICS_FILE, STEPS_FILE};
use semiformer::trainer::{epoch_checkpoint_name, TrainConfig, TrainData, Trainer};
use semiformer::Error;

struct Fixture {
    pair: DatasetPair,
    split: DatasetSplit,
    norm: Normalization,
}

impl Fixture {
    fn new() -> Self {
        let pair = synthetic(&SyntheticSpec {
            classes: 3,
            train_per_class: 16,
            test_per_class: 8,
            image_size: 16,
            ..Default::default()
        })
        .unwrap();
        let split = make_split(&SplitSpec::new(DatasetId::Synthetic, 0.25, 0), pair.train.labels(), 3).unwrap();
        let norm = Normalization::from_dataset(&pair.train);
        Self { pair, split, norm }
    }

    fn data(&self) -> TrainData<'_> {
        TrainData {
            train: &self.pair.train,
            eval: &self.pair.test,
            split: &self.split,
            normalization: &self.norm,
        }
    }
}

fn tiny_model() -> ModelConfig {
    let mut c = ModelConfig::small();
    c.transformer.embed_dim = 24;
    c.transformer.depth = 3;
    c.conv.stem_channels = 8;
    c.conv.stage_channels = vec![8, 16, 16];
    c
}

fn tiny_train(total: usize, warmup: usize, labeled_only: usize) -> TrainConfig {
    TrainConfig {
        total_epochs: total,
        warmup_epochs: warmup,
        labeled_only_epochs: labeled_only,
        n_l: 4,
        mu: 2,
        steps_per_epoch: Some(2),
        eval_limit: Some(12),
        ..Default::default()
    }
}

fn read_lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path).unwrap().lines().map(str::to_string).collect()
}

fn assert_streams_match(a: &[MetricRecord], b: &[MetricRecord]) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        let d = x.max_difference(y).expect("records line up");
        assert!(d <= 1e-6, "epoch {} differs by {d}", x.epoch);
    }
}

#[test]
fn resume_from_epoch_checkpoint_reproduces_the_uninterrupted_suffix() {
    let fx = Fixture::new();
    let dir = tempfile::tempdir().unwrap();
    let full = dir.path().join("full");
    let cfg = TrainConfig {
        keep_epoch_checkpoints: true,
        ..tiny_train(3, 1, 0)
    };
    let mut trainer = Trainer::new(&cfg, &tiny_model(), fx.data(), Some(&full)).unwrap();
    let uninterrupted = trainer.run(|_| {}).unwrap();

    // Continue a copy of the run directory from the epoch-1 checkpoint.
    let resumed_dir = dir.path().join("resumed");
    std::fs::create_dir_all(&resumed_dir).unwrap();
    for f in [METRICS_FILE, STEPS_FILE] {
        std::fs::copy(full.join(f), resumed_dir.join(f)).unwrap();
    }
    let mut resumed = Trainer::new(&cfg, &tiny_model(), fx.data(), Some(&resumed_dir)).unwrap();
    resumed.resume(&full.join(epoch_checkpoint_name(1))).unwrap();
    assert_eq!(resumed.state().epoch, 1);
    assert_eq!(resumed.state().global_step, 2);
    let suffix = resumed.run(|_| {}).unwrap();

    assert_streams_match(&suffix, &uninterrupted[1..]);
    let on_disk: Vec<MetricRecord> = read_jsonl(&resumed_dir.join(METRICS_FILE)).unwrap();
    assert_streams_match(&on_disk, &uninterrupted);
    assert_eq!(read_lines(&resumed_dir.join(STEPS_FILE)), read_lines(&full.join(STEPS_FILE)));
}

#[test]
fn checkpoint_round_trip_through_the_trainer_is_bit_identical() {
    let fx = Fixture::new();
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_train(2, 1, 0);
    let mut a = Trainer::new(&cfg, &tiny_model(), fx.data(), None).unwrap();
    a.run_epoch().unwrap();
    let path = dir.path().join("a.ckpt");
    a.checkpoint().unwrap().save(&path).unwrap();
    let first = std::fs::read(&path).unwrap();

    let mut b = Trainer::new(&cfg, &tiny_model(), fx.data(), None).unwrap();
    b.resume(&path).unwrap();
    let again = dir.path().join("b.ckpt");
    b.checkpoint().unwrap().save(&again).unwrap();
    assert_eq!(first, std::fs::read(&again).unwrap());

    // Restoring into a differently configured run is refused.
    let other = TrainConfig { tau: 0.8, ..cfg };
    let mut c = Trainer::new(&other, &tiny_model(), fx.data(), None).unwrap();
    let ckpt = Checkpoint::load(&path).unwrap();
    assert!(matches!(c.restore(&ckpt), Err(Error::Checkpoint(_))));
}

#[test]
fn no_unlabeled_term_before_the_semi_supervised_phase() {
    let fx = Fixture::new();
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_train(3, 1, 1);
    let mut t = Trainer::new(&cfg, &tiny_model(), fx.data(), Some(dir.path())).unwrap();
    let records = t.run(|_| {}).unwrap();
    for r in &records[..2] {
        assert_eq!(r.phase, Phase::LabeledOnly);
        assert_eq!(r.l_u, None);
        assert_eq!(r.coverage, None);
        assert_eq!(r.l, r.l_l);
    }
    assert_eq!(records[2].phase, Phase::SemiSupervised);
    assert!(records[2].l_u.is_some() && records[2].coverage.is_some());

    let steps: Vec<StepRecord> = read_jsonl(&dir.path().join(STEPS_FILE)).unwrap();
    assert_eq!(steps.len(), 6);
    for s in &steps[..4] {
        assert_eq!(s.losses.l_u, 0.0);
        assert_eq!(s.coverage, None);
    }
    assert!(steps[4..].iter().all(|s| s.coverage.is_some()));
}

#[test]
fn purely_supervised_schedule_matches_sup_only() {
    let fx = Fixture::new();
    let semi = TrainConfig {
        variant: MethodVariant::new(VariantName::Semiformer),
        ..tiny_train(2, 1, 1)
    };
    let sup = TrainConfig {
        variant: MethodVariant::new(VariantName::SupOnly),
        ..semi.clone()
    };
    let a = Trainer::new(&semi, &tiny_model(), fx.data(), None).unwrap().run(|_| {}).unwrap();
    let b = Trainer::new(&sup, &tiny_model(), fx.data(), None).unwrap().run(|_| {}).unwrap();
    assert_streams_match(&a, &b);
}

#[test]
fn non_finite_training_aborts_and_records_why() {
    let mut fx = Fixture::new();
    fx.norm = Normalization {
        mean: vec![0.0; 3],
        std: vec![0.0; 3],
    };
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(&tiny_train(2, 1, 0), &tiny_model(), fx.data(), Some(dir.path())).unwrap();
    let err = t.run(|_| {}).unwrap_err();
    assert!(
        matches!(err, Error::NonFinite { .. } | Error::NonFiniteLoss { .. }),
        "{err}"
    );
    let abort: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(ABORT_FILE)).unwrap()).unwrap();
    assert_eq!(abort["step"], 1);
    assert!(abort["error"].as_str().unwrap().contains("non-finite"));
    assert_eq!(t.state().global_step, 0);
}

struct RandomLogits {
    rng: Mutex<ChaCha8Rng>,
    classes: usize,
}

impl Predictor for RandomLogits {
    fn predict(&self, images: &Tensor) -> semiformer::Result<StreamLogits> {
        let n = images.dim(0)?;
        let mut rng = self.rng.lock().unwrap();
        let mut draw = || {
            let v: Vec<f32> = (0..n * self.classes).map(|_| rng.random_range(-3.0..3.0)).collect();
            Tensor::from_vec(v, (n, self.classes), &Device::Cpu)
        };
        Ok(StreamLogits {
            transformer: Some(draw()?),
            conv: Some(draw()?),
        })
    }
}

#[test]
fn random_predictions_score_chance_accuracy() {
    let pair = synthetic(&SyntheticSpec {
        classes: 10,
        train_per_class: 1,
        test_per_class: 500,
        image_size: 4,
        ..Default::default()
    })
    .unwrap();
    let stub = RandomLogits {
        rng: Mutex::new(ChaCha8Rng::seed_from_u64(5)),
        classes: 10,
    };
    let indices: Vec<usize> = (0..pair.test.len()).collect();
    let r = evaluate(
        &stub,
        &pair.test,
        &indices,
        &Normalization::identity(3),
        &EvalOptions {
            dtype: DType::F32,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(r.count, 5000);
    for acc in [r.top1_t.unwrap(), r.top1_c.unwrap(), r.top1_combined] {
        assert!((acc - 10.0).abs() <= 2.0, "accuracy {acc}");
    }
}
