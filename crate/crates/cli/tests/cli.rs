use std::path::Path;
use std::process::{Command, Output};

use semiformer::trainer::metrics::MetricRecord;
use semiformer_cli::config::ExperimentConfig;

const TINY: &str = r#"
[data]
dataset = "synthetic"
label_fraction = 0.25

[data.synthetic]
classes = 3
train_per_class = 16
test_per_class = 8
image_size = 16

[train]
total_epochs = 2
warmup_epochs = 1
labeled_only_epochs = 0
n_l = 4
mu = 2
steps_per_epoch = 2
eval_batch_size = 32

[model.transformer]
embed_dim = 24
depth = 3

[model.conv]
stem_channels = 8
stage_channels = [8, 16, 16]
stage_depths = [1, 1, 1]
"#;

fn semiformer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semiformer"))
        .args(args)
        .env("SEMIFORMER_DATA", std::env::temp_dir().join("semiformer-no-data"))
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, TINY).unwrap();
    path.to_str().unwrap().to_string()
}

fn train(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let cfg = write_config(dir);
    let out = dir.join(out);
    let mut args = vec!["train", "--config", &cfg, "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    semiformer(&args)
}

fn metrics(run: &Path) -> Vec<MetricRecord> {
    semiformer::trainer::metrics::read_jsonl(&run.join("metrics.jsonl")).unwrap()
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(semiformer(&["--help"]).status.code(), Some(0));
    assert_eq!(semiformer(&["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(semiformer(&["train", "--variant", "fixmatch"]).status.code(), Some(1));
    assert_eq!(semiformer(&[]).status.code(), Some(1));
}

#[test]
fn split_is_byte_identical_and_validates_fraction() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    for p in [&a, &b] {
        let o = semiformer(&["split", "--config", &cfg, "--fraction", "0.5", "--seed", "1", "--out", p.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let text = std::fs::read(&a).unwrap();
    assert_eq!(text, std::fs::read(&b).unwrap());
    let file: serde_json::Value = serde_json::from_slice(&text).unwrap();
    assert_eq!(file["labeled_indices"].as_array().unwrap().len(), 24);
    assert_eq!(file["unlabeled_indices"].as_array().unwrap().len(), 24);
    assert_eq!(file["spec"]["seed"], 1);

    let c = dir.path().join("c.json");
    let o = semiformer(&["split", "--config", &cfg, "--seed", "2", "--out", c.to_str().unwrap()]);
    assert_ne!(std::fs::read(&c).unwrap(), text, "{}", stderr(&o));

    for bad in ["0", "1.5", "-0.1"] {
        let o = semiformer(&["split", "--config", &cfg, "--fraction", bad, "--out", c.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(1), "fraction {bad}: {}", stderr(&o));
    }
    let o = semiformer(&["split", "--config", &cfg, "--fraction", "1.0", "--out", c.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("no unlabeled data; only sup_only is meaningful"));
}

#[test]
fn train_writes_resolved_config_and_metrics_then_eval_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(dir.path(), "semi", &["--variant", "semiformer", "--tau", "0.6", "--lambda", "2", "--eval-limit", "12"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let run = dir.path().join("semi");
    assert!(stderr(&o).contains("epoch 2/2"), "{}", stderr(&o));

    let cfg = ExperimentConfig::load(&run.join("config.toml")).unwrap();
    assert_eq!(cfg.train.tau, 0.6);
    assert_eq!(cfg.train.lambda, 2.0);
    assert_eq!(cfg.train.eval_limit, Some(12));
    assert_eq!(cfg.output.dir, run);
    assert!(run.join("split.json").exists());
    assert!(run.join("last.ckpt").exists());
    assert!(!run.join(".lock").exists());
    let records = metrics(&run);
    assert_eq!(records.len(), 2);
    assert!(records.iter().all(|r| r.top1_combined.is_some()));
    // Warmup is labeled-only; the unlabeled term starts in epoch 2.
    assert!(records[0].l_u.is_none() && records[1].l_u.is_some());

    // A second fresh run into the same directory is refused.
    let again = train(dir.path(), "semi", &[]);
    assert_eq!(again.status.code(), Some(1));

    // Resuming a finished run trains nothing and leaves the stream intact.
    let o = semiformer(&["train", "--resume", "--out", run.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(metrics(&run), records);

    let o = semiformer(&["eval", "--run", run.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let eval: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(eval["count"], 12);
    assert_eq!(eval["epoch"], 2);
    // Same weights and images as the last in-training evaluation.
    assert_eq!(eval["top1_combined"].as_f64(), records[1].top1_combined);

    let sup = train(dir.path(), "sup", &["--variant", "sup", "--eval-limit", "12"]);
    assert_eq!(sup.status.code(), Some(0), "{}", stderr(&sup));
    let sup_records = metrics(&dir.path().join("sup"));
    assert!(sup_records.iter().all(|r| r.l_u.is_none() && r.coverage.is_none()));

    let broken = dir.path().join("broken");
    std::fs::create_dir_all(&broken).unwrap();
    std::fs::write(broken.join("metrics.jsonl"), "{not json\n").unwrap();
    let report = dir.path().join("report");
    let o = semiformer(&[
        "report",
        run.to_str().unwrap(),
        dir.path().join("sup").to_str().unwrap(),
        broken.to_str().unwrap(),
        dir.path().join("missing").to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stderr(&o).contains("warning"));
    for f in ["report.md", "final.csv", "curves.csv", "curve_top1.svg", "curve_coverage.svg", "final_top1.svg"] {
        assert!(report.join(f).exists(), "missing {f}");
    }
    let md = std::fs::read_to_string(report.join("report.md")).unwrap();
    assert!(md.contains("## Ordering") && md.contains("## Difference from sup_only") && md.contains("## Label ratio"));
    assert!(md.contains("broken"));

    // Every reported value appears verbatim in the metrics line it cites.
    let mut rows = csv::Reader::from_path(report.join("final.csv")).unwrap();
    let headers = rows.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let mut n = 0;
    for row in rows.records() {
        let row = row.unwrap();
        let (path, step) = row[col("source")].rsplit_once('#').unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        let line = text
            .lines()
            .find(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["step"].to_string() == step)
            .unwrap();
        for field in ["top1_T", "top1_C", "top1_combined"] {
            let v = &row[col(field)];
            if !v.is_empty() {
                assert!(line.contains(&format!("\"{field}\":{v}")), "{field}={v} not in {line}");
            }
        }
        n += 1;
    }
    assert_eq!(n, 2);

    let single = dir.path().join("single");
    let o = semiformer(&["report", run.to_str().unwrap(), "--out", single.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(single.join("curve_top1.svg").exists());
    assert!(!single.join("final_top1.svg").exists());
}

#[test]
fn locked_run_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("locked");
    std::fs::create_dir_all(&run).unwrap();
    std::fs::write(run.join(".lock"), "1\n").unwrap();
    let o = train(dir.path(), "locked", &[]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("locked"));
    assert!(!run.join("metrics.jsonl").exists());
}

#[test]
fn non_finite_training_exits_with_runtime_code_and_keeps_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("{TINY}\n[data.normalization]\nmean = [0.0, 0.0, 0.0]\nstd = [0.0, 0.0, 0.0]\n");
    let path = dir.path().join("nan.toml");
    std::fs::write(&path, cfg).unwrap();
    let run = dir.path().join("nan");
    let o = semiformer(&["train", "--config", path.to_str().unwrap(), "--out", run.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(run.join("config.toml").exists());
    assert!(run.join("abort.json").exists());
    assert!(!run.join(".lock").exists());
}
