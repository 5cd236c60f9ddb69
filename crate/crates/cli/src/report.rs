//! Cross-run summaries: markdown tables, CSV exports and SVG plots.
//!
//! Per-run values are printed with the same float formatting as the metric
//! stream, so every number in `final.csv` can be found verbatim in the
//! `metrics.jsonl` line named by its `source` column.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use semiformer::objective::{MethodVariant, VariantName};
use semiformer::trainer::metrics::{MetricRecord, METRICS_FILE};

use crate::config::{ExperimentConfig, CONFIG_FILE};
use crate::error::{CliError, CliResult};

pub const REPORT_FILE: &str = "report.md";
pub const FINAL_CSV: &str = "final.csv";
pub const CURVES_CSV: &str = "curves.csv";
pub const FINAL_PLOT: &str = "final_top1.svg";

/// One run directory as read back from disk.
#[derive(Debug, Clone)]
pub struct RunData {
    pub dir: PathBuf,
    pub name: String,
    pub variant: Option<MethodVariant>,
    pub label_fraction: Option<f64>,
    pub seed: Option<u64>,
    pub records: Vec<MetricRecord>,
}

impl RunData {
    /// Last record that carries an evaluation.
    pub fn final_record(&self) -> Option<&MetricRecord> {
        self.records.iter().rev().find(|r| r.top1_combined.is_some())
    }

    pub fn variant_label(&self) -> String {
        match self.variant {
            None => "?".into(),
            Some(v) if v == MethodVariant::new(v.name) => v.name.to_string(),
            Some(v) => format!("{} ({})", v.name, v.pseudo_source),
        }
    }

    fn metrics_path(&self) -> PathBuf {
        self.dir.join(METRICS_FILE)
    }
}

/// Number formatting shared with the metric stream.
pub fn num(v: f64) -> String {
    serde_json::to_string(&v).unwrap_or_else(|_| "null".into())
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

/// Reads a run directory. Unreadable pieces become warnings; `None` means
/// nothing usable was found.
pub fn read_run(dir: &Path, warnings: &mut Vec<String>) -> Option<RunData> {
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    let cfg = match ExperimentConfig::load(&dir.join(CONFIG_FILE)) {
        Ok(c) => Some(c),
        Err(e) => {
            warnings.push(format!("{}: config unavailable ({e})", dir.display()));
            None
        }
    };
    let path = dir.join(METRICS_FILE);
    let text = match std::fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) => {
            warnings.push(format!("{}: skipped, cannot read metrics ({e})", path.display()));
            return None;
        }
    };
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<MetricRecord>(line) {
            Ok(r) => records.push(r),
            Err(e) => warnings.push(format!("{}:{}: skipped malformed record ({e})", path.display(), i + 1)),
        }
    }
    if records.is_empty() {
        warnings.push(format!("{}: skipped, no metric records", path.display()));
        return None;
    }
    Some(RunData {
        dir: dir.to_path_buf(),
        name,
        variant: cfg.as_ref().map(|c| c.train.variant),
        label_fraction: cfg.as_ref().map(|c| c.data.label_fraction),
        seed: cfg.as_ref().map(|c| c.train.seed),
        records,
    })
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    CliError::Runtime(format!("writing {}: {e}", path.display()))
}

pub fn write_final_csv(runs: &[RunData], path: &Path) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record([
        "run",
        "variant",
        "pseudo_source",
        "label_fraction",
        "seed",
        "epoch",
        "step",
        "top1_T",
        "top1_C",
        "top1_combined",
        "source",
    ])
    .map_err(|e| csv_error(path, e))?;
    for run in runs {
        let Some(r) = run.final_record() else { continue };
        w.write_record([
            run.name.clone(),
            run.variant.map(|v| v.name.to_string()).unwrap_or_default(),
            run.variant.map(|v| v.pseudo_source.to_string()).unwrap_or_default(),
            opt(run.label_fraction),
            run.seed.map(|s| s.to_string()).unwrap_or_default(),
            r.epoch.to_string(),
            r.step.to_string(),
            opt(r.top1_t),
            opt(r.top1_c),
            opt(r.top1_combined),
            format!("{}#{}", run.metrics_path().display(), r.step),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn write_curves_csv(runs: &[RunData], path: &Path) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record([
        "run",
        "epoch",
        "step",
        "phase",
        "lr",
        "L",
        "L_l",
        "L_u",
        "coverage",
        "pseudo_label_accuracy",
        "top1_T",
        "top1_C",
        "top1_combined",
    ])
    .map_err(|e| csv_error(path, e))?;
    for run in runs {
        for r in &run.records {
            let phase = serde_json::to_value(r.phase)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default();
            w.write_record([
                run.name.clone(),
                r.epoch.to_string(),
                r.step.to_string(),
                phase,
                num(r.lr),
                num(r.l),
                num(r.l_l),
                opt(r.l_u),
                opt(r.coverage),
                opt(r.pseudo_label_accuracy),
                opt(r.top1_t),
                opt(r.top1_c),
                opt(r.top1_combined),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.len() > 1).then(|| (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, std)
}

fn fmt_mean_std(xs: &[f64]) -> String {
    match mean_std(xs) {
        (m, Some(s)) => format!("{m:.2} ± {s:.2} (n={})", xs.len()),
        (m, None) => format!("{m:.2} (n=1)"),
    }
}

#[derive(Debug, Clone, Copy)]
struct Final {
    t: Option<f64>,
    c: Option<f64>,
    combined: f64,
}

/// Final accuracies grouped by variant label and label fraction.
fn group_finals(runs: &[RunData]) -> BTreeMap<(String, String), Vec<Final>> {
    let mut groups: BTreeMap<(String, String), Vec<Final>> = BTreeMap::new();
    for run in runs {
        if let Some(r) = run.final_record() {
            if let Some(combined) = r.top1_combined {
                groups
                    .entry((run.variant_label(), opt(run.label_fraction)))
                    .or_default()
                    .push(Final { t: r.top1_t, c: r.top1_c, combined });
            }
        }
    }
    groups
}

fn combined(xs: &[Final]) -> Vec<f64> {
    xs.iter().map(|f| f.combined).collect()
}

fn mean_of(xs: &[Final], get: fn(&Final) -> Option<f64>) -> String {
    let v: Vec<f64> = xs.iter().filter_map(get).collect();
    if v.len() == xs.len() && !v.is_empty() {
        format!("{:.2}", mean_std(&v).0)
    } else {
        "-".into()
    }
}

pub fn render_markdown(runs: &[RunData], warnings: &[String], plots: &[String]) -> String {
    let mut md = String::from("# Results\n\n");
    md += "Accuracies are top-1 percentages on the evaluation set at each run's last evaluated epoch.\n\n";
    md += "## Runs\n\n| run | variant | fraction | seed | epoch | top1_T | top1_C | top1_combined | source |\n";
    md += "|---|---|---|---|---|---|---|---|---|\n";
    for run in runs {
        let cell = |v: Option<f64>| v.map(num).unwrap_or_else(|| "-".into());
        match run.final_record() {
            Some(r) => {
                let _ = writeln!(
                    md,
                    "| {} | {} | {} | {} | {} | {} | {} | {} | `{}#{}` |",
                    run.name,
                    run.variant_label(),
                    cell(run.label_fraction),
                    run.seed.map_or("-".into(), |s| s.to_string()),
                    r.epoch,
                    cell(r.top1_t),
                    cell(r.top1_c),
                    cell(r.top1_combined),
                    run.metrics_path().display(),
                    r.step
                );
            }
            None => {
                let _ = writeln!(md, "| {} | {} | - | - | - | - | - | - | no evaluation yet |", run.name, run.variant_label());
            }
        }
    }

    let groups = group_finals(runs);
    if !groups.is_empty() {
        let mut fractions: Vec<(f64, String)> = groups
            .keys()
            .map(|(_, f)| (f.parse::<f64>().unwrap_or(f64::NAN), f.clone()))
            .collect();
        fractions.sort_by(|a, b| a.0.total_cmp(&b.0));
        fractions.dedup_by(|a, b| a.1 == b.1);

        md += "\n## Ordering\n\nMeans over seeds, best first within each label fraction. ";
        md += "Δ next is the gap in mean top1_combined to the following row.\n\n";
        md += "| fraction | variant | top1_T | top1_C | top1_combined | Δ next |\n|---|---|---|---|---|---|\n";
        for (_, f) in &fractions {
            let mut rows: Vec<(&String, &Vec<Final>, f64)> = groups
                .iter()
                .filter(|((_, gf), _)| gf == f)
                .map(|((v, _), xs)| (v, xs, mean_std(&combined(xs)).0))
                .collect();
            rows.sort_by(|a, b| b.2.total_cmp(&a.2));
            for (i, (v, xs, m)) in rows.iter().enumerate() {
                let delta = rows.get(i + 1).map_or("-".into(), |next| format!("{:+.2}", m - next.2));
                let _ = writeln!(
                    md,
                    "| {f} | {v} | {} | {} | {} | {delta} |",
                    mean_of(xs, |x| x.t),
                    mean_of(xs, |x| x.c),
                    fmt_mean_std(&combined(xs))
                );
            }
        }

        let baseline = VariantName::SupOnly.to_string();
        let deltas: Vec<String> = groups
            .iter()
            .filter(|((v, _), _)| *v != baseline)
            .filter_map(|((v, f), xs)| {
                let base = groups.get(&(baseline.clone(), f.clone()))?;
                let delta = mean_std(&combined(xs)).0 - mean_std(&combined(base)).0;
                Some(format!("| {v} | {f} | {delta:+.2} |"))
            })
            .collect();
        md += "\n## Difference from sup_only\n\n";
        if deltas.is_empty() {
            md += "No sup_only run shares a label fraction with another variant.\n";
        } else {
            md += "Mean top1_combined minus the sup_only mean at the same label fraction.\n\n";
            md += "| variant | fraction | Δ top1_combined |\n|---|---|---|\n";
            for d in deltas {
                md += &d;
                md.push('\n');
            }
        }

        let variants: Vec<&String> = {
            let mut v: Vec<&String> = groups.keys().map(|(v, _)| v).collect();
            v.dedup();
            v
        };
        md += "\n## Label ratio\n\n| variant |";
        for (_, f) in &fractions {
            let _ = write!(md, " {f} |");
        }
        md += "\n|---|";
        md += &"---|".repeat(fractions.len());
        md.push('\n');
        for v in variants {
            let _ = write!(md, "| {v} |");
            for (_, f) in &fractions {
                match groups.get(&(v.clone(), f.clone())) {
                    Some(xs) => {
                        let _ = write!(md, " {} |", fmt_mean_std(&combined(xs)));
                    }
                    None => md += " - |",
                }
            }
            md.push('\n');
        }
    }

    if !plots.is_empty() {
        md += "\n## Plots\n\n";
        for p in plots {
            let _ = writeln!(md, "![{p}]({p})");
        }
    }
    if !warnings.is_empty() {
        md += "\n## Warnings\n\n";
        for w in warnings {
            let _ = writeln!(md, "- {w}");
        }
    }
    md
}

type Series = (String, Vec<(f64, f64)>);

fn plot_curves(path: &Path, title: &str, y_desc: &str, series: &[Series]) -> Result<(), String> {
    let points = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x1, mut y0, mut y1) = (1.0f64, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !y0.is_finite() {
        return Err("no data".into());
    }
    let pad = ((y1 - y0) * 0.05).max(1e-3);
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| e.to_string())?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(0f64..x1, (y0 - pad)..(y1 + pad))
        .map_err(|e| e.to_string())?;
    chart
        .configure_mesh()
        .x_desc("epoch")
        .y_desc(y_desc)
        .draw()
        .map_err(|e| e.to_string())?;
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(|e| e.to_string())?
            .label(name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| e.to_string())?;
    root.present().map_err(|e| e.to_string())
}

fn plot_final_bars(path: &Path, bars: &[(String, f64)]) -> Result<(), String> {
    let root = SVGBackend::new(path, (120 + 90 * bars.len() as u32, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| e.to_string())?;
    let top = bars.iter().map(|b| b.1).fold(0.0f64, f64::max).max(1.0) * 1.1;
    let mut chart = ChartBuilder::on(&root)
        .caption("final top1_combined", ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(60)
        .y_label_area_size(60)
        .build_cartesian_2d((0..bars.len()).into_segmented(), 0f64..top)
        .map_err(|e| e.to_string())?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .y_desc("top-1 (%)")
        .x_labels(bars.len())
        .x_label_formatter(&|v| match v {
            SegmentValue::CenterOf(i) | SegmentValue::Exact(i) => bars.get(*i).map(|b| b.0.clone()).unwrap_or_default(),
            SegmentValue::Last => String::new(),
        })
        .draw()
        .map_err(|e| e.to_string())?;
    chart
        .draw_series(bars.iter().enumerate().map(|(i, (_, v))| {
            let mut r = Rectangle::new(
                [(SegmentValue::Exact(i), 0.0), (SegmentValue::Exact(i + 1), *v)],
                Palette99::pick(i).filled(),
            );
            r.set_margin(0, 0, 8, 8);
            r
        }))
        .map_err(|e| e.to_string())?;
    root.present().map_err(|e| e.to_string())
}

/// Curve plots over epochs; each returns a file name relative to `out`.
fn write_plots(runs: &[RunData], out: &Path, warnings: &mut Vec<String>) -> Vec<String> {
    type Getter = fn(&MetricRecord) -> Option<f64>;
    let curves: [(&str, &str, &str, Getter); 4] = [
        ("curve_top1.svg", "top1_combined", "top-1 (%)", |r| r.top1_combined),
        ("curve_loss.svg", "L", "loss", |r| Some(r.l)),
        ("curve_coverage.svg", "coverage", "retained share", |r| r.coverage),
        ("curve_pseudo_label_accuracy.svg", "pseudo_label_accuracy", "accuracy", |r| r.pseudo_label_accuracy),
    ];
    let mut written = Vec::new();
    for (file, title, y_desc, get) in curves {
        let series: Vec<Series> = runs
            .iter()
            .map(|run| {
                let pts = run.records.iter().filter_map(|r| get(r).map(|y| ((r.epoch + 1) as f64, y))).collect();
                (run.name.clone(), pts)
            })
            .filter(|(_, pts): &Series| !pts.is_empty())
            .collect();
        if series.is_empty() {
            continue;
        }
        match plot_curves(&out.join(file), title, y_desc, &series) {
            Ok(()) => written.push(file.to_string()),
            Err(e) => warnings.push(format!("plot {file} failed: {e}")),
        }
    }
    let bars: Vec<(String, f64)> = runs
        .iter()
        .filter_map(|r| Some((r.name.clone(), r.final_record()?.top1_combined?)))
        .collect();
    if bars.len() > 1 {
        match plot_final_bars(&out.join(FINAL_PLOT), &bars) {
            Ok(()) => written.push(FINAL_PLOT.to_string()),
            Err(e) => warnings.push(format!("plot {FINAL_PLOT} failed: {e}")),
        }
    }
    written
}

#[derive(Debug, Clone)]
pub struct ReportOutcome {
    pub runs: Vec<RunData>,
    pub warnings: Vec<String>,
    pub files: Vec<PathBuf>,
}

pub fn report(run_dirs: &[PathBuf], out: &Path) -> CliResult<ReportOutcome> {
    let mut warnings = Vec::new();
    let runs: Vec<RunData> = run_dirs.iter().filter_map(|d| read_run(d, &mut warnings)).collect();
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let final_csv = out.join(FINAL_CSV);
    let curves_csv = out.join(CURVES_CSV);
    write_final_csv(&runs, &final_csv)?;
    write_curves_csv(&runs, &curves_csv)?;
    let plots = write_plots(&runs, out, &mut warnings);
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let md_path = out.join(REPORT_FILE);
    std::fs::write(&md_path, render_markdown(&runs, &warnings, &plots)).map_err(|e| CliError::io(&md_path, e))?;
    let mut files = vec![md_path, final_csv, curves_csv];
    files.extend(plots.iter().map(|p| out.join(p)));
    Ok(ReportOutcome { runs, warnings, files })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_match_the_metric_stream() {
        for v in [0.1, 1e-5, 12.5, 1.0 / 3.0, 100.0] {
            let line = serde_json::json!({ "x": v }).to_string();
            assert!(line.contains(&num(v)), "{line} vs {}", num(v));
        }
    }

    #[test]
    fn mean_and_sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, Some(1.0));
        assert_eq!(mean_std(&[4.0]).1, None);
    }
}
