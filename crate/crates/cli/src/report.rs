//! The `report` command: turn a training event log (and optionally several
//! evaluation reports) into summary tables and plots.
//!
//! Outputs, all under `--out`:
//!
//! * `stage_accuracy.csv` — per encoder stage, the windowed classifier
//!   accuracy right after warm-up and at the end of the run, plus whether
//!   the stage was ever unlearned. The post-unlearning column is `n/a`
//!   when the log contains no unlearning at all.
//! * `accuracy.svg`, `loss.svg` — training dynamics over steps.
//! * `methods.csv`, `comparisons.csv` — when two or more `--metrics`
//!   reports are given: per-method metric means with ranks and the average
//!   rank score, and Wilcoxon signed-rank tests of every method against
//!   the first (Bonferroni-adjusted by the number of methods).
//! * `report.json` — everything above as one machine-readable document.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use unlearn3d::error::{Error, Result};
use unlearn3d::metrics::{
    compare_methods, rank_score, MethodSummary, MetricsConfig, RankTable, METRIC_NAMES,
};
use unlearn3d::trainer::Event;

use crate::evaluate::EvalReport;
use crate::svg::{line_chart, Series};

/// The parts of an event log the report consumes.
struct RunLog {
    warmup_epochs: usize,
    iters_per_epoch: usize,
    acc_window: usize,
    tolerance: f64,
    n_domains: usize,
    steps: Vec<StepRecord>,
}

struct StepRecord {
    epoch: usize,
    seg_loss: f64,
    classifier_loss: Vec<f64>,
    accuracy: Vec<f64>,
    windowed: Vec<f64>,
    unlearned_stages: Vec<usize>,
}

fn parse_log(path: &Path) -> Result<RunLog> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let mut start = None;
    let mut steps = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let event: Event = serde_json::from_str(line).map_err(|e| {
            Error::format(path, format!("line {}: not a run event: {e}", lineno + 1))
        })?;
        match event {
            Event::RunStart {
                warmup_epochs, iters_per_epoch, acc_window, tolerance, domains, ..
            } if start.is_none() => {
                start = Some((warmup_epochs, iters_per_epoch, acc_window, tolerance, domains.len()));
            }
            Event::Step { epoch, seg_loss, classifier_loss, accuracy, windowed, confusion, .. } => {
                steps.push(StepRecord {
                    epoch,
                    seg_loss,
                    classifier_loss,
                    accuracy,
                    windowed,
                    unlearned_stages: confusion.iter().map(|&(s, _)| s).collect(),
                });
            }
            _ => {}
        }
    }
    let Some((warmup_epochs, iters_per_epoch, acc_window, tolerance, n_domains)) = start else {
        return Err(Error::format(
            path,
            "no run_start event — pass the log of a full (non-resumed) run",
        ));
    };
    if steps.is_empty() {
        return Err(Error::format(path, "no step events"));
    }
    Ok(RunLog { warmup_epochs, iters_per_epoch, acc_window, tolerance, n_domains, steps })
}

/// One row of `stage_accuracy.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageAccuracyRow {
    pub stage: usize,
    /// Mean accuracy over the first full window after warm-up.
    pub post_warmup: Option<f64>,
    /// Mean accuracy over the last full window of the run; `None` when the
    /// log contains no unlearning events.
    pub post_unlearning: Option<f64>,
    /// Whether this stage was ever actively unlearned.
    pub unlearned: bool,
}

fn stage_table(log: &RunLog) -> Vec<StageAccuracyRow> {
    let depth = log.steps[0].accuracy.len();
    let w = log.acc_window;
    let post_warm: Vec<&StepRecord> =
        log.steps.iter().filter(|s| s.epoch > log.warmup_epochs).take(w).collect();
    let last: Vec<&StepRecord> = log.steps.iter().rev().take(w).collect();
    let any_unlearned = log.steps.iter().any(|s| !s.unlearned_stages.is_empty());

    let window_mean = |steps: &[&StepRecord], stage_idx: usize| -> Option<f64> {
        (steps.len() == w)
            .then(|| steps.iter().map(|s| s.accuracy[stage_idx]).sum::<f64>() / w as f64)
    };

    (0..depth)
        .map(|i| StageAccuracyRow {
            stage: i + 1,
            post_warmup: window_mean(&post_warm, i),
            post_unlearning: if any_unlearned { window_mean(&last, i) } else { None },
            unlearned: log.steps.iter().any(|s| s.unlearned_stages.contains(&(i + 1))),
        })
        .collect()
}

/// One row of `comparisons.csv`: `method` against `baseline` on `metric`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub metric: String,
    pub method: String,
    pub baseline: String,
    pub n_pairs: usize,
    pub p_raw: Option<f64>,
    pub p_adjusted: Option<f64>,
    pub significant: Option<bool>,
}

#[derive(Debug, Clone, Serialize)]
struct ReportDoc {
    stage_accuracy: Vec<StageAccuracyRow>,
    rank_table: Option<RankTable>,
    comparisons: Vec<ComparisonRow>,
}

/// Per-case values of `metric` for the cases where both reports define it,
/// paired by case id.
fn paired_values(a: &EvalReport, b: &EvalReport, metric: &str) -> (Vec<f64>, Vec<f64>) {
    let bv: std::collections::BTreeMap<&str, f64> = b.metric_values(metric).into_iter().collect();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (case, va) in a.metric_values(metric) {
        if let Some(&vb) = bv.get(case) {
            xs.push(va);
            ys.push(vb);
        }
    }
    (xs, ys)
}

fn method_tables(
    methods: &[(String, EvalReport)],
    alpha: f64,
) -> Result<(Option<RankTable>, Vec<ComparisonRow>)> {
    if methods.len() < 2 {
        return Ok((None, Vec::new()));
    }
    let summaries: Vec<MethodSummary> = methods
        .iter()
        .map(|(name, report)| {
            let mut means = [f64::NAN; 5];
            for (k, &metric) in METRIC_NAMES.iter().enumerate() {
                let values = report.metric_values(metric);
                if !values.is_empty() {
                    means[k] = values.iter().map(|(_, v)| v).sum::<f64>() / values.len() as f64;
                }
            }
            MethodSummary { name: name.clone(), means }
        })
        .collect();
    let table = rank_score(&summaries)?;

    let cfg = MetricsConfig { n_methods: methods.len(), alpha, ..MetricsConfig::default() };
    let (base_name, base) = &methods[0];
    let mut comparisons = Vec::new();
    for (name, report) in &methods[1..] {
        for &metric in METRIC_NAMES.iter() {
            let (xs, ys) = paired_values(report, base, metric);
            let row = match compare_methods(&xs, &ys, &cfg) {
                Ok(c) => ComparisonRow {
                    metric: metric.to_string(),
                    method: name.clone(),
                    baseline: base_name.clone(),
                    n_pairs: xs.len(),
                    p_raw: Some(c.p_raw),
                    p_adjusted: Some(c.p_adjusted),
                    significant: Some(c.significant),
                },
                // Too few pairs for the test: report the pairing, leave the
                // p-values blank rather than failing the whole report.
                Err(Error::TooFewCases { .. }) => ComparisonRow {
                    metric: metric.to_string(),
                    method: name.clone(),
                    baseline: base_name.clone(),
                    n_pairs: xs.len(),
                    p_raw: None,
                    p_adjusted: None,
                    significant: None,
                },
                Err(e) => return Err(e),
            };
            comparisons.push(row);
        }
    }
    Ok((Some(table), comparisons))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_else(|| "n/a".to_string())
}

fn write_stage_csv(rows: &[StageAccuracyRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["stage", "post_warmup", "post_unlearning", "unlearned"])?;
    for r in rows {
        w.write_record([
            r.stage.to_string(),
            fmt_opt(r.post_warmup),
            fmt_opt(r.post_unlearning),
            r.unlearned.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_methods_csv(table: &RankTable, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["method".to_string()];
    header.extend(METRIC_NAMES.iter().map(|m| m.to_string()));
    header.extend(METRIC_NAMES.iter().map(|m| format!("rank_{m}")));
    header.push("rs".to_string());
    w.write_record(&header)?;
    for (i, name) in table.methods.iter().enumerate() {
        let mut rec = vec![name.clone()];
        rec.extend(table.means[i].iter().map(|v| format!("{v:.6}")));
        rec.extend(table.ranks[i].iter().map(|v| format!("{v}")));
        rec.push(format!("{}", table.rank_score[i]));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn write_comparisons_csv(rows: &[ComparisonRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["metric", "method", "baseline", "n_pairs", "p_raw", "p_adjusted", "significant"])?;
    for r in rows {
        w.write_record([
            r.metric.clone(),
            r.method.clone(),
            r.baseline.clone(),
            r.n_pairs.to_string(),
            fmt_opt(r.p_raw),
            fmt_opt(r.p_adjusted),
            r.significant.map(|s| s.to_string()).unwrap_or_else(|| "n/a".to_string()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_plots(log: &RunLog, out: &Path) -> Result<()> {
    let depth = log.steps[0].accuracy.len();
    let warmup_end = (log.warmup_epochs * log.iters_per_epoch) as f64 + 0.5;
    let uba = 1.0 / log.n_domains as f64 + log.tolerance;

    let acc_values: Vec<Vec<f64>> = (0..depth)
        .map(|i| log.steps.iter().map(|s| s.windowed[i]).collect())
        .collect();
    let acc_names: Vec<String> = (1..=depth).map(|s| format!("stage {s}")).collect();
    let acc_series: Vec<Series> = acc_names
        .iter()
        .zip(&acc_values)
        .map(|(name, values)| Series { name, values })
        .collect();
    let acc_chart = line_chart(
        "Windowed domain-classifier accuracy",
        "step",
        "accuracy",
        &acc_series,
        Some((0.0, 1.0)),
        Some(warmup_end),
        Some(uba),
    );
    let acc_path = out.join("accuracy.svg");
    fs::write(&acc_path, acc_chart).map_err(|e| Error::file(&acc_path, e))?;

    let mut loss_values: Vec<(String, Vec<f64>)> =
        vec![("segmentation".to_string(), log.steps.iter().map(|s| s.seg_loss).collect())];
    for i in 0..depth {
        loss_values.push((
            format!("classifier {}", i + 1),
            log.steps.iter().map(|s| s.classifier_loss[i]).collect(),
        ));
    }
    let loss_series: Vec<Series> = loss_values
        .iter()
        .map(|(name, values)| Series { name, values })
        .collect();
    let loss_chart = line_chart(
        "Training losses",
        "step",
        "loss",
        &loss_series,
        None,
        Some(warmup_end),
        None,
    );
    let loss_path = out.join("loss.svg");
    fs::write(&loss_path, loss_chart).map_err(|e| Error::file(&loss_path, e))?;
    Ok(())
}

/// Parse one `name=path.json` argument.
pub fn parse_method_arg(arg: &str) -> std::result::Result<(String, PathBuf), String> {
    match arg.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => {
            Ok((name.to_string(), PathBuf::from(path)))
        }
        _ => Err(format!("expected NAME=PATH, got {arg:?}")),
    }
}

pub fn cmd_report(
    events: &Path,
    out: &Path,
    metrics: &[(String, PathBuf)],
    alpha: f64,
) -> Result<()> {
    let log = parse_log(events)?;
    let methods: Vec<(String, EvalReport)> = metrics
        .iter()
        .map(|(name, path)| {
            let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
            let report: EvalReport = serde_json::from_str(&text)
                .map_err(|e| Error::format(path, format!("not an evaluation report: {e}")))?;
            Ok((name.clone(), report))
        })
        .collect::<Result<Vec<_>>>()?;

    fs::create_dir_all(out).map_err(|e| Error::file(out, e))?;
    let stage_rows = stage_table(&log);
    write_stage_csv(&stage_rows, &out.join("stage_accuracy.csv"))?;
    write_plots(&log, out)?;

    let (rank_table, comparisons) = method_tables(&methods, alpha)?;
    if let Some(table) = &rank_table {
        write_methods_csv(table, &out.join("methods.csv"))?;
        write_comparisons_csv(&comparisons, &out.join("comparisons.csv"))?;
    }

    let doc = ReportDoc { stage_accuracy: stage_rows, rank_table, comparisons };
    let json_path = out.join("report.json");
    let json = serde_json::to_string_pretty(&doc)?;
    fs::write(&json_path, json + "\n").map_err(|e| Error::file(&json_path, e))?;

    println!("report written to {}", out.display());
    Ok(())
}
