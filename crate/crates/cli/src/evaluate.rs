//! The `evaluate` command: pair predicted and reference masks by file name,
//! score every case, and write per-case plus aggregate tables.
//!
//! Output columns are stable: `case_id,dsc,tpr,ltpr,lfdr,rve,pred_lesions,
//! ref_lesions`. Metrics that are undefined for a case (TPR/LTPR/RVE with an
//! empty reference) are left blank in the CSV and `null` in the JSON, and are
//! excluded from the aggregates; the `n` row/field says how many cases each
//! aggregate actually covers.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use unlearn3d::error::{Error, Result};
use unlearn3d::metrics::{bootstrap_ci, evaluate_case, CaseMetrics, MetricsConfig, METRIC_NAMES};
use unlearn3d::nifti;

use crate::nii_files;

/// One scored case, keyed for the report's paired tests.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseRow {
    pub case_id: String,
    #[serde(flatten)]
    pub metrics: CaseMetrics,
}

/// Mean/SD/CI over the cases where a metric was defined.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Aggregate {
    pub n: usize,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
}

/// The full content of `<stem>.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub t_iou: f64,
    pub bootstrap_resamples: usize,
    pub bootstrap_seed: u64,
    pub cases: Vec<CaseRow>,
    /// Keyed like [`METRIC_NAMES`]: dsc, tpr, ltpr, lfdr, rve.
    pub aggregates: Vec<(String, Aggregate)>,
}

impl EvalReport {
    /// Per-case values of one metric, paired with their case ids, skipping
    /// cases where the metric is undefined.
    pub fn metric_values(&self, metric: &str) -> Vec<(&str, f64)> {
        self.cases
            .iter()
            .filter_map(|c| Some((c.case_id.as_str(), metric_of(&c.metrics, metric)?)))
            .collect()
    }
}

pub fn metric_of(m: &CaseMetrics, metric: &str) -> Option<f64> {
    match metric {
        "dsc" => Some(m.dsc),
        "tpr" => m.tpr,
        "ltpr" => m.ltpr,
        "lfdr" => Some(m.lfdr),
        "rve" => m.rve,
        _ => None,
    }
}

fn aggregate(values: &[f64], resamples: usize, seed: u64) -> Aggregate {
    if values.is_empty() {
        return Aggregate { n: 0, mean: None, sd: None, ci_lo: None, ci_hi: None };
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = (n > 1).then(|| {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    });
    let ci = (n > 1).then(|| bootstrap_ci(values, resamples, seed).expect("n >= 2"));
    Aggregate {
        n,
        mean: Some(mean),
        sd,
        ci_lo: ci.map(|c| c.lo),
        ci_hi: ci.map(|c| c.hi),
    }
}

/// Score every case present in both directories and build the report.
pub fn evaluate_directories(
    pred_dir: &Path,
    ref_dir: &Path,
    cfg: &MetricsConfig,
    seed: u64,
) -> Result<EvalReport> {
    let preds: BTreeSet<String> = nii_files(pred_dir)?.into_iter().collect();
    let refs: BTreeSet<String> = nii_files(ref_dir)?.into_iter().collect();
    let common: Vec<&String> = preds.intersection(&refs).collect();
    if common.is_empty() {
        return Err(Error::NoCommonCases);
    }

    let mut cases = Vec::with_capacity(common.len());
    for name in common {
        let pred = nifti::read_mask(&pred_dir.join(name))?;
        let reference = nifti::read_mask(&ref_dir.join(name))?;
        cases.push(CaseRow {
            case_id: name.trim_end_matches(".nii").to_string(),
            metrics: evaluate_case(&pred, &reference, cfg)?,
        });
    }

    let aggregates = METRIC_NAMES
        .iter()
        .map(|&metric| {
            let values: Vec<f64> =
                cases.iter().filter_map(|c| metric_of(&c.metrics, metric)).collect();
            (metric.to_string(), aggregate(&values, cfg.bootstrap_resamples, seed))
        })
        .collect();

    Ok(EvalReport {
        t_iou: cfg.t_iou,
        bootstrap_resamples: cfg.bootstrap_resamples,
        bootstrap_seed: seed,
        cases,
        aggregates,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

/// Write `<stem>.csv`: per-case rows, then aggregate rows whose `case_id`
/// column names the statistic (`mean`, `sd`, `n`, `ci_lo`, `ci_hi`).
fn write_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "case_id",
        "dsc",
        "tpr",
        "ltpr",
        "lfdr",
        "rve",
        "pred_lesions",
        "ref_lesions",
    ])?;
    for c in &report.cases {
        let m = &c.metrics;
        w.write_record([
            c.case_id.clone(),
            format!("{:.6}", m.dsc),
            fmt_opt(m.tpr),
            fmt_opt(m.ltpr),
            format!("{:.6}", m.lfdr),
            fmt_opt(m.rve),
            m.pred_lesions.to_string(),
            m.ref_lesions.to_string(),
        ])?;
    }
    let col = |f: &dyn Fn(&Aggregate) -> String| -> Vec<String> {
        report.aggregates.iter().map(|(_, a)| f(a)).collect::<Vec<_>>()
    };
    for (stat, values) in [
        ("mean", col(&|a| fmt_opt(a.mean))),
        ("sd", col(&|a| fmt_opt(a.sd))),
        ("n", col(&|a| a.n.to_string())),
        ("ci_lo", col(&|a| fmt_opt(a.ci_lo))),
        ("ci_hi", col(&|a| fmt_opt(a.ci_hi))),
    ] {
        let mut record = vec![stat.to_string()];
        record.extend(values);
        record.extend([String::new(), String::new()]);
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_evaluate(
    pred_dir: &Path,
    ref_dir: &Path,
    out_stem: &Path,
    t_iou: f64,
    resamples: usize,
    seed: u64,
) -> Result<()> {
    let cfg = MetricsConfig { t_iou, bootstrap_resamples: resamples, ..MetricsConfig::default() };
    cfg.validate()?;
    let report = evaluate_directories(pred_dir, ref_dir, &cfg, seed)?;

    if let Some(parent) = out_stem.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::file(parent, e))?;
    }
    let csv_path = out_stem.with_extension("csv");
    let json_path = out_stem.with_extension("json");
    write_csv(&report, &csv_path)?;
    let json = serde_json::to_string_pretty(&report)?;
    fs::write(&json_path, json + "\n").map_err(|e| Error::file(&json_path, e))?;

    let mean_dsc = report.aggregates[0].1.mean.unwrap_or(f64::NAN);
    println!(
        "evaluated {} cases (mean DSC {:.4}); wrote {} and {}",
        report.cases.len(),
        mean_dsc,
        csv_path.display(),
        json_path.display()
    );
    Ok(())
}
