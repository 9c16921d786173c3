//! Voxel-wise and lesion-wise evaluation, plus the statistical machinery
//! used to compare methods: connected-component analysis under
//! 18-connectivity, DSC/TPR, lesion-detection rates from pairwise IoU
//! matching, relative volume error, rank scores, Wilcoxon signed-rank
//! tests with Bonferroni adjustment, and bootstrap confidence intervals.
//!
//! Empty-mask conventions (the literature rarely spells these out, so they
//! are pinned here and in tests): DSC of two empty masks is 1; LFDR with no
//! predicted lesions is 0 (no discoveries, none false); TPR, LTPR and RVE
//! with an empty reference are undefined and reported as `None`, to be
//! excluded from aggregates by the caller.

use std::collections::VecDeque;

use ndarray::{Array2, Array3, Zip};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::rng::stream;
use rand::Rng;

/// Pairs that the exact Wilcoxon null distribution is enumerated for;
/// beyond this the normal approximation with tie and continuity
/// corrections takes over.
const WILCOXON_EXACT_LIMIT: usize = 25;

/// The 18-neighborhood: all offsets that share a face (6) or an edge (12)
/// with the centre voxel. Corner-only neighbours (|dx|+|dy|+|dz| = 3) are
/// excluded.
const OFFSETS_18: [[isize; 3]; 18] = [
    [-1, 0, 0],
    [1, 0, 0],
    [0, -1, 0],
    [0, 1, 0],
    [0, 0, -1],
    [0, 0, 1],
    [-1, -1, 0],
    [-1, 1, 0],
    [1, -1, 0],
    [1, 1, 0],
    [-1, 0, -1],
    [-1, 0, 1],
    [1, 0, -1],
    [1, 0, 1],
    [0, -1, -1],
    [0, -1, 1],
    [0, 1, -1],
    [0, 1, 1],
];

/// Connected components of a binary mask under 18-connectivity.
///
/// Components are disjoint, their union is exactly the foreground, and any
/// two foreground voxels sharing a face or an edge land in the same
/// component.
#[derive(Debug, Clone, PartialEq)]
pub struct LesionStats {
    /// Component id per voxel: 0 is background, components are `1..=count`.
    pub labels: Array3<u32>,
    /// Voxel count of component `id`, at index `id - 1`.
    pub sizes: Vec<usize>,
}

impl LesionStats {
    /// Number of components.
    pub fn count(&self) -> usize {
        self.sizes.len()
    }

    /// Total foreground volume in voxels.
    pub fn volume(&self) -> usize {
        self.sizes.iter().sum()
    }
}

/// Decompose a binary mask into 18-connected components by breadth-first
/// flood fill in scan order. Deterministic; an empty mask yields zero
/// components.
pub fn label_components(mask: &Array3<u8>) -> LesionStats {
    let dim = mask.dim();
    let mut labels = Array3::<u32>::zeros(dim);
    let mut sizes = Vec::new();
    let mut queue: VecDeque<[usize; 3]> = VecDeque::new();

    for ((x, y, z), &v) in mask.indexed_iter() {
        if v == 0 || labels[[x, y, z]] != 0 {
            continue;
        }
        let id = sizes.len() as u32 + 1;
        labels[[x, y, z]] = id;
        queue.push_back([x, y, z]);
        let mut size = 0usize;
        while let Some(p) = queue.pop_front() {
            size += 1;
            for off in OFFSETS_18 {
                let q = [
                    p[0] as isize + off[0],
                    p[1] as isize + off[1],
                    p[2] as isize + off[2],
                ];
                if q[0] < 0
                    || q[1] < 0
                    || q[2] < 0
                    || q[0] as usize >= dim.0
                    || q[1] as usize >= dim.1
                    || q[2] as usize >= dim.2
                {
                    continue;
                }
                let q = [q[0] as usize, q[1] as usize, q[2] as usize];
                if mask[q] != 0 && labels[q] == 0 {
                    labels[q] = id;
                    queue.push_back(q);
                }
            }
        }
        sizes.push(size);
    }
    LesionStats { labels, sizes }
}

/// Evaluation thresholds and statistical-test parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    /// A predicted lesion detects a reference lesion iff their pairwise
    /// intersection-over-union is at least this. Must lie in `(0, 1]`.
    pub t_iou: f64,
    /// Bootstrap resamples for confidence intervals.
    pub bootstrap_resamples: usize,
    /// Significance level for adjusted p-values.
    pub alpha: f64,
    /// Number of simultaneous comparisons; the Bonferroni multiplier.
    pub n_methods: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig { t_iou: 0.05, bootstrap_resamples: 2000, alpha: 0.05, n_methods: 1 }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_iou > 0.0 && self.t_iou <= 1.0) {
            return Err(Error::BadIouThreshold(self.t_iou));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::BadProbability { field: "alpha", value: self.alpha });
        }
        if self.bootstrap_resamples == 0 {
            return Err(Error::ZeroField { field: "bootstrap_resamples" });
        }
        if self.n_methods == 0 {
            return Err(Error::ZeroField { field: "n_methods" });
        }
        Ok(())
    }
}

/// Dice similarity coefficient from hard voxel counts:
/// `2·TP / (2·TP + FP + FN)`. Two empty masks score 1 by convention.
pub fn dsc(pred: &Array3<u8>, reference: &Array3<u8>) -> f64 {
    assert_eq!(pred.dim(), reference.dim(), "mask shapes must match");
    let mut tp = 0usize;
    let mut p = 0usize;
    let mut r = 0usize;
    Zip::from(pred).and(reference).for_each(|&a, &b| {
        p += (a != 0) as usize;
        r += (b != 0) as usize;
        tp += (a != 0 && b != 0) as usize;
    });
    if p + r == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (p + r) as f64
    }
}

/// Voxel sensitivity `TP / (TP + FN)`. Undefined (`None`) when the
/// reference is empty.
pub fn tpr(pred: &Array3<u8>, reference: &Array3<u8>) -> Option<f64> {
    assert_eq!(pred.dim(), reference.dim(), "mask shapes must match");
    let mut tp = 0usize;
    let mut r = 0usize;
    Zip::from(pred).and(reference).for_each(|&a, &b| {
        r += (b != 0) as usize;
        tp += (a != 0 && b != 0) as usize;
    });
    if r == 0 {
        None
    } else {
        Some(tp as f64 / r as f64)
    }
}

/// Outcome of matching predicted lesions against reference lesions.
#[derive(Debug, Clone, PartialEq)]
pub struct LesionMatch {
    /// Reference lesions detected by at least one predicted lesion
    /// (necessarily at most the reference count).
    pub ltp: usize,
    /// Predicted lesions that detect no reference lesion.
    pub lfp: usize,
    /// Pairwise IoU, indexed `[predicted, reference]`.
    pub iou: Array2<f64>,
}

/// Match components by pairwise IoU at threshold `t_iou` (inclusive).
/// One-to-many matches are allowed: a single predicted lesion may detect
/// several reference lesions, and detection counts each side independently.
pub fn lesion_match(pred: &LesionStats, reference: &LesionStats, t_iou: f64) -> LesionMatch {
    assert_eq!(pred.labels.dim(), reference.labels.dim(), "mask shapes must match");
    let (np, nr) = (pred.count(), reference.count());
    let mut inter = Array2::<usize>::zeros((np, nr));
    Zip::from(&pred.labels).and(&reference.labels).for_each(|&p, &r| {
        if p > 0 && r > 0 {
            inter[[p as usize - 1, r as usize - 1]] += 1;
        }
    });
    let mut iou = Array2::<f64>::zeros((np, nr));
    for p in 0..np {
        for r in 0..nr {
            let i = inter[[p, r]];
            let union = pred.sizes[p] + reference.sizes[r] - i;
            iou[[p, r]] = i as f64 / union as f64;
        }
    }
    let ltp = (0..nr).filter(|&r| (0..np).any(|p| iou[[p, r]] >= t_iou)).count();
    let lfp = (0..np).filter(|&p| (0..nr).all(|r| iou[[p, r]] < t_iou)).count();
    LesionMatch { ltp, lfp, iou }
}

/// Lesion-wise true-positive rate: detected reference lesions over all
/// reference lesions. Undefined when the reference has no lesions.
pub fn ltpr(pred: &Array3<u8>, reference: &Array3<u8>, cfg: &MetricsConfig) -> Option<f64> {
    let (ps, rs) = (label_components(pred), label_components(reference));
    let m = lesion_match(&ps, &rs, cfg.t_iou);
    if rs.count() == 0 {
        None
    } else {
        Some(m.ltp as f64 / rs.count() as f64)
    }
}

/// Lesion-wise false-discovery rate: unmatched predicted lesions over all
/// predicted lesions. No predictions means no false discoveries: 0.
pub fn lfdr(pred: &Array3<u8>, reference: &Array3<u8>, cfg: &MetricsConfig) -> f64 {
    let (ps, rs) = (label_components(pred), label_components(reference));
    let m = lesion_match(&ps, &rs, cfg.t_iou);
    if ps.count() == 0 {
        0.0
    } else {
        m.lfp as f64 / ps.count() as f64
    }
}

/// Relative volume error `|V(pred) − V(ref)| / V(ref)` over total foreground
/// voxel counts. Undefined when the reference is empty.
pub fn rve(pred: &Array3<u8>, reference: &Array3<u8>) -> Option<f64> {
    assert_eq!(pred.dim(), reference.dim(), "mask shapes must match");
    let vp = pred.iter().filter(|&&v| v != 0).count();
    let vr = reference.iter().filter(|&&v| v != 0).count();
    if vr == 0 {
        None
    } else {
        Some((vp as f64 - vr as f64).abs() / vr as f64)
    }
}

/// All per-case metrics in one pass. `None` marks a metric that is
/// undefined for this case (empty reference) and must be excluded from
/// aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub dsc: f64,
    pub tpr: Option<f64>,
    pub ltpr: Option<f64>,
    pub lfdr: f64,
    pub rve: Option<f64>,
    pub pred_lesions: usize,
    pub ref_lesions: usize,
}

/// Evaluate one prediction against its reference.
pub fn evaluate_case(
    pred: &Array3<u8>,
    reference: &Array3<u8>,
    cfg: &MetricsConfig,
) -> Result<CaseMetrics> {
    cfg.validate()?;
    if pred.dim() != reference.dim() {
        let d = pred.dim();
        let r = reference.dim();
        return Err(Error::EvalShapeMismatch {
            pred: [d.0, d.1, d.2],
            reference: [r.0, r.1, r.2],
        });
    }
    let ps = label_components(pred);
    let rs = label_components(reference);
    let m = lesion_match(&ps, &rs, cfg.t_iou);
    let ref_nonempty = rs.volume() > 0;
    Ok(CaseMetrics {
        dsc: dsc(pred, reference),
        tpr: tpr(pred, reference),
        ltpr: if rs.count() == 0 { None } else { Some(m.ltp as f64 / rs.count() as f64) },
        lfdr: if ps.count() == 0 { 0.0 } else { m.lfp as f64 / ps.count() as f64 },
        rve: if ref_nonempty {
            Some((ps.volume() as f64 - rs.volume() as f64).abs() / rs.volume() as f64)
        } else {
            None
        },
        pred_lesions: ps.count(),
        ref_lesions: rs.count(),
    })
}

/// Fraction of argmax-correct domain predictions. The argmax takes the
/// first maximum, so a constant classifier on a balanced two-domain batch
/// scores exactly 0.5.
pub fn classifier_accuracy(posteriors: &Array2<f32>, domains: &[usize]) -> Result<f64> {
    if posteriors.nrows() == 0 {
        return Err(Error::EmptySample("classifier accuracy"));
    }
    if posteriors.nrows() != domains.len() {
        return Err(Error::UnpairedSamples { a: posteriors.nrows(), b: domains.len() });
    }
    let correct = posteriors
        .rows()
        .into_iter()
        .zip(domains)
        .filter(|(row, &d)| {
            let arg = row
                .iter()
                .enumerate()
                .max_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            // max_by returns the last maximum; take the first instead.
            let first = row.iter().position(|&v| v == row[arg]).unwrap();
            first == d
        })
        .count();
    Ok(correct as f64 / domains.len() as f64)
}

/// Assign ranks `1..=n` with ties sharing the mean of their positions.
/// `descending` ranks the largest value first (metrics where higher is
/// better).
fn rank_with_ties(values: &[f64], descending: bool) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        if descending {
            values[b].total_cmp(&values[a])
        } else {
            values[a].total_cmp(&values[b])
        }
    });
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let mean_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = mean_rank;
        }
        i = j + 1;
    }
    ranks
}

/// The five ranked metrics, in table order.
pub const METRIC_NAMES: [&str; 5] = ["dsc", "tpr", "ltpr", "lfdr", "rve"];
/// Rank direction per metric: DSC/TPR/LTPR descending (higher is better),
/// LFDR/RVE ascending.
pub const METRIC_HIGHER_IS_BETTER: [bool; 5] = [true, true, true, false, false];

/// Per-method metric means, in [`METRIC_NAMES`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub name: String,
    pub means: [f64; 5],
}

/// Per-metric ranks and the average rank score per method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    pub methods: Vec<String>,
    pub means: Vec<[f64; 5]>,
    /// Rank of each method on each metric; ties share the mean position.
    pub ranks: Vec<[f64; 5]>,
    /// Mean of the five ranks; always within `[1, n_methods]`.
    pub rank_score: Vec<f64>,
}

/// Rank methods on their per-dataset metric means and average the five
/// ranks into one score per method.
pub fn rank_score(methods: &[MethodSummary]) -> Result<RankTable> {
    if methods.len() < 2 {
        return Err(Error::TooFewMethods(methods.len()));
    }
    for m in methods {
        for (k, v) in m.means.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::MissingMetric {
                    method: m.name.clone(),
                    metric: METRIC_NAMES[k],
                });
            }
        }
    }
    let mut ranks = vec![[0.0; 5]; methods.len()];
    for k in 0..5 {
        let column: Vec<f64> = methods.iter().map(|m| m.means[k]).collect();
        for (i, r) in rank_with_ties(&column, METRIC_HIGHER_IS_BETTER[k]).into_iter().enumerate() {
            ranks[i][k] = r;
        }
    }
    let rank_score = ranks.iter().map(|r| r.iter().sum::<f64>() / 5.0).collect();
    Ok(RankTable {
        methods: methods.iter().map(|m| m.name.clone()).collect(),
        means: methods.iter().map(|m| m.means).collect(),
        ranks,
        rank_score,
    })
}

/// Exact two-sided tail probability of the signed-rank statistic.
///
/// `scaled_ranks` are the per-pair ranks doubled (average ranks are
/// half-integers, so doubling keeps everything integral); `w_scaled` is the
/// doubled observed positive-rank sum. Enumerates the full null
/// distribution over all 2^n sign assignments by dynamic programming and
/// returns the probability of a statistic at least as far from the null
/// mean as observed.
fn wilcoxon_exact_two_sided(scaled_ranks: &[i64], w_scaled: i64) -> f64 {
    let total: i64 = scaled_ranks.iter().sum();
    let mut counts = vec![0.0f64; total as usize + 1];
    counts[0] = 1.0;
    for &w in scaled_ranks {
        for s in (w..=total).rev() {
            let from = counts[(s - w) as usize];
            if from > 0.0 {
                counts[s as usize] += from;
            }
        }
    }
    // Deviations measured in doubled units around the doubled mean `total`.
    let dev = (2 * w_scaled - total).abs();
    let extreme: f64 = counts
        .iter()
        .enumerate()
        .filter(|(s, _)| (2 * *s as i64 - total).abs() >= dev)
        .map(|(_, &c)| c)
        .sum();
    extreme / 2f64.powi(scaled_ranks.len() as i32)
}

/// Two-sided Wilcoxon signed-rank test on paired samples.
///
/// Zero differences are dropped (Wilcoxon's original treatment); if all
/// differences are zero the test is undefined and reported as p = 1. Up to
/// [`WILCOXON_EXACT_LIMIT`] effective pairs the p-value comes from the
/// exact null distribution; beyond that, from the normal approximation
/// with tie and continuity corrections.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::UnpairedSamples { a: a.len(), b: b.len() });
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    let n = diffs.len();
    if n == 0 {
        return Ok(1.0);
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = rank_with_ties(&abs, false);
    let w_plus: f64 =
        diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| *r).sum();

    if n <= WILCOXON_EXACT_LIMIT {
        let scaled: Vec<i64> = ranks.iter().map(|r| (2.0 * r).round() as i64).collect();
        return Ok(wilcoxon_exact_two_sided(&scaled, (2.0 * w_plus).round() as i64));
    }

    let mut sorted = abs;
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += (t * t * t - t) / 48.0;
        i = j + 1;
    }
    let nf = n as f64;
    let mu = nf * (nf + 1.0) / 4.0;
    let sigma = (nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term).sqrt();
    let num = w_plus - mu;
    let z = if num == 0.0 { 0.0 } else { (num - 0.5 * num.signum()) / sigma };
    let normal = Normal::new(0.0, 1.0).unwrap();
    Ok((2.0 * (1.0 - normal.cdf(z.abs()))).clamp(0.0, 1.0))
}

/// Bonferroni adjustment: multiply by the number of comparisons, clip to 1.
pub fn bonferroni(p: f64, n_methods: usize) -> f64 {
    (p * n_methods as f64).min(1.0)
}

/// A paired statistical comparison between two methods.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodComparison {
    pub p_raw: f64,
    pub p_adjusted: f64,
    pub significant: bool,
}

/// Compare two methods' per-case values with a two-sided Wilcoxon
/// signed-rank test and Bonferroni adjustment over `cfg.n_methods`
/// comparisons. Requires at least six pairs.
pub fn compare_methods(a: &[f64], b: &[f64], cfg: &MetricsConfig) -> Result<MethodComparison> {
    cfg.validate()?;
    if a.len() != b.len() {
        return Err(Error::UnpairedSamples { a: a.len(), b: b.len() });
    }
    if a.len() < 6 {
        return Err(Error::TooFewCases { what: "paired comparison", needed: 6, got: a.len() });
    }
    let p_raw = wilcoxon_signed_rank(a, b)?;
    let p_adjusted = bonferroni(p_raw, cfg.n_methods);
    Ok(MethodComparison { p_raw, p_adjusted, significant: p_adjusted < cfg.alpha })
}

/// Mean with a percentile bootstrap confidence interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Percentile bootstrap (2.5th/97.5th) of the mean, deterministic for a
/// given seed. Requires at least two values.
pub fn bootstrap_ci(values: &[f64], resamples: usize, seed: u64) -> Result<BootstrapCi> {
    if values.len() < 2 {
        return Err(Error::TooFewCases { what: "bootstrap", needed: 2, got: values.len() });
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let mut rng = stream(seed, "bootstrap", &[]);
    let mut means: Vec<f64> = (0..resamples.max(1))
        .map(|_| {
            (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);
    let percentile = |q: f64| -> f64 {
        let pos = q * (means.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let t = pos - lo as f64;
        means[lo] * (1.0 - t) + means[hi] * t
    };
    Ok(BootstrapCi { mean, lo: percentile(0.025), hi: percentile(0.975) })
}
