//! Loss functions, all in `f64` with analytic gradients.
//!
//! Three losses drive training:
//!
//! * soft Dice + cross-entropy (their sum) for segmentation;
//! * cross-entropy for the per-stage domain classifiers;
//! * the confusion loss `KL(P || U)` between a classifier posterior and the
//!   uniform distribution, which unlearning *minimises*: it is zero exactly
//!   when the classifier is noninformative and maximal (`ln N_d`) when it is
//!   certain. (A published form of this loss carries a stray minus sign whose
//!   minimum would sit at the one-hot vertex instead; the sign here is chosen
//!   so the stated "uninformative = minimal" behaviour actually holds.)
//!
//! Every batch reduction is a mean, so loss magnitudes are batch-size
//! invariant. Gradients are with respect to *probabilities*; composing with
//! [`softmax_rows_f64`]'s backward gives gradients w.r.t. logits, which is
//! how the finite-difference tests drive them.

use ndarray::{Array2, Array4, Array5, ArrayD, ArrayView2, ArrayViewD, Axis};

use crate::error::{Error, Result};

/// Additive smoothing in the soft-Dice numerator and denominator.
pub const DICE_EPS: f64 = 1e-5;
/// Probabilities are clamped to at least this before any logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// Soft confusion-matrix counts. With probabilistic predictions these are the
/// expected counts (`TP = Σ p·t`, ...); with hard masks they are the usual
/// integers. The four counts always sum to the number of voxels compared.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfusionCounts {
    pub true_pos: f64,
    pub false_pos: f64,
    pub false_neg: f64,
    pub true_neg: f64,
}

impl ConfusionCounts {
    pub fn soft(pred: &ArrayViewD<f64>, label: &ArrayViewD<f64>) -> Self {
        let mut c = ConfusionCounts { true_pos: 0.0, false_pos: 0.0, false_neg: 0.0, true_neg: 0.0 };
        for (&p, &t) in pred.iter().zip(label.iter()) {
            c.true_pos += p * t;
            c.false_pos += p * (1.0 - t);
            c.false_neg += (1.0 - p) * t;
            c.true_neg += (1.0 - p) * (1.0 - t);
        }
        c
    }

    pub fn total(&self) -> f64 {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }

    /// `1 - (2TP + eps) / (2TP + FP + FN + eps)`. The denominator equals
    /// `Σ pred + Σ label`, the usual soft-Dice form.
    pub fn dice_loss(&self) -> f64 {
        1.0 - (2.0 * self.true_pos + DICE_EPS)
            / (2.0 * self.true_pos + self.false_pos + self.false_neg + DICE_EPS)
    }
}

/// Soft Dice loss over any matching pred/label shapes (one sample).
pub fn dice_loss(pred: &ArrayViewD<f64>, label: &ArrayViewD<f64>) -> f64 {
    debug_assert_eq!(pred.shape(), label.shape());
    ConfusionCounts::soft(pred, label).dice_loss()
}

/// Gradient of [`dice_loss`] w.r.t. each predicted probability:
/// `dL/dp_i = -(2 t_i D - N) / D^2` with `N = 2Σpt + eps`, `D = Σp + Σt + eps`.
pub fn dice_loss_grad(pred: &ArrayViewD<f64>, label: &ArrayViewD<f64>) -> ArrayD<f64> {
    let mut sum_pt = 0.0;
    let mut sum_p = 0.0;
    let mut sum_t = 0.0;
    for (&p, &t) in pred.iter().zip(label.iter()) {
        sum_pt += p * t;
        sum_p += p;
        sum_t += t;
    }
    let n = 2.0 * sum_pt + DICE_EPS;
    let d = sum_p + sum_t + DICE_EPS;
    let mut grad = ArrayD::zeros(pred.raw_dim());
    for (g, &t) in grad.iter_mut().zip(label.iter()) {
        *g = -(2.0 * t * d - n) / (d * d);
    }
    grad
}

/// Mean negative log-likelihood. `pred` rows are distributions, `targets`
/// their true class indices; the log is floored at [`LOG_FLOOR`].
pub fn cross_entropy(pred: &ArrayView2<f64>, targets: &[usize]) -> f64 {
    debug_assert_eq!(pred.nrows(), targets.len());
    let n = pred.nrows() as f64;
    let mut sum = 0.0;
    for (row, &t) in pred.axis_iter(Axis(0)).zip(targets.iter()) {
        sum -= row[t].max(LOG_FLOOR).ln();
    }
    sum / n
}

/// Gradient of [`cross_entropy`] w.r.t. the probabilities: `-1/(n p)` at the
/// target entry (zero where the floor is active — the loss is constant there).
pub fn cross_entropy_grad(pred: &ArrayView2<f64>, targets: &[usize]) -> Array2<f64> {
    let n = pred.nrows() as f64;
    let mut grad = Array2::zeros(pred.raw_dim());
    for (i, &t) in targets.iter().enumerate() {
        let p = pred[[i, t]];
        if p > LOG_FLOOR {
            grad[[i, t]] = -1.0 / (n * p);
        }
    }
    grad
}

/// Classifier posterior with validated normalisation, paired with its fixed
/// uniform target `q_i = 1/N_d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierPosterior {
    p: Vec<f64>,
}

impl ClassifierPosterior {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.len() < 2 {
            return Err(Error::TooFewDomains(p.len()));
        }
        if p.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(Error::EmptySample("posterior (negative or non-finite entry)"));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::EmptySample("posterior (entries do not sum to 1)"));
        }
        Ok(ClassifierPosterior { p })
    }

    pub fn probs(&self) -> &[f64] {
        &self.p
    }

    /// The fixed target: uniform over classes.
    pub fn target(&self) -> Vec<f64> {
        vec![1.0 / self.p.len() as f64; self.p.len()]
    }
}

/// `KL(P || U) = Σ p_i ln(p_i N)` for one posterior, with `0 ln 0 = 0`.
/// Zero iff `p` is uniform; `ln N` at a one-hot vertex.
pub fn confusion_loss(post: &ClassifierPosterior) -> f64 {
    kl_to_uniform(post.probs())
}

fn kl_to_uniform(p: &[f64]) -> f64 {
    let n = p.len() as f64;
    p.iter().map(|&v| if v > 0.0 { v * (v * n).ln() } else { 0.0 }).sum()
}

/// Batch confusion loss: mean of per-row `KL(P || U)`.
pub fn confusion_loss_batch(p: &ArrayView2<f64>) -> f64 {
    let b = p.nrows() as f64;
    p.axis_iter(Axis(0)).map(|row| kl_to_uniform(row.as_slice().unwrap())).sum::<f64>() / b
}

/// Gradient of [`confusion_loss_batch`]: `(ln(p_i N) + 1) / B`, with the
/// probability floored at [`LOG_FLOOR`] inside the log (softmax outputs are
/// strictly positive, so the floor only guards pathological inputs).
pub fn confusion_loss_grad(p: &ArrayView2<f64>) -> Array2<f64> {
    let b = p.nrows() as f64;
    let n = p.ncols() as f64;
    let mut grad = Array2::zeros(p.raw_dim());
    for (g, &v) in grad.iter_mut().zip(p.iter()) {
        *g = ((v.max(LOG_FLOOR) * n).ln() + 1.0) / b;
    }
    grad
}

/// Segmentation loss: per-sample soft Dice on the foreground channel (mean
/// over the batch) plus voxel-wise cross-entropy (mean over batch x voxels).
///
/// `probs` is `[batch, 2, x, y, z]` with channels summing to one; `labels` is
/// `[batch, x, y, z]` binary.
pub fn segmentation_loss(probs: &Array5<f64>, labels: &Array4<u8>) -> f64 {
    segmentation_loss_and_grad(probs, labels).0
}

/// Loss plus gradient w.r.t. every probability entry (both channels).
pub fn segmentation_loss_and_grad(probs: &Array5<f64>, labels: &Array4<u8>) -> (f64, Array5<f64>) {
    let (bs, ch, xs, ys, zs) = probs.dim();
    debug_assert_eq!(ch, 2);
    debug_assert_eq!(labels.dim(), (bs, xs, ys, zs));
    let voxels = (xs * ys * zs) as f64;
    let bsf = bs as f64;

    let mut grad = Array5::<f64>::zeros(probs.raw_dim());
    let mut dice_total = 0.0;
    let mut ce_total = 0.0;
    for bi in 0..bs {
        let fg = probs.index_axis(Axis(0), bi);
        let fg = fg.index_axis(Axis(0), 1);
        let lab = labels.index_axis(Axis(0), bi);
        let lab_f: ArrayD<f64> = lab.mapv(|v| v as f64).into_dyn();
        let fg_dyn = fg.to_owned().into_dyn();

        dice_total += dice_loss(&fg_dyn.view(), &lab_f.view());
        let dgrad = dice_loss_grad(&fg_dyn.view(), &lab_f.view());
        // Dice touches only the foreground channel; scale by the batch mean.
        {
            let mut gfg = grad.index_axis_mut(Axis(0), bi);
            let mut gfg = gfg.index_axis_mut(Axis(0), 1);
            for (g, &d) in gfg.iter_mut().zip(dgrad.iter()) {
                *g += d / bsf;
            }
        }
        // Voxel-wise CE over both channels.
        for x in 0..xs {
            for y in 0..ys {
                for z in 0..zs {
                    let t = lab[[x, y, z]] as usize;
                    let p = probs[[bi, t, x, y, z]];
                    ce_total -= p.max(LOG_FLOOR).ln();
                    if p > LOG_FLOOR {
                        grad[[bi, t, x, y, z]] += -1.0 / (bsf * voxels * p);
                    }
                }
            }
        }
    }
    (dice_total / bsf + ce_total / (bsf * voxels), grad)
}

/// Row-wise softmax in `f64` (reference path for loss plumbing and the
/// finite-difference tests that differentiate through it).
pub fn softmax_rows_f64(logits: &ArrayView2<f64>) -> Array2<f64> {
    let mut p = logits.to_owned();
    for mut row in p.axis_iter_mut(Axis(0)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    p
}

/// Jacobian-vector product of [`softmax_rows_f64`]:
/// `dlogits = p .* (dp - <dp, p>)` per row.
pub fn softmax_rows_f64_backward(p: &ArrayView2<f64>, dp: &ArrayView2<f64>) -> Array2<f64> {
    let mut dl = Array2::zeros(p.raw_dim());
    for ((mut out, pr), dpr) in dl
        .axis_iter_mut(Axis(0))
        .zip(p.axis_iter(Axis(0)))
        .zip(dp.axis_iter(Axis(0)))
    {
        let dot: f64 = pr.iter().zip(dpr.iter()).map(|(&a, &b)| a * b).sum();
        for ((o, &pv), &dv) in out.iter_mut().zip(pr.iter()).zip(dpr.iter()) {
            *o = pv * (dv - dot);
        }
    }
    dl
}
