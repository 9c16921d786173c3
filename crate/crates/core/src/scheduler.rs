//! The learning–unlearning state machine.
//!
//! Every training iteration runs up to three phases, planned here and
//! executed in a fixed order:
//!
//! 1. a segmentation step (always);
//! 2. one training step per domain classifier, on taps detached from the
//!    encoder;
//! 3. for stages whose classifier has stayed *too good for too long*, an
//!    unlearning step: a fresh encoder-only forward pass, the confusion loss
//!    at that stage's tap, and a backward pass that updates only encoder
//!    stages `1..=x` while the classifier stays frozen.
//!
//! "Too good for too long" is the self-supervised trigger: a per-stage
//! counter increments whenever the stage's (windowed) domain accuracy
//! exceeds the acceptance bound `UBA = 1/N_d + Tol` and resets to zero
//! otherwise; the stage unlearns while the counter exceeds the patience.
//! During warm-up epochs nothing is unlearned and no counters move. The
//! alternative fixed-ratio mode ignores accuracies entirely and unlearns
//! all configured stages on a strict learn:unlearn cadence.

use std::collections::{BTreeMap, VecDeque};

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, ScheduleMode};
use crate::error::{Error, Result};
use crate::losses::{
    confusion_loss_batch, confusion_loss_grad, cross_entropy, cross_entropy_grad,
    segmentation_loss_and_grad,
};
use crate::model::{batch_accuracy, DomainClassifier, EncoderPrefix, SegNet, StageFeatureTap};
use crate::nn::{Adam, Feat, Sgd, VisitParams};

/// Rolling mean of the last `window` per-batch accuracies. Single-batch
/// accuracy on a small balanced batch is too quantised to compare against
/// the acceptance bound, so the trigger sees this mean instead — and only
/// once the window is full ([`AccuracyWindow::mean`] is `None` before that).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccuracyWindow {
    window: usize,
    values: VecDeque<f64>,
}

impl AccuracyWindow {
    pub fn new(window: usize) -> Self {
        assert!(window >= 1);
        AccuracyWindow { window, values: VecDeque::with_capacity(window) }
    }

    pub fn push(&mut self, acc: f64) {
        if self.values.len() == self.window {
            self.values.pop_front();
        }
        self.values.push_back(acc);
    }

    pub fn mean(&self) -> Option<f64> {
        (self.values.len() == self.window)
            .then(|| self.values.iter().sum::<f64>() / self.window as f64)
    }

    pub fn clear(&mut self) {
        self.values.clear();
    }
}

/// Everything the trigger logic carries between planning calls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerState {
    /// Current epoch, 1-based; epochs `1..=warmup_epochs` are warm-up.
    pub epoch: usize,
    /// Consecutive-above-bound counts, one per configured unlearn stage.
    pub counters: BTreeMap<usize, usize>,
    /// Accuracy each stage was last tested with.
    pub last_acc: BTreeMap<usize, f64>,
    pub mode: ScheduleMode,
    /// Post-warm-up planning calls so far (drives the fixed-ratio cadence).
    pub fixed_step: usize,
}

impl SchedulerState {
    pub fn new(cfg: &RunConfig) -> Self {
        SchedulerState {
            epoch: 0,
            counters: cfg.unlearn_stages.iter().map(|&s| (s, 0)).collect(),
            last_acc: BTreeMap::new(),
            mode: cfg.schedule.clone(),
            fixed_step: 0,
        }
    }
}

/// What one training iteration should do.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepPlan {
    pub do_segmentation_step: bool,
    /// Stages whose classifiers train this step (always all of them).
    pub train_classifier_stages: Vec<usize>,
    /// Stages to unlearn this step; always a subset of `cfg.unlearn_stages`,
    /// and empty during warm-up.
    pub unlearn_stages_now: Vec<usize>,
}

/// Decide what the next iteration does and advance the trigger state.
///
/// `accs[i]` is the accuracy reading for stage `i + 1` (a windowed mean; the
/// caller feeds 0.0 while its window is still filling, which safely reads as
/// "not above the bound"). Pure: identical inputs give identical outputs.
pub fn plan_step(state: &SchedulerState, cfg: &RunConfig, accs: &[f64]) -> (StepPlan, SchedulerState) {
    assert_eq!(accs.len(), cfg.encoder_depth);
    assert!(accs.iter().all(|a| (0.0..=1.0).contains(a)), "accuracies outside [0, 1]");

    let mut next = state.clone();
    for (i, &a) in accs.iter().enumerate() {
        next.last_acc.insert(i + 1, a);
    }

    let mut fire: Vec<usize> = Vec::new();
    if state.epoch > cfg.warmup_epochs {
        match cfg.schedule {
            ScheduleMode::SelfSupervised => {
                let uba = cfg.uba().expect("validated config");
                for &stage in &cfg.unlearn_stages {
                    let counter = next.counters.entry(stage).or_insert(0);
                    if accs[stage - 1] > uba {
                        *counter += 1;
                    } else {
                        *counter = 0;
                    }
                    if *counter > cfg.patience {
                        fire.push(stage);
                    }
                }
            }
            ScheduleMode::FixedRatio { learn_steps, unlearn_steps } => {
                let period = learn_steps + unlearn_steps;
                if next.fixed_step % period >= learn_steps {
                    fire = cfg.unlearn_stages.clone();
                }
                next.fixed_step += 1;
            }
        }
    }
    fire.sort_unstable();

    let plan = StepPlan {
        do_segmentation_step: true,
        train_classifier_stages: (1..=cfg.encoder_depth).collect(),
        unlearn_stages_now: fire,
    };
    (plan, next)
}

/// One balanced training batch.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    /// `[batch, 1, x, y, z]`.
    pub images: Feat,
    /// Binary labels, `[batch, x, y, z]`.
    pub labels: Array4<u8>,
    /// Domain index per batch element.
    pub domains: Vec<usize>,
}

/// The three optimisers a run carries. Unlearning deliberately uses plain
/// SGD without momentum: stages outside the updated prefix accumulate zero
/// gradient and are therefore provably untouched by an unlearning step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimBundle {
    pub seg: Sgd,
    pub classifiers: Vec<Adam>,
    pub unlearn: Sgd,
}

impl OptimBundle {
    pub fn new(cfg: &RunConfig) -> Self {
        let o = &cfg.optim;
        OptimBundle {
            seg: Sgd::new(o.seg_lr, o.seg_momentum, o.seg_nesterov)
                .with_poly_decay(o.seg_poly_power, cfg.epochs * cfg.iters_per_epoch),
            classifiers: vec![Adam::new(o.classifier_lr); cfg.encoder_depth],
            unlearn: Sgd::new(o.unlearn_lr, 0.0, false),
        }
    }
}

/// Losses and accuracies produced by one executed iteration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepOutcome {
    pub seg_loss: f64,
    /// Per-stage classifier cross-entropy, index = stage − 1.
    pub classifier_loss: Vec<f64>,
    /// Per-stage single-batch domain accuracy, index = stage − 1.
    pub accuracy: Vec<f64>,
    /// `(stage, confusion loss)` for every unlearning step taken.
    pub confusion: Vec<(usize, f64)>,
}

/// Segmentation phase: forward, loss, backward, optimiser step. Returns the
/// loss and the detached taps for the classifier phase.
pub fn segmentation_substep(
    net: &mut SegNet,
    batch: &TrainBatch,
    opt: &mut Sgd,
    epoch: usize,
    iter: usize,
) -> Result<(f64, Vec<StageFeatureTap>)> {
    net.zero_grad();
    let (probs, taps, cache) = net.forward_segmentation(&batch.images)?;
    let probs64 = probs.mapv(f64::from);
    let (loss, grad) = segmentation_loss_and_grad(&probs64, &batch.labels);
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { what: "segmentation loss", epoch, iter });
    }
    let dprobs = grad.mapv(|v| v as f32);
    net.backward_segmentation(&cache, &dprobs);
    opt.step(net);
    Ok((loss, taps))
}

/// Classifier phase for one stage: cross-entropy on a detached tap, updating
/// the classifier only. Returns `(loss, batch accuracy)`; the accuracy is
/// measured before the update.
pub fn classifier_substep(
    clf: &mut DomainClassifier,
    tap: &StageFeatureTap,
    domains: &[usize],
    opt: &mut Adam,
    epoch: usize,
    iter: usize,
) -> Result<(f64, f64)> {
    let (probs, cache) = clf.forward(tap)?;
    let acc = batch_accuracy(&probs, domains);
    let probs64 = probs.mapv(f64::from);
    let loss = cross_entropy(&probs64.view(), domains);
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { what: "classifier loss", epoch, iter });
    }
    let dprobs = cross_entropy_grad(&probs64.view(), domains).mapv(|v| v as f32);
    clf.zero_grad();
    clf.backward(&cache, &dprobs)?;
    opt.step(clf);
    Ok((loss, acc))
}

/// Unlearning phase for one stage: a fresh encoder-only forward pass, the
/// confusion loss at the stage's tap, backward through the frozen classifier
/// (`&DomainClassifier` — it cannot change), then an optimiser step over
/// encoder stages `1..=stage` only.
pub fn unlearn_substep(
    net: &mut SegNet,
    clf: &DomainClassifier,
    images: &Feat,
    stage: usize,
    opt: &mut Sgd,
    epoch: usize,
    iter: usize,
) -> Result<f64> {
    let (taps, enc_cache) = net.forward_encoder(images, false)?;
    let (probs, cache) = clf.forward(&taps[stage - 1])?;
    let probs64 = probs.mapv(f64::from);
    let loss = confusion_loss_batch(&probs64.view());
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { what: "confusion loss", epoch, iter });
    }
    let dprobs = confusion_loss_grad(&probs64.view()).mapv(|v| v as f32);
    let dtap = clf.backward_data(&cache, &dprobs)?;

    let mut prefix = EncoderPrefix { net, max_stage: stage };
    prefix.zero_grad();
    prefix.net.backward_encoder_prefix(&enc_cache, stage, &dtap);
    opt.step(&mut prefix);
    Ok(loss)
}

/// Run one planned iteration: segmentation, then every classifier, then any
/// unlearning the plan calls for (each unlearned stage gets its own fresh
/// forward pass, so it sees the effect of the previous stage's update).
pub fn execute_step(
    plan: &StepPlan,
    net: &mut SegNet,
    classifiers: &mut [DomainClassifier],
    batch: &TrainBatch,
    opts: &mut OptimBundle,
    epoch: usize,
    iter: usize,
) -> Result<StepOutcome> {
    let depth = net.depth;
    assert_eq!(classifiers.len(), depth);
    assert_eq!(batch.images.dim().0, batch.domains.len());

    let (seg_loss, taps) = if plan.do_segmentation_step {
        segmentation_substep(net, batch, &mut opts.seg, epoch, iter)?
    } else {
        let (taps, _) = net.forward_encoder(&batch.images, true)?;
        (0.0, taps)
    };

    let mut classifier_loss = vec![0.0; depth];
    let mut accuracy = vec![0.0; depth];
    for &stage in &plan.train_classifier_stages {
        let (loss, acc) = classifier_substep(
            &mut classifiers[stage - 1],
            &taps[stage - 1],
            &batch.domains,
            &mut opts.classifiers[stage - 1],
            epoch,
            iter,
        )?;
        classifier_loss[stage - 1] = loss;
        accuracy[stage - 1] = acc;
    }

    let mut confusion = Vec::new();
    for &stage in &plan.unlearn_stages_now {
        let loss = unlearn_substep(
            net,
            &classifiers[stage - 1],
            &batch.images,
            stage,
            &mut opts.unlearn,
            epoch,
            iter,
        )?;
        confusion.push((stage, loss));
    }

    Ok(StepOutcome { seg_loss, classifier_loss, accuracy, confusion })
}
