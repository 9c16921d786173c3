//! Run orchestration: the epoch loop, validation, checkpointing, resume,
//! and the inference driver.
//!
//! A run writes three things into its output directory:
//!
//! * `events.jsonl` — one JSON event per line (run start, epoch starts,
//!   every optimisation step with its losses/accuracies, validations,
//!   checkpoint saves). Two runs with the same config and seed produce
//!   identical logs, and a resumed run reproduces the uninterrupted run's
//!   log suffix byte for byte.
//! * `latest.ckpt` — the full state after the most recent epoch: weights,
//!   optimiser state (momenta, decay step), scheduler state, accuracy
//!   windows, sampler cursors, validation history, config. Written
//!   atomically (temp file, then rename) after every epoch.
//! * `best.ckpt` — the state at the best validation DSC so far.
//!
//! Randomness is stream-keyed, never carried: patch positions and
//! augmentation draws come from `stream(seed, purpose, [epoch, iter,
//! slot])`, so a resumed run consumes exactly the draws the uninterrupted
//! run would have.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{validate_config, RunConfig};
use crate::error::{Error, Result};
use crate::manifest::{indices_by_domain, DatasetManifest, Split};
use crate::metrics::dsc;
use crate::model::{predict_with_mirroring, stage_channels, DomainClassifier, SegNet};
use crate::nn::Feat;
use crate::rng::stream;
use crate::sampler::BalancedSampler;
use crate::scheduler::{
    execute_step, plan_step, AccuracyWindow, OptimBundle, SchedulerState, TrainBatch,
};
use crate::volume::VolumeSample;
use crate::{augment, config};

/// One validation measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValRecord {
    pub epoch: usize,
    pub mean_dsc: f64,
}

/// Everything needed to reproduce or continue a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Last completed epoch (0 = freshly initialised).
    pub epoch: usize,
    pub net: SegNet,
    pub classifiers: Vec<DomainClassifier>,
    pub optim: OptimBundle,
    pub scheduler: SchedulerState,
    /// Per-stage windowed classifier accuracy, index = stage − 1.
    pub windows: Vec<AccuracyWindow>,
    pub sampler: BalancedSampler,
    pub val_history: Vec<ValRecord>,
    pub best_val_dsc: f64,
    pub best_epoch: usize,
}

/// One line of `events.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    RunStart {
        seed: u64,
        epochs: usize,
        warmup_epochs: usize,
        iters_per_epoch: usize,
        acc_window: usize,
        tolerance: f64,
        domains: Vec<String>,
    },
    EpochStart { epoch: usize },
    Step {
        epoch: usize,
        iter: usize,
        seg_loss: f64,
        /// Per-stage classifier cross-entropy, index = stage − 1.
        classifier_loss: Vec<f64>,
        /// Per-stage single-batch accuracy, index = stage − 1.
        accuracy: Vec<f64>,
        /// Windowed accuracies the plan saw (0.0 while a window fills).
        windowed: Vec<f64>,
        /// Stages unlearned this step with their confusion losses.
        confusion: Vec<(usize, f64)>,
    },
    Validation { epoch: usize, mean_dsc: f64, cases: usize },
    CheckpointSaved { epoch: usize, best: bool },
}

/// Write `ckpt` atomically: serialise to `<path>.tmp`, then rename.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = bincode::serialize(ckpt).map_err(|e| Error::CheckpointDecode(e.to_string()))?;
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::file(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::file(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    bincode::deserialize(&bytes).map_err(|e| Error::CheckpointDecode(e.to_string()))
}

/// Cut a training patch out of a (possibly augmented) sample. With
/// probability `foreground_bias` (and a non-empty label) the patch is
/// centred on a uniformly chosen foreground voxel — tiny lesions vanish
/// from pure uniform sampling — otherwise the origin is uniform over all
/// valid positions. Volumes smaller than the patch are zero-padded first.
fn extract_patch(
    image: &Array3<f32>,
    label: &Array3<u8>,
    patch: [usize; 3],
    foreground_bias: f64,
    rng: &mut ChaCha8Rng,
) -> (Array3<f32>, Array3<u8>) {
    let dim = image.dim();
    let shape = [dim.0, dim.1, dim.2];
    let padded: [usize; 3] = std::array::from_fn(|a| shape[a].max(patch[a]));
    let (image, label) = if padded != shape {
        (
            crate::volume::crop_pad(image, padded, 0.0),
            crate::volume::crop_pad(label, padded, 0u8),
        )
    } else {
        (image.clone(), label.clone())
    };

    let foreground: Vec<[usize; 3]> = if rng.random_range(0.0..1.0) < foreground_bias {
        label
            .indexed_iter()
            .filter(|(_, &v)| v != 0)
            .map(|((x, y, z), _)| [x, y, z])
            .collect()
    } else {
        Vec::new()
    };

    let origin: [usize; 3] = if foreground.is_empty() {
        std::array::from_fn(|a| rng.random_range(0..=padded[a] - patch[a]))
    } else {
        let centre = foreground[rng.random_range(0..foreground.len())];
        std::array::from_fn(|a| {
            centre[a].saturating_sub(patch[a] / 2).min(padded[a] - patch[a])
        })
    };

    let span = |a: usize| origin[a]..origin[a] + patch[a];
    (
        image.slice(ndarray::s![span(0), span(1), span(2)]).to_owned(),
        label.slice(ndarray::s![span(0), span(1), span(2)]).to_owned(),
    )
}

/// Assemble one balanced batch: per slot, cut a patch, then augment it
/// (patch-then-augment keeps the spatial resampling cheap). Both draws use
/// streams keyed by `(epoch, iter, slot)`, so the batch content depends only
/// on the sampler's picks and the seed.
fn assemble_batch(
    samples: &[VolumeSample],
    picks: &[usize],
    cfg: &RunConfig,
    epoch: usize,
    iter: usize,
) -> TrainBatch {
    let p = cfg.patch_size;
    let mut images = Feat::zeros((picks.len(), 1, p[0], p[1], p[2]));
    let mut labels = Array4::<u8>::zeros((picks.len(), p[0], p[1], p[2]));
    let mut domains = Vec::with_capacity(picks.len());
    for (slot, &pick) in picks.iter().enumerate() {
        let s = &samples[pick];
        let key = [epoch as u64, iter as u64, slot as u64];
        let mut patch_rng = stream(cfg.seed, "patch", &key);
        let (img, lab) = extract_patch(&s.image, &s.label, p, cfg.foreground_bias, &mut patch_rng);
        let cut = VolumeSample {
            case_id: s.case_id.clone(),
            image: img,
            label: lab,
            domain: s.domain,
        };
        let mut aug_rng = stream(cfg.seed, "augment", &key);
        let out = augment::augment(&cut, &cfg.augment, &mut aug_rng);
        images.slice_mut(ndarray::s![slot, 0, .., .., ..]).assign(&out.image);
        labels.slice_mut(ndarray::s![slot, .., .., ..]).assign(&out.label);
        domains.push(s.domain);
    }
    TrainBatch { images, labels, domains }
}

/// Mean validation DSC over `samples` using full-volume mirrored inference.
pub fn validation_dsc(net: &SegNet, samples: &[VolumeSample], patch: [usize; 3]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptySample("validation"));
    }
    let mut total = 0.0;
    for s in samples {
        let mask = infer_volume(net, &s.image, patch)?;
        total += dsc(&mask, &s.label);
    }
    Ok(total / samples.len() as f64)
}

/// Segment one volume: mirror-ensembled sliding-window foreground
/// probabilities, then a per-voxel argmax (foreground wins strictly above
/// one half).
pub fn infer_volume(net: &SegNet, image: &Array3<f32>, patch: [usize; 3]) -> Result<Array3<u8>> {
    let probs = predict_with_mirroring(net, image, patch)?;
    Ok(probs.mapv(|p| u8::from(p > 0.5)))
}

/// Segment a list of volumes with a checkpoint's network and patch size.
pub fn infer(ckpt: &Checkpoint, volumes: &[Array3<f32>]) -> Result<Vec<Array3<u8>>> {
    volumes.iter().map(|v| infer_volume(&ckpt.net, v, ckpt.config.patch_size)).collect()
}

/// Per-stage domain-classifier accuracy on held-out cases: each volume is
/// centre-cropped (or padded) to the patch size, pushed through the encoder,
/// and every stage's tap is scored by its classifier against the true
/// domain. Index = stage − 1.
pub fn heldout_stage_accuracy(
    net: &SegNet,
    classifiers: &[DomainClassifier],
    samples: &[VolumeSample],
    patch: [usize; 3],
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::EmptySample("held-out accuracy"));
    }
    let mut images = Feat::zeros((samples.len(), 1, patch[0], patch[1], patch[2]));
    let domains: Vec<usize> = samples.iter().map(|s| s.domain).collect();
    for (i, s) in samples.iter().enumerate() {
        let cropped = crate::volume::crop_pad(&s.image, patch, 0.0);
        images.slice_mut(ndarray::s![i, 0, .., .., ..]).assign(&cropped);
    }
    let (taps, _) = net.forward_encoder(&images, true)?;
    classifiers
        .iter()
        .zip(&taps)
        .map(|(c, tap)| {
            let probs = c.classify_domain(tap)?;
            crate::metrics::classifier_accuracy(&probs, &domains)
        })
        .collect()
}

fn load_splits(
    manifest: &DatasetManifest,
    domains: &crate::config::DomainSet,
) -> Result<(Vec<VolumeSample>, Vec<VolumeSample>)> {
    Ok((
        manifest.load_split(Split::Train, domains)?,
        manifest.load_split(Split::Val, domains)?,
    ))
}

/// Paths produced by a finished run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub latest_path: PathBuf,
    pub best_path: PathBuf,
    pub events_path: PathBuf,
}

/// A live training run. Construct with [`Trainer::new`] (fresh) or
/// [`Trainer::resume`], then call [`Trainer::run`] — or [`Trainer::epoch`]
/// repeatedly for finer control (the epoch granularity is what checkpoints
/// capture).
pub struct Trainer {
    ckpt: Checkpoint,
    train_samples: Vec<VolumeSample>,
    val_samples: Vec<VolumeSample>,
    out_dir: PathBuf,
    log: fs::File,
}

impl Trainer {
    /// Validate everything, initialise weights from the config seed, and
    /// open a fresh event log in `out_dir`.
    pub fn new(cfg: &RunConfig, manifest: &DatasetManifest, out_dir: &Path) -> Result<Self> {
        let cfg = validate_config(cfg)?;
        let domains = cfg.domain_set()?;
        manifest.validate(&domains, cfg.batch_size)?;
        let (train_samples, val_samples) = load_splits(manifest, &domains)?;

        let mut net_rng = stream(cfg.seed, "init-net", &[]);
        let net = SegNet::new(cfg.encoder_depth, cfg.base_channels, cfg.channel_cap, &mut net_rng);
        let classifiers = (1..=cfg.encoder_depth)
            .map(|s| {
                let mut rng = stream(cfg.seed, "init-classifier", &[s as u64]);
                DomainClassifier::new(
                    s,
                    stage_channels(cfg.base_channels, cfg.channel_cap, s),
                    cfg.patch_size[0] >> (s - 1),
                    domains.len(),
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;

        let sampler = BalancedSampler::new(
            &indices_by_domain(&train_samples, domains.len()),
            cfg.batch_size,
            cfg.seed,
        )?;

        let ckpt = Checkpoint {
            epoch: 0,
            net,
            classifiers,
            optim: OptimBundle::new(&cfg),
            scheduler: SchedulerState::new(&cfg),
            windows: vec![AccuracyWindow::new(cfg.acc_window); cfg.encoder_depth],
            sampler,
            val_history: Vec::new(),
            best_val_dsc: f64::NEG_INFINITY,
            best_epoch: 0,
            config: cfg,
        };
        let mut t = Self::open(ckpt, train_samples, val_samples, out_dir, false)?;
        let start = {
            let c = &t.ckpt.config;
            Event::RunStart {
                seed: c.seed,
                epochs: c.epochs,
                warmup_epochs: c.warmup_epochs,
                iters_per_epoch: c.iters_per_epoch,
                acc_window: c.acc_window,
                tolerance: c.tolerance,
                domains: c.domains.clone(),
            }
        };
        t.emit(&start)?;
        Ok(t)
    }

    /// Continue a checkpointed run. The config, weights, optimiser state and
    /// sampler cursors all come from the checkpoint; the event log in
    /// `out_dir` is appended to (or created).
    pub fn resume(
        ckpt_path: &Path,
        manifest: &DatasetManifest,
        out_dir: &Path,
    ) -> Result<Self> {
        let ckpt = load_checkpoint(ckpt_path)?;
        let cfg = validate_config(&ckpt.config)?;
        let domains = cfg.domain_set()?;
        manifest.validate(&domains, cfg.batch_size)?;
        let (train_samples, val_samples) = load_splits(manifest, &domains)?;
        Self::open(ckpt, train_samples, val_samples, out_dir, true)
    }

    fn open(
        ckpt: Checkpoint,
        train_samples: Vec<VolumeSample>,
        val_samples: Vec<VolumeSample>,
        out_dir: &Path,
        append: bool,
    ) -> Result<Self> {
        fs::create_dir_all(out_dir).map_err(|e| Error::file(out_dir, e))?;
        let events = out_dir.join("events.jsonl");
        let log = fs::OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(&events)
            .map_err(|e| Error::file(&events, e))?;
        Ok(Trainer {
            ckpt,
            train_samples,
            val_samples,
            out_dir: out_dir.to_path_buf(),
            log,
        })
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.ckpt
    }

    fn emit(&mut self, event: &Event) -> Result<()> {
        let line = serde_json::to_string(event)?;
        writeln!(self.log, "{line}").map_err(Error::Io)
    }

    /// Run one epoch (all iterations, then any validation due, then the
    /// checkpoint writes). Returns `false` once every configured epoch has
    /// completed.
    pub fn epoch(&mut self) -> Result<bool> {
        let cfg = self.ckpt.config.clone();
        if self.ckpt.epoch >= cfg.epochs {
            return Ok(false);
        }
        let epoch = self.ckpt.epoch + 1;
        self.ckpt.scheduler.epoch = epoch;
        self.emit(&Event::EpochStart { epoch })?;

        for iter in 1..=cfg.iters_per_epoch {
            let windowed: Vec<f64> =
                self.ckpt.windows.iter().map(|w| w.mean().unwrap_or(0.0)).collect();
            let (plan, next) = plan_step(&self.ckpt.scheduler, &cfg, &windowed);
            self.ckpt.scheduler = next;

            let picks = self.ckpt.sampler.next_batch();
            let batch = assemble_batch(&self.train_samples, &picks, &cfg, epoch, iter);
            let outcome = execute_step(
                &plan,
                &mut self.ckpt.net,
                &mut self.ckpt.classifiers,
                &batch,
                &mut self.ckpt.optim,
                epoch,
                iter,
            )?;

            // Windows only collect post-warm-up readings: the acceptance
            // bound is tested on the steady state, not the ramp.
            if epoch > cfg.warmup_epochs {
                for (w, &acc) in self.ckpt.windows.iter_mut().zip(&outcome.accuracy) {
                    w.push(acc);
                }
            }

            self.emit(&Event::Step {
                epoch,
                iter,
                seg_loss: outcome.seg_loss,
                classifier_loss: outcome.classifier_loss,
                accuracy: outcome.accuracy,
                windowed,
                confusion: outcome.confusion,
            })?;
        }
        self.ckpt.epoch = epoch;

        // Validation at the configured cadence, at the end of warm-up, and
        // at the final epoch.
        if epoch % cfg.val_every == 0 || epoch == cfg.warmup_epochs || epoch == cfg.epochs {
            let mean_dsc =
                validation_dsc(&self.ckpt.net, &self.val_samples, cfg.patch_size)?;
            self.ckpt.val_history.push(ValRecord { epoch, mean_dsc });
            self.emit(&Event::Validation {
                epoch,
                mean_dsc,
                cases: self.val_samples.len(),
            })?;
            if mean_dsc > self.ckpt.best_val_dsc {
                self.ckpt.best_val_dsc = mean_dsc;
                self.ckpt.best_epoch = epoch;
                save_checkpoint(&self.ckpt, &self.out_dir.join("best.ckpt"))?;
                self.emit(&Event::CheckpointSaved { epoch, best: true })?;
            }
        }

        save_checkpoint(&self.ckpt, &self.out_dir.join("latest.ckpt"))?;
        self.emit(&Event::CheckpointSaved { epoch, best: false })?;
        Ok(self.ckpt.epoch < cfg.epochs)
    }

    /// Run every remaining epoch and return the final state and paths.
    pub fn run(mut self) -> Result<TrainOutcome> {
        while self.epoch()? {}
        Ok(TrainOutcome {
            latest_path: self.out_dir.join("latest.ckpt"),
            best_path: self.out_dir.join("best.ckpt"),
            events_path: self.out_dir.join("events.jsonl"),
            checkpoint: self.ckpt,
        })
    }
}

/// Train from scratch, or continue from `resume`, until every epoch is done.
pub fn train(
    cfg: &RunConfig,
    manifest: &DatasetManifest,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    let trainer = match resume {
        None => Trainer::new(cfg, manifest, out_dir)?,
        Some(path) => {
            let t = Trainer::resume(path, manifest, out_dir)?;
            if t.checkpoint().config != config::validate_config(cfg)? {
                return Err(Error::CheckpointMismatch(
                    "checkpoint config differs from --config".to_string(),
                ));
            }
            t
        }
    };
    trainer.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{default_domain_specs, write_dataset, SplitCounts};
    use tempfile::tempdir;

    /// A desk-scale config for 16³ volumes: depth 2, 16³ patches.
    fn tiny_config() -> RunConfig {
        RunConfig {
            seed: 40,
            encoder_depth: 2,
            patch_size: [16, 16, 16],
            base_channels: 4,
            channel_cap: 8,
            epochs: 2,
            warmup_epochs: 1,
            iters_per_epoch: 2,
            batch_size: 2,
            val_every: 1,
            unlearn_stages: vec![2],
            ..RunConfig::default()
        }
    }

    fn tiny_dataset(dir: &Path, seed: u64) -> DatasetManifest {
        write_dataset(
            dir,
            &default_domain_specs(),
            SplitCounts { train: 2, val: 1, test: 1 },
            [16, 16, 16],
            seed,
        )
        .unwrap()
    }

    fn read_events(path: &Path) -> Vec<String> {
        std::fs::read_to_string(path)
            .unwrap()
            .lines()
            .map(str::to_string)
            .collect()
    }

    #[test]
    fn warmup_only_run_never_unlearns() {
        let data = tempdir().unwrap();
        let out = tempdir().unwrap();
        let manifest = tiny_dataset(data.path(), 1);
        let cfg = RunConfig { epochs: 1, warmup_epochs: 1, ..tiny_config() };
        let outcome = train(&cfg, &manifest, out.path(), None).unwrap();

        assert_eq!(outcome.checkpoint.epoch, 1);
        assert!(outcome.latest_path.exists());
        assert!(outcome.best_path.exists());
        let events = read_events(&outcome.events_path);
        let unlearn_steps = events
            .iter()
            .filter_map(|l| serde_json::from_str::<Event>(l).ok())
            .filter(|e| matches!(e, Event::Step { confusion, .. } if !confusion.is_empty()))
            .count();
        assert_eq!(unlearn_steps, 0, "warm-up must not unlearn");
        assert!(
            events.iter().any(|l| l.contains("\"validation\"")),
            "final epoch must validate"
        );
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_log_suffix() {
        let data = tempdir().unwrap();
        let manifest = tiny_dataset(data.path(), 2);
        let cfg = RunConfig { epochs: 4, ..tiny_config() };

        // Uninterrupted 4-epoch run.
        let full_dir = tempdir().unwrap();
        let full = train(&cfg, &manifest, full_dir.path(), None).unwrap();
        let full_events = read_events(&full.events_path);

        // The same run stopped after two epochs…
        let cut_dir = tempdir().unwrap();
        let mut t = Trainer::new(&cfg, &manifest, cut_dir.path()).unwrap();
        assert!(t.epoch().unwrap());
        assert!(t.epoch().unwrap());
        drop(t);

        // …and resumed into a fresh directory for the remaining two.
        let resumed_dir = tempdir().unwrap();
        let resumed = train(
            &cfg,
            &manifest,
            resumed_dir.path(),
            Some(&cut_dir.path().join("latest.ckpt")),
        )
        .unwrap();
        let resumed_events = read_events(&resumed.events_path);

        assert!(!resumed_events.is_empty());
        assert_eq!(
            resumed_events.as_slice(),
            &full_events[full_events.len() - resumed_events.len()..],
            "resumed log must equal the uninterrupted log's suffix"
        );
        // And the final weights agree bit-for-bit.
        assert_eq!(
            bincode::serialize(&resumed.checkpoint.net).unwrap(),
            bincode::serialize(&full.checkpoint.net).unwrap()
        );
    }

    #[test]
    fn resume_rejects_a_different_config() {
        let data = tempdir().unwrap();
        let manifest = tiny_dataset(data.path(), 3);
        let cfg = RunConfig { epochs: 2, ..tiny_config() };
        let out = tempdir().unwrap();
        train(&cfg, &manifest, out.path(), None).unwrap();

        let other = RunConfig { seed: 41, ..cfg };
        let again = tempdir().unwrap();
        assert!(matches!(
            train(&other, &manifest, again.path(), Some(&out.path().join("latest.ckpt"))),
            Err(Error::CheckpointMismatch(_))
        ));
    }

    #[test]
    fn overfits_its_own_training_data() {
        let data = tempdir().unwrap();
        // Validation == training cases: write the train split, then point
        // val entries at the same files.
        let manifest = write_dataset(
            data.path(),
            &default_domain_specs(),
            SplitCounts { train: 2, val: 1, test: 1 },
            [16, 16, 16],
            4,
        )
        .unwrap();
        let mut entries = manifest.entries().to_vec();
        for e in &mut entries {
            if e.split == Split::Val {
                let twin = manifest
                    .entries()
                    .iter()
                    .find(|t| t.split == Split::Train && t.domain == e.domain)
                    .unwrap();
                e.image = twin.image.clone();
                e.label = twin.label.clone();
            }
        }
        let manifest = DatasetManifest::new(entries, data.path());

        let cfg = RunConfig {
            epochs: 40,
            warmup_epochs: 40,
            iters_per_epoch: 4,
            val_every: 10,
            foreground_bias: 0.8,
            augment: crate::config::AugmentConfig::disabled(),
            ..tiny_config()
        };
        let out = tempdir().unwrap();
        let outcome = train(&cfg, &manifest, out.path(), None).unwrap();

        let final_dsc = outcome.checkpoint.val_history.last().unwrap().mean_dsc;
        assert!(
            outcome.checkpoint.best_val_dsc > 0.8,
            "training-identical validation should approach 1, best {} (history {:?})",
            outcome.checkpoint.best_val_dsc,
            outcome.checkpoint.val_history
        );
        // The best checkpoint dominates the final one by construction.
        assert!(outcome.checkpoint.best_val_dsc >= final_dsc);
        let best = load_checkpoint(&outcome.best_path).unwrap();
        assert_eq!(best.epoch, best.best_epoch);
        assert_eq!(best.best_val_dsc, outcome.checkpoint.best_val_dsc);
    }

    #[test]
    fn inference_is_deterministic_binary_and_shaped() {
        let data = tempdir().unwrap();
        let manifest = tiny_dataset(data.path(), 5);
        let cfg = RunConfig { epochs: 1, warmup_epochs: 1, ..tiny_config() };
        let out = tempdir().unwrap();
        let outcome = train(&cfg, &manifest, out.path(), None).unwrap();

        let domains = cfg.domain_set().unwrap();
        let test: Vec<_> = manifest.load_split(Split::Test, &domains).unwrap();
        let volumes: Vec<Array3<f32>> = test.iter().map(|s| s.image.clone()).collect();
        let a = infer(&outcome.checkpoint, &volumes).unwrap();
        let b = infer(&outcome.checkpoint, &volumes).unwrap();
        assert_eq!(a, b);
        for (mask, sample) in a.iter().zip(&test) {
            assert_eq!(mask.dim(), sample.image.dim());
            assert!(mask.iter().all(|&v| v <= 1));
        }
    }

    #[test]
    fn patches_respect_foreground_bias_extremes() {
        let mut label = Array3::<u8>::zeros((24, 24, 24));
        label[[20, 20, 20]] = 1;
        let image = Array3::<f32>::zeros((24, 24, 24));

        // Bias 1: the lone foreground voxel is always inside the patch.
        for trial in 0..20u64 {
            let mut rng = stream(50, "patch-test", &[trial]);
            let (_, lab) = extract_patch(&image, &label, [8, 8, 8], 1.0, &mut rng);
            assert_eq!(lab.iter().filter(|&&v| v != 0).count(), 1, "trial {trial}");
        }
        // Bias 0: with a single voxel in 24³ most uniform patches miss it.
        let mut hits = 0;
        for trial in 0..20u64 {
            let mut rng = stream(51, "patch-test", &[trial]);
            let (_, lab) = extract_patch(&image, &label, [8, 8, 8], 0.0, &mut rng);
            hits += usize::from(lab.iter().any(|&v| v != 0));
        }
        assert!(hits < 10, "uniform sampling hit the voxel {hits}/20 times");

        // Small volumes are padded up to the patch size.
        let small_img = Array3::<f32>::ones((6, 6, 6));
        let small_lab = Array3::<u8>::zeros((6, 6, 6));
        let mut rng = stream(52, "patch-test", &[0]);
        let (img, lab) = extract_patch(&small_img, &small_lab, [8, 8, 8], 0.5, &mut rng);
        assert_eq!(img.dim(), (8, 8, 8));
        assert_eq!(lab.dim(), (8, 8, 8));
        assert_eq!(img.iter().filter(|&&v| v != 0.0).count(), 216);
    }
}
