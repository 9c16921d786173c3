//! Run configuration: domains, network size, schedule knobs, and validation.
//!
//! A [`RunConfig`] is plain data (deserialisable from TOML) and may be invalid;
//! [`validate_config`] checks every cross-field invariant and returns a
//! normalised copy (unlearn stages sorted). `uba` computes the Upper Bound
//! Accuracy that drives the unlearning trigger: the accuracy of blind guessing
//! (`1/N_d`) plus a tolerance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered, non-empty set of unique domain identifiers.
///
/// The order fixes the classifier output index of each domain and the slot
/// layout of balanced batches, so it is part of run identity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSet {
    names: Vec<String>,
}

impl DomainSet {
    /// Build from an ordered name list. Requires at least two unique names.
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::TooFewDomains(names.len()));
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::DuplicateDomain(n.clone()));
            }
        }
        Ok(DomainSet { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        false // by construction
    }

    /// Index of `name`, if present.
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// When unlearning steps happen. In TOML: `schedule = "self_supervised"`,
/// or `[schedule.fixed_ratio]` with `learn_steps`/`unlearn_steps` keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    /// Patience-triggered: a stage is unlearned once its classifier accuracy
    /// has exceeded the acceptance bound for more than `patience` consecutive
    /// planning calls.
    SelfSupervised,
    /// Fixed alternation: after warm-up, step `k` (0-based) unlearns all
    /// configured stages iff `k mod (learn_steps + unlearn_steps) >= learn_steps`.
    FixedRatio { learn_steps: usize, unlearn_steps: usize },
}

/// Per-step data augmentation. Each transform fires independently with its
/// own probability; ranges are sampled uniformly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Joint rotation + scaling (trilinear for the image, nearest for the label).
    pub rotation_scaling_prob: f64,
    /// Maximum rotation per axis, degrees (sampled in `[-max, max]`).
    pub rotation_max_deg: f64,
    pub scale_range: [f64; 2],
    pub noise_prob: f64,
    pub noise_sigma_range: [f64; 2],
    pub blur_prob: f64,
    pub blur_sigma_range: [f64; 2],
    pub brightness_prob: f64,
    pub brightness_range: [f64; 2],
    pub contrast_prob: f64,
    pub contrast_range: [f64; 2],
    pub gamma_prob: f64,
    pub gamma_range: [f64; 2],
    pub lowres_prob: f64,
    /// Downsampling factor range (values <= 1; 0.5 halves the resolution).
    pub lowres_zoom_range: [f64; 2],
    /// Probability that mirroring is considered at all; each axis then flips
    /// with probability 1/2.
    pub mirror_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation_scaling_prob: 0.3,
            rotation_max_deg: 15.0,
            scale_range: [0.85, 1.15],
            noise_prob: 0.2,
            noise_sigma_range: [0.0, 0.05],
            blur_prob: 0.2,
            blur_sigma_range: [0.5, 1.0],
            brightness_prob: 0.2,
            brightness_range: [0.85, 1.15],
            contrast_prob: 0.2,
            contrast_range: [0.85, 1.15],
            gamma_prob: 0.2,
            gamma_range: [0.8, 1.25],
            lowres_prob: 0.2,
            lowres_zoom_range: [0.6, 1.0],
            mirror_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    /// All probabilities zero — augmentation becomes the identity.
    pub fn disabled() -> Self {
        AugmentConfig {
            rotation_scaling_prob: 0.0,
            noise_prob: 0.0,
            blur_prob: 0.0,
            brightness_prob: 0.0,
            contrast_prob: 0.0,
            gamma_prob: 0.0,
            lowres_prob: 0.0,
            mirror_prob: 0.0,
            ..AugmentConfig::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let probs = [
            ("rotation_scaling_prob", self.rotation_scaling_prob),
            ("noise_prob", self.noise_prob),
            ("blur_prob", self.blur_prob),
            ("brightness_prob", self.brightness_prob),
            ("contrast_prob", self.contrast_prob),
            ("gamma_prob", self.gamma_prob),
            ("lowres_prob", self.lowres_prob),
            ("mirror_prob", self.mirror_prob),
        ];
        for (field, p) in probs {
            if !(0.0..=1.0).contains(&p) || !p.is_finite() {
                return Err(Error::BadProbability { field, value: p });
            }
        }
        let ranges = [
            ("scale_range", self.scale_range),
            ("noise_sigma_range", self.noise_sigma_range),
            ("blur_sigma_range", self.blur_sigma_range),
            ("brightness_range", self.brightness_range),
            ("contrast_range", self.contrast_range),
            ("gamma_range", self.gamma_range),
            ("lowres_zoom_range", self.lowres_zoom_range),
        ];
        for (field, [lo, hi]) in ranges {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi || lo < 0.0 {
                return Err(Error::BadRange { field, lo, hi });
            }
        }
        if self.lowres_zoom_range[1] > 1.0 || self.lowres_zoom_range[0] <= 0.0 {
            return Err(Error::BadRange {
                field: "lowres_zoom_range",
                lo: self.lowres_zoom_range[0],
                hi: self.lowres_zoom_range[1],
            });
        }
        Ok(())
    }
}

/// Learning rates and momentum for the three optimisers. Segmentation uses
/// SGD with Nesterov momentum and polynomial decay; the domain classifiers use
/// Adam; unlearning uses plain SGD (no momentum, so encoder stages that get a
/// zero gradient are provably untouched).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub seg_lr: f64,
    pub seg_momentum: f64,
    pub seg_nesterov: bool,
    /// Polynomial decay exponent for the segmentation LR: `lr * (1 - t/T)^p`.
    pub seg_poly_power: f64,
    pub classifier_lr: f64,
    pub unlearn_lr: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            seg_lr: 1e-2,
            seg_momentum: 0.99,
            seg_nesterov: true,
            seg_poly_power: 0.9,
            classifier_lr: 1e-3,
            unlearn_lr: 1e-4,
        }
    }
}

impl OptimConfig {
    fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("seg_lr", self.seg_lr),
            ("classifier_lr", self.classifier_lr),
            ("unlearn_lr", self.unlearn_lr),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::ZeroField { field });
            }
        }
        if !(0.0..1.0).contains(&self.seg_momentum) {
            return Err(Error::BadProbability { field: "seg_momentum", value: self.seg_momentum });
        }
        if !(self.seg_poly_power.is_finite() && self.seg_poly_power >= 0.0) {
            return Err(Error::BadRange {
                field: "seg_poly_power",
                lo: self.seg_poly_power,
                hi: self.seg_poly_power,
            });
        }
        Ok(())
    }
}

/// Everything a training run needs to be reproduced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Ordered domain identifiers; the order fixes classifier output indices.
    pub domains: Vec<String>,
    pub seed: u64,
    /// Number of encoder stages `D`.
    pub encoder_depth: usize,
    /// Training patch size; each axis must be a power of two >= `4 * 2^(D-1)`
    /// so every stage feature map can be halved down to the classifiers'
    /// 4x4x4 input.
    pub patch_size: [usize; 3],
    /// Channels of stage 1; stage `x` has `min(base * 2^(x-1), channel_cap)`.
    pub base_channels: usize,
    pub channel_cap: usize,
    /// Total epochs `e_t`.
    pub epochs: usize,
    /// Warm-up epochs `e_w`: segmentation + classifier training only, no
    /// patience counting and no unlearning while `epoch <= warmup_epochs`.
    pub warmup_epochs: usize,
    /// Optimisation steps per epoch (every step sees one balanced batch).
    pub iters_per_epoch: usize,
    pub batch_size: usize,
    /// Run validation every this many epochs (always also at the end of
    /// warm-up and at the final epoch).
    pub val_every: usize,
    /// Tolerance added on top of chance level: the acceptance bound is
    /// `1/N_d + tolerance`.
    pub tolerance: f64,
    /// A stage unlearns once its counter exceeds this many consecutive
    /// above-bound planning calls.
    pub patience: usize,
    /// Window length for the moving-average classifier accuracy that feeds
    /// the trigger.
    pub acc_window: usize,
    pub schedule: ScheduleMode,
    /// Stages eligible for unlearning (1-based, subset of `1..=encoder_depth`).
    /// Empty disables unlearning entirely (baseline runs).
    pub unlearn_stages: Vec<usize>,
    /// Probability that a training patch is centred on a foreground voxel.
    pub foreground_bias: f64,
    pub augment: AugmentConfig,
    pub optim: OptimConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            domains: vec!["site_a".into(), "site_b".into()],
            seed: 0,
            encoder_depth: 6,
            patch_size: [128, 128, 128],
            base_channels: 32,
            channel_cap: 320,
            epochs: 100,
            warmup_epochs: 10,
            iters_per_epoch: 50,
            batch_size: 8,
            val_every: 10,
            tolerance: 0.05,
            patience: 10,
            acc_window: 10,
            schedule: ScheduleMode::SelfSupervised,
            unlearn_stages: vec![4, 5, 6],
            foreground_bias: 0.5,
            augment: AugmentConfig::default(),
            optim: OptimConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn domain_set(&self) -> Result<DomainSet> {
        DomainSet::new(self.domains.clone())
    }

    pub fn n_domains(&self) -> usize {
        self.domains.len()
    }

    /// The acceptance bound `1/N_d + tolerance` this config implies.
    pub fn uba(&self) -> Result<f64> {
        uba(self.domains.len(), self.tolerance)
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        Ok(toml::from_str(s)?)
    }

    pub fn from_toml_path(path: &std::path::Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("RunConfig serialises")
    }
}

/// Upper Bound Accuracy: chance level plus tolerance.
///
/// `tol` must lie in `[0, 1 - 1/n_domains]` so the bound itself stays a valid
/// accuracy in `[1/n_domains, 1]`.
pub fn uba(n_domains: usize, tol: f64) -> Result<f64> {
    if n_domains < 2 {
        return Err(Error::TooFewDomains(n_domains));
    }
    let max = 1.0 - 1.0 / n_domains as f64;
    if !tol.is_finite() || tol < 0.0 || tol > max {
        return Err(Error::ToleranceOutOfRange { tol, max, n_domains });
    }
    Ok(1.0 / n_domains as f64 + tol)
}

/// Check every invariant of `cfg`; on success return a normalised copy
/// (unlearn stages sorted ascending, duplicates rejected). Validation is
/// idempotent: a validated config validates again to an identical value.
pub fn validate_config(cfg: &RunConfig) -> Result<RunConfig> {
    let domains = DomainSet::new(cfg.domains.clone())?;
    let n_d = domains.len();

    if !(2..=6).contains(&cfg.encoder_depth) {
        return Err(Error::BadEncoderDepth(cfg.encoder_depth));
    }
    // Every stage halves the grid; the deepest stage feature map must still be
    // reducible to 4^3 by further halving, which holds exactly when each patch
    // axis is a power of two >= 4 * 2^(D-1).
    let min_axis = 4usize << (cfg.encoder_depth - 1);
    for (axis, &size) in cfg.patch_size.iter().enumerate() {
        if !size.is_power_of_two() || size < min_axis {
            return Err(Error::BadPatchAxis { axis, size, min: min_axis });
        }
    }
    // The per-stage domain classifiers flatten a 4x4x4 core, so the taps
    // (and hence the patch) must be cubic.
    if cfg.patch_size[0] != cfg.patch_size[1] || cfg.patch_size[1] != cfg.patch_size[2] {
        return Err(Error::NonCubicPatch(cfg.patch_size));
    }
    for (field, v) in [
        ("base_channels", cfg.base_channels),
        ("channel_cap", cfg.channel_cap),
        ("epochs", cfg.epochs),
        ("iters_per_epoch", cfg.iters_per_epoch),
        ("batch_size", cfg.batch_size),
        ("val_every", cfg.val_every),
        ("patience", cfg.patience),
        ("acc_window", cfg.acc_window),
    ] {
        if v == 0 {
            return Err(Error::ZeroField { field });
        }
    }
    if cfg.warmup_epochs > cfg.epochs {
        return Err(Error::WarmupExceedsTotal { warmup: cfg.warmup_epochs, total: cfg.epochs });
    }
    if cfg.batch_size % n_d != 0 {
        return Err(Error::BatchNotDivisible { batch_size: cfg.batch_size, n_domains: n_d });
    }
    uba(n_d, cfg.tolerance)?;
    if let ScheduleMode::FixedRatio { learn_steps, unlearn_steps } = cfg.schedule {
        if learn_steps == 0 || unlearn_steps == 0 {
            return Err(Error::BadFixedRatio { learn: learn_steps, unlearn: unlearn_steps });
        }
    }
    let mut stages = cfg.unlearn_stages.clone();
    stages.sort_unstable();
    for (i, &s) in stages.iter().enumerate() {
        if s == 0 || s > cfg.encoder_depth {
            return Err(Error::UnlearnStageOutOfRange { stage: s, depth: cfg.encoder_depth });
        }
        if i > 0 && stages[i - 1] == s {
            return Err(Error::DuplicateUnlearnStage(s));
        }
    }
    if !(0.0..=1.0).contains(&cfg.foreground_bias) {
        return Err(Error::BadProbability { field: "foreground_bias", value: cfg.foreground_bias });
    }
    cfg.augment.validate()?;
    cfg.optim.validate()?;

    let mut out = cfg.clone();
    out.unlearn_stages = stages;
    Ok(out)
}
