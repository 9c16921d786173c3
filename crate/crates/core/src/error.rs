//! One error type for the whole crate.
//!
//! Configuration problems get their own variants so callers (and tests) can
//! tell *which* invariant failed; I/O and format problems carry enough context
//! to point at the offending file.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    // ---- configuration ----
    #[error("need at least two domains, got {0}")]
    TooFewDomains(usize),

    #[error("duplicate domain identifier `{0}`")]
    DuplicateDomain(String),

    #[error("batch size {batch_size} is not divisible by the number of domains {n_domains}")]
    BatchNotDivisible { batch_size: usize, n_domains: usize },

    #[error("warm-up spans {warmup} epochs but the run only has {total}")]
    WarmupExceedsTotal { warmup: usize, total: usize },

    #[error(
        "tolerance {tol} outside [0, {max:.6}] (the accuracy bound must stay within [1/{n_domains}, 1])"
    )]
    ToleranceOutOfRange { tol: f64, max: f64, n_domains: usize },

    #[error("encoder depth {0} out of range (need 2..=6)")]
    BadEncoderDepth(usize),

    #[error(
        "patch axis {axis} is {size}; every axis must be a power of two and at least {min} so \
         stage features reach the 4^3 classifier input by repeated halving"
    )]
    BadPatchAxis { axis: usize, size: usize, min: usize },

    #[error("unlearn stage {stage} outside 1..={depth}")]
    UnlearnStageOutOfRange { stage: usize, depth: usize },

    #[error("duplicate unlearn stage {0}")]
    DuplicateUnlearnStage(usize),

    #[error("fixed-ratio schedule needs learn_steps >= 1 and unlearn_steps >= 1, got {learn}/{unlearn}")]
    BadFixedRatio { learn: usize, unlearn: usize },

    #[error("{field} must be positive")]
    ZeroField { field: &'static str },

    #[error("{field} = {value} outside [0, 1]")]
    BadProbability { field: &'static str, value: f64 },

    #[error("{field} range [{lo}, {hi}] is empty or negative")]
    BadRange { field: &'static str, lo: f64, hi: f64 },

    // ---- data ----
    #[error("volume has constant intensity; cannot rescale to [0, 1]")]
    ConstantIntensity,

    #[error("label volume contains value {0}; expected binary 0/1")]
    NonBinaryLabel(f64),

    #[error("image shape {image:?} does not match label shape {label:?}")]
    ShapeMismatch { image: [usize; 3], label: [usize; 3] },

    #[error("manifest references unknown domain `{0}`")]
    UnknownDomain(String),

    #[error("domain `{domain}` has {n} {split} cases; need at least {need}")]
    DomainTooSmall { domain: String, split: &'static str, n: usize, need: usize },

    #[error("manifest has no entries for split `{0}`")]
    EmptySplit(&'static str),

    #[error("synthetic domain spec `{name}` cannot produce lesions: {why}")]
    DegenerateLesionSpec { name: String, why: String },

    #[error("synthetic domain specs `{a}` and `{b}` are identical; domains must differ in appearance")]
    IndistinguishableSpecs { a: String, b: String },

    #[error(
        "synthetic domain specs `{a}` and `{b}` have different lesion geometry ranges; \
         labels must be identically distributed across domains"
    )]
    GeometryRangesDiffer { a: String, b: String },

    // ---- model / training ----
    #[error("input shape {shape:?} incompatible with encoder depth {depth}: every axis must be a multiple of {multiple}")]
    BadInputShape { shape: [usize; 3], depth: usize, multiple: usize },

    #[error("expected {expected} input channel(s), got {got}")]
    BadChannels { expected: usize, got: usize },

    #[error("stage {stage} features are {size}³ but the classifier head needs a power of two >= 4 to reach 4³")]
    BadTapExtent { stage: usize, size: usize },

    #[error("training patch {0:?} must be cubic so every stage tap can reach the classifiers' 4³ input")]
    NonCubicPatch([usize; 3]),

    #[error("feature tap is for stage {tap} but classifier expects stage {clf}")]
    StageMismatch { tap: usize, clf: usize },

    #[error("feature tap must be {} for this pass", if *.expected { "detached" } else { "attached" })]
    TapDetachMismatch { expected: bool },

    #[error("non-finite {what} at epoch {epoch}, iteration {iter}")]
    NonFiniteLoss { what: &'static str, epoch: usize, iter: usize },

    #[error("checkpoint was written for a different configuration: {0}")]
    CheckpointMismatch(String),

    #[error("checkpoint decode failed: {0}")]
    CheckpointDecode(String),

    // ---- evaluation ----
    #[error("prediction shape {pred:?} does not match reference shape {reference:?}")]
    EvalShapeMismatch { pred: [usize; 3], reference: [usize; 3] },

    #[error("no case stems common to prediction and reference directories")]
    NoCommonCases,

    #[error("paired comparison needs equal-length samples, got {a} vs {b}")]
    UnpairedSamples { a: usize, b: usize },

    #[error("empty sample for {0}")]
    EmptySample(&'static str),

    #[error("{what} needs at least {needed} cases, got {got}")]
    TooFewCases { what: &'static str, needed: usize, got: usize },

    #[error("ranking needs at least two methods, got {0}")]
    TooFewMethods(usize),

    #[error("method `{method}` has a non-finite mean for {metric}")]
    MissingMetric { method: String, metric: &'static str },

    #[error("IoU threshold {0} outside (0, 1]")]
    BadIouThreshold(f64),

    // ---- files ----
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("TOML error: {0}")]
    Toml(#[from] toml::de::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Wrap an I/O error with the path it happened on.
    pub fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File { path: path.into(), source }
    }

    /// A malformed-content error for `path`.
    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), msg: msg.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
