//! Training and evaluation for domain-robust volumetric lesion segmentation.
//!
//! The centrepiece is a learning/unlearning schedule for a 3D encoder-decoder
//! segmentation network: every encoder stage feeds a small domain classifier,
//! and whenever a classifier's (windowed) accuracy stays above an acceptance
//! bound for longer than a patience budget, the encoder prefix below that stage
//! is pushed towards domain-indistinguishable features by minimising the
//! KL divergence between the classifier posterior and the uniform distribution.
//! Classifier weights are frozen during those unlearning steps, and encoder
//! stages above the tapped one are untouched, so the two adversarial roles
//! never share a gradient step.
//!
//! The crate is deliberately self-contained and CPU-only:
//!
//! * [`nn`] — the few layers the networks need (3D convolution via im2col,
//!   transposed convolution, instance norm, leaky ReLU, linear, softmax) with
//!   hand-written backward passes, plus SGD/Adam optimisers.
//! * [`model`] — the segmentation network, the per-stage domain classifiers,
//!   and mirror-ensembled sliding-window inference.
//! * [`losses`] — soft Dice + cross-entropy segmentation loss and the uniform
//!   KL confusion loss, all in `f64` with analytic gradients.
//! * [`scheduler`] — the per-stage patience state machine and the execution of
//!   one combined training step.
//! * [`trainer`] — the epoch loop, checkpointing, resume, and inference.
//! * [`synth`] — a synthetic multi-domain lesion generator for end-to-end
//!   testing at desk scale.
//! * [`metrics`] — voxel and lesion-wise evaluation (18-connected components,
//!   IoU lesion matching, Dice/TPR/LTPR/LFDR/RVE), rank aggregation, Wilcoxon
//!   signed-rank tests and bootstrap confidence intervals.
//!
//! Everything that consumes randomness takes an explicit seed and is
//! bit-reproducible across runs on the same platform.

pub mod augment;
pub mod config;
pub mod error;
pub mod losses;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod nifti;
pub mod nn;
pub mod rng;
pub mod sampler;
pub mod scheduler;
pub mod synth;
pub mod trainer;
pub mod volume;

pub use config::{uba, validate_config, AugmentConfig, DomainSet, OptimConfig, RunConfig, ScheduleMode};
pub use error::{Error, Result};
pub use volume::VolumeSample;
