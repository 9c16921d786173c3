//! The two networks: a U-style encoder–decoder for segmentation and one
//! small convolutional domain classifier per encoder stage.
//!
//! Stage `x` of the encoder runs at `patch / 2^(x-1)` resolution with
//! `min(base_channels * 2^(x-1), channel_cap)` channels. Each stage's output
//! is exposed as a [`StageFeatureTap`]: the decoder consumes taps as skip
//! connections, and the domain classifiers read them to predict which domain
//! a patch came from. The `detached` flag on a tap records which way
//! gradients are allowed to flow — classifier training sees detached taps
//! (encoder untouched), unlearning sees attached ones (encoder prefix
//! updated, classifier frozen).

pub mod classifier;
pub mod inference;
pub mod segnet;

pub use classifier::{argmax, batch_accuracy, ClassifierCache, DomainClassifier};
pub use inference::{predict_patch, predict_volume, predict_with_mirroring, sliding_windows};
pub use segnet::{EncoderCache, EncoderPrefix, SegCache, SegNet};

use crate::nn::Feat;

/// Channel width of stage `x` (1-based).
pub fn stage_channels(base: usize, cap: usize, stage: usize) -> usize {
    cap.min(base << (stage - 1))
}

/// One encoder stage's feature map, tagged with its stage index and whether
/// gradients may flow back into the encoder.
#[derive(Debug, Clone)]
pub struct StageFeatureTap {
    /// 1-based encoder stage.
    pub stage: usize,
    pub feat: Feat,
    /// `true`: gradients stop here (classifier training).
    /// `false`: gradients may continue into the encoder (unlearning).
    pub detached: bool,
}
