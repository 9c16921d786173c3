//! Per-stage domain classifiers.
//!
//! Each encoder stage gets its own small convolutional network that tries to
//! name the domain a patch came from, given only that stage's features. The
//! head is deliberately uniform across stages: stride-2 blocks shrink the tap
//! to exactly 4×4×4 (the block count follows from the tap's extent), two
//! stride-1 blocks mix, and a fully connected layer over the flattened map
//! yields an `N_d`-way softmax posterior.
//!
//! The two backward entry points encode who is allowed to learn:
//!
//! * [`DomainClassifier::backward`] — classifier training; requires a
//!   *detached* tap and accumulates gradients only in the classifier.
//! * [`DomainClassifier::backward_data`] — unlearning; takes `&self` (the
//!   classifier is structurally frozen), requires an *attached* tap, and
//!   returns the tap gradient for the encoder to absorb.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::StageFeatureTap;
use crate::error::{Error, Result};
use crate::nn::ops::{flatten, softmax_rows, softmax_rows_backward, unflatten};
use crate::nn::visit::{ParamSlot, VisitParams};
use crate::nn::{ConvBlock, ConvBlockCache, Feat, Linear};

/// Spatial extent the downsampling chain reduces every tap to.
const TARGET_EXTENT: usize = 4;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainClassifier {
    /// 1-based encoder stage this classifier listens to.
    pub stage: usize,
    /// Channel width of the tap (kept constant through the classifier).
    pub channels: usize,
    /// Expected cubic spatial extent of the tap.
    pub extent: usize,
    /// `log2(extent / 4)` stride-2 blocks.
    pub downs: Vec<ConvBlock>,
    pub plain_a: ConvBlock,
    pub plain_b: ConvBlock,
    pub fc: Linear,
}

/// Forward state for one classified batch of taps.
#[derive(Debug)]
pub struct ClassifierCache {
    /// Copied from the tap, so the backward entry points can refuse the
    /// wrong kind of pass.
    detached: bool,
    blocks: Vec<ConvBlockCache>,
    flat: Array2<f32>,
    /// Softmax posterior, `[batch, n_domains]`.
    pub probs: Array2<f32>,
}

impl DomainClassifier {
    /// `extent` is the tap's spatial size per axis; it must be a power of
    /// two no smaller than 4 so repeated halving lands exactly on 4³.
    pub fn new(
        stage: usize,
        channels: usize,
        extent: usize,
        n_domains: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if n_domains < 2 {
            return Err(Error::TooFewDomains(n_domains));
        }
        if extent < TARGET_EXTENT || !extent.is_power_of_two() {
            return Err(Error::BadTapExtent { stage, size: extent });
        }
        let n_downs = (extent / TARGET_EXTENT).trailing_zeros() as usize;
        let downs = (0..n_downs)
            .map(|_| ConvBlock::new(channels, channels, [2, 2, 2], rng))
            .collect();
        Ok(DomainClassifier {
            stage,
            channels,
            extent,
            downs,
            plain_a: ConvBlock::new(channels, channels, [1, 1, 1], rng),
            plain_b: ConvBlock::new(channels, channels, [1, 1, 1], rng),
            fc: Linear::new(channels * TARGET_EXTENT.pow(3), n_domains, rng),
        })
    }

    pub fn n_domains(&self) -> usize {
        self.fc.w.dim().0
    }

    /// Posterior over domains plus the cache a backward pass needs.
    pub fn forward(&self, tap: &StageFeatureTap) -> Result<(Array2<f32>, ClassifierCache)> {
        if tap.stage != self.stage {
            return Err(Error::StageMismatch { tap: tap.stage, clf: self.stage });
        }
        let (b, c, xs, ys, zs) = tap.feat.dim();
        assert_eq!(
            (c, xs, ys, zs),
            (self.channels, self.extent, self.extent, self.extent),
            "stage {} tap shape mismatch",
            self.stage
        );

        let mut blocks = Vec::with_capacity(self.downs.len() + 2);
        let mut cur = tap.feat.clone();
        for blk in self.downs.iter().chain([&self.plain_a, &self.plain_b]) {
            let (y, cache) = blk.forward(&cur);
            blocks.push(cache);
            cur = y;
        }
        debug_assert_eq!(cur.dim().2, TARGET_EXTENT);

        let flat = flatten(&cur);
        let logits = self.fc.forward(&flat);
        let probs = softmax_rows(&logits);
        debug_assert_eq!(probs.dim(), (b, self.n_domains()));
        Ok((probs.clone(), ClassifierCache { detached: tap.detached, blocks, flat, probs }))
    }

    /// Posterior only — the inference entry point.
    pub fn classify_domain(&self, tap: &StageFeatureTap) -> Result<Array2<f32>> {
        Ok(self.forward(tap)?.0)
    }

    /// Training backward: accumulate classifier gradients from a gradient
    /// w.r.t. the posterior. Requires a detached tap — gradients must not
    /// leak into the encoder, so the tap gradient is not even computed.
    pub fn backward(&mut self, cache: &ClassifierCache, dprobs: &Array2<f32>) -> Result<()> {
        if !cache.detached {
            return Err(Error::TapDetachMismatch { expected: true });
        }
        let dlogits = softmax_rows_backward(&cache.probs, dprobs);
        let dflat = self.fc.backward(&cache.flat, &dlogits);
        let mut d = unflatten(&dflat, [self.channels, TARGET_EXTENT, TARGET_EXTENT, TARGET_EXTENT]);
        // Walk blocks in reverse; `self.downs` may be empty.
        d = self.plain_b.backward(&cache.blocks[cache.blocks.len() - 1], &d);
        d = self.plain_a.backward(&cache.blocks[cache.blocks.len() - 2], &d);
        for (blk, bc) in self.downs.iter_mut().zip(&cache.blocks).rev() {
            d = blk.backward(bc, &d);
        }
        Ok(())
    }

    /// Unlearning backward: the classifier is frozen (`&self`), the tap must
    /// be attached, and the returned gradient is w.r.t. the tap so the
    /// encoder prefix can absorb it.
    pub fn backward_data(&self, cache: &ClassifierCache, dprobs: &Array2<f32>) -> Result<Feat> {
        if cache.detached {
            return Err(Error::TapDetachMismatch { expected: false });
        }
        let dlogits = softmax_rows_backward(&cache.probs, dprobs);
        let dflat = self.fc.backward_data(&cache.flat, &dlogits);
        let mut d = unflatten(&dflat, [self.channels, TARGET_EXTENT, TARGET_EXTENT, TARGET_EXTENT]);
        d = self.plain_b.backward_data(&cache.blocks[cache.blocks.len() - 1], &d);
        d = self.plain_a.backward_data(&cache.blocks[cache.blocks.len() - 2], &d);
        for (blk, bc) in self.downs.iter().zip(&cache.blocks).rev() {
            d = blk.backward_data(bc, &d);
        }
        Ok(d)
    }
}

impl VisitParams for DomainClassifier {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamSlot<'_>)) {
        for blk in &mut self.downs {
            blk.visit_params(f);
        }
        self.plain_a.visit_params(f);
        self.plain_b.visit_params(f);
        self.fc.visit_params(f);
    }
}

/// Fraction of rows whose highest-probability domain (first index on ties)
/// matches the true domain.
pub fn batch_accuracy(probs: &Array2<f32>, domains: &[usize]) -> f64 {
    assert_eq!(probs.dim().0, domains.len());
    let hits = probs
        .rows()
        .into_iter()
        .zip(domains)
        .filter(|(row, &d)| argmax(row.as_slice().unwrap()) == d)
        .count();
    hits as f64 / domains.len() as f64
}

/// Index of the first maximal element.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
