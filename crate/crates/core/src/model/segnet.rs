//! The segmentation network: a U-style 3D encoder–decoder.
//!
//! Encoder stage 1 keeps full resolution (two stride-1 blocks); every later
//! stage opens with a stride-2 block, so stage `x` runs at `1/2^(x-1)` of
//! the patch resolution. The decoder mirrors this with 2×2×2 transposed
//! convolutions, concatenating each upsampled map with the matching encoder
//! stage's output (skip connection). A 1×1×1 convolution plus channel
//! softmax produces two class probabilities per voxel.
//!
//! Forward passes return explicit caches; the caller decides which backward
//! to run:
//!
//! * [`SegNet::backward_segmentation`] — the whole network learns;
//! * [`SegNet::backward_encoder_prefix`] — only encoder stages `1..=x`
//!   accumulate gradients, used when a confusion loss at the stage-`x` tap
//!   is pushed back during unlearning.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{stage_channels, StageFeatureTap};
use crate::error::{Error, Result};
use crate::nn::ops::{concat_channels, softmax_channels, softmax_channels_backward, split_channels};
use crate::nn::visit::{ParamSlot, VisitParams};
use crate::nn::{Conv3d, ConvBlock, ConvBlockCache, ConvTranspose3d, Feat};

/// Images are single-channel; the head always predicts background/foreground.
pub const IN_CHANNELS: usize = 1;
pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderStage {
    pub a: ConvBlock,
    pub b: ConvBlock,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecoderStage {
    pub up: ConvTranspose3d,
    pub a: ConvBlock,
    pub b: ConvBlock,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegNet {
    pub depth: usize,
    /// Stage 1..D, shallow to deep.
    pub encoder: Vec<EncoderStage>,
    /// Deep to shallow: `decoder[k]` upsamples to stage `depth-1-k` resolution.
    pub decoder: Vec<DecoderStage>,
    pub head: Conv3d,
}

/// Per-stage block caches from an encoder pass, in stage order.
#[derive(Debug)]
pub struct EncoderCache {
    pub stages: Vec<(ConvBlockCache, ConvBlockCache)>,
}

impl EncoderCache {
    /// Output feature map of 1-based stage `x` (the second block's output).
    pub fn stage_output(&self, x: usize) -> &Feat {
        &self.stages[x - 1].1.y
    }
}

#[derive(Debug)]
pub struct DecoderCache {
    /// Channel count of the upsampled half of the concatenation.
    up_channels: usize,
    a: ConvBlockCache,
    b: ConvBlockCache,
}

/// Everything a full segmentation backward pass needs.
#[derive(Debug)]
pub struct SegCache {
    pub encoder: EncoderCache,
    decoders: Vec<DecoderCache>,
    head_in: Feat,
    probs: Feat,
}

impl SegNet {
    pub fn new(depth: usize, base_channels: usize, channel_cap: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!((2..=6).contains(&depth), "encoder depth {depth} out of range");
        let ch = |x: usize| stage_channels(base_channels, channel_cap, x);

        let mut encoder = Vec::with_capacity(depth);
        for x in 1..=depth {
            let (ci, stride) = if x == 1 { (IN_CHANNELS, [1, 1, 1]) } else { (ch(x - 1), [2, 2, 2]) };
            encoder.push(EncoderStage {
                a: ConvBlock::new(ci, ch(x), stride, rng),
                b: ConvBlock::new(ch(x), ch(x), [1, 1, 1], rng),
            });
        }

        let mut decoder = Vec::with_capacity(depth - 1);
        for x in (1..depth).rev() {
            decoder.push(DecoderStage {
                up: ConvTranspose3d::new(ch(x + 1), ch(x), rng),
                a: ConvBlock::new(2 * ch(x), ch(x), [1, 1, 1], rng),
                b: ConvBlock::new(ch(x), ch(x), [1, 1, 1], rng),
            });
        }

        let head = Conv3d::new(ch(1), NUM_CLASSES, 1, [1, 1, 1], rng);
        SegNet { depth, encoder, decoder, head }
    }

    fn check_input(&self, x: &Feat) -> Result<()> {
        let (_, ci, xs, ys, zs) = x.dim();
        if ci != IN_CHANNELS {
            return Err(Error::BadChannels { expected: IN_CHANNELS, got: ci });
        }
        let multiple = 1usize << (self.depth - 1);
        if [xs, ys, zs].iter().any(|&a| a == 0 || a % multiple != 0) {
            return Err(Error::BadInputShape { shape: [xs, ys, zs], depth: self.depth, multiple });
        }
        Ok(())
    }

    /// Run the encoder alone, producing one tap per stage.
    ///
    /// `detached` is stamped onto every tap: `true` marks taps meant for
    /// classifier training (gradients stop at the tap), `false` marks taps
    /// for unlearning passes (gradients may flow back via
    /// [`Self::backward_encoder_prefix`]).
    pub fn forward_encoder(&self, x: &Feat, detached: bool) -> Result<(Vec<StageFeatureTap>, EncoderCache)> {
        self.check_input(x)?;
        let mut taps = Vec::with_capacity(self.depth);
        let mut stages = Vec::with_capacity(self.depth);
        let mut cur = x.clone();
        for (i, st) in self.encoder.iter().enumerate() {
            let (ya, ca) = st.a.forward(&cur);
            let (yb, cb) = st.b.forward(&ya);
            taps.push(StageFeatureTap { stage: i + 1, feat: yb.clone(), detached });
            stages.push((ca, cb));
            cur = yb;
        }
        Ok((taps, EncoderCache { stages }))
    }

    /// Full forward pass: per-voxel class probabilities plus detached
    /// per-stage taps (the taps produced alongside segmentation are only
    /// ever consumed by classifier training).
    pub fn forward_segmentation(&self, x: &Feat) -> Result<(Feat, Vec<StageFeatureTap>, SegCache)> {
        let (taps, encoder) = self.forward_encoder(x, true)?;
        let mut cur = encoder.stage_output(self.depth).clone();
        let mut decoders = Vec::with_capacity(self.decoder.len());
        for (k, dec) in self.decoder.iter().enumerate() {
            let skip = encoder.stage_output(self.depth - 1 - k);
            let up = dec.up.forward(&cur);
            let up_channels = up.dim().1;
            let cat = concat_channels(&up, skip);
            let (ya, ca) = dec.a.forward(&cat);
            let (yb, cb) = dec.b.forward(&ya);
            decoders.push(DecoderCache { up_channels, a: ca, b: cb });
            cur = yb;
        }
        let logits = self.head.forward(&cur);
        let probs = softmax_channels(&logits);
        let cache = SegCache { encoder, decoders, head_in: cur, probs: probs.clone() };
        Ok((probs, taps, cache))
    }

    /// Backward from a gradient w.r.t. the output *probabilities*,
    /// accumulating gradients in every parameter. Returns the input gradient.
    pub fn backward_segmentation(&mut self, cache: &SegCache, dprobs: &Feat) -> Feat {
        let dlogits = softmax_channels_backward(&cache.probs, dprobs);
        let mut d = self.head.backward(&cache.head_in, &dlogits);

        // Decoder stages, shallow to deep. Each skip gradient is parked until
        // the encoder walk below reaches its stage.
        let mut dskips: Vec<Option<Feat>> = (0..self.depth).map(|_| None).collect();
        for k in (0..self.decoder.len()).rev() {
            let dec = &mut self.decoder[k];
            let dc = &cache.decoders[k];
            let db = dec.b.backward(&dc.b, &d);
            let dcat = dec.a.backward(&dc.a, &db);
            let (dup, dskip) = split_channels(&dcat, dc.up_channels);
            let skip_stage = self.depth - 1 - k;
            dskips[skip_stage - 1] = Some(dskip);
            let up_in = if k == 0 {
                cache.encoder.stage_output(self.depth)
            } else {
                &cache.decoders[k - 1].b.y
            };
            d = dec.up.backward(up_in, &dup);
        }

        // Encoder stages, deep to shallow; merge skip gradients on the way.
        for i in (0..self.depth).rev() {
            if let Some(ds) = &dskips[i] {
                d += ds;
            }
            let st = &mut self.encoder[i];
            let db = st.b.backward(&cache.encoder.stages[i].1, &d);
            d = st.a.backward(&cache.encoder.stages[i].0, &db);
        }
        d
    }

    /// Backward from a gradient at the stage-`x` tap through encoder stages
    /// `x..=1` only. Deeper stages, the decoder, and the head see neither
    /// gradients nor parameter changes.
    pub fn backward_encoder_prefix(&mut self, cache: &EncoderCache, stage: usize, dtap: &Feat) -> Feat {
        assert!(stage >= 1 && stage <= self.depth, "stage {stage} outside 1..={}", self.depth);
        let mut d = dtap.clone();
        for i in (0..stage).rev() {
            let st = &mut self.encoder[i];
            let db = st.b.backward(&cache.stages[i].1, &d);
            d = st.a.backward(&cache.stages[i].0, &db);
        }
        d
    }
}

impl VisitParams for SegNet {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamSlot<'_>)) {
        for st in &mut self.encoder {
            st.a.visit_params(f);
            st.b.visit_params(f);
        }
        for dec in &mut self.decoder {
            dec.up.visit_params(f);
            dec.a.visit_params(f);
            dec.b.visit_params(f);
        }
        self.head.visit_params(f);
    }
}

/// View of the encoder stages `1..=max_stage` as one parameter set, so an
/// optimiser step during unlearning can only ever touch that prefix.
pub struct EncoderPrefix<'a> {
    pub net: &'a mut SegNet,
    pub max_stage: usize,
}

impl VisitParams for EncoderPrefix<'_> {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamSlot<'_>)) {
        for st in &mut self.net.encoder[..self.max_stage] {
            st.a.visit_params(f);
            st.b.visit_params(f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::*;
    use crate::nn::Sgd;

    fn small_net(depth: usize, seed: u64) -> SegNet {
        let mut rng = crate::rng::stream(seed, "segnet-test", &[depth as u64]);
        SegNet::new(depth, 2, 320, &mut rng)
    }

    #[test]
    fn tap_shapes_follow_stride_arithmetic() {
        let net = small_net(4, 1);
        let mut rng = crate::rng::stream(1, "segnet-input", &[]);
        let x = random_feat([2, 1, 32, 32, 32], &mut rng);
        let (probs, taps, _) = net.forward_segmentation(&x).unwrap();

        assert_eq!(taps.len(), 4);
        for (tap, (spatial, ch)) in taps.iter().zip([(32, 2), (16, 4), (8, 8), (4, 16)]) {
            let (b, c, xs, ys, zs) = tap.feat.dim();
            assert_eq!((b, c), (2, ch), "stage {}", tap.stage);
            assert_eq!((xs, ys, zs), (spatial, spatial, spatial), "stage {}", tap.stage);
            assert!(tap.detached);
        }

        // Output: input spatial shape, two channels, normalised per voxel.
        assert_eq!(probs.dim(), (2, 2, 32, 32, 32));
        for b in 0..2 {
            for xi in (0..32).step_by(7) {
                for yi in (0..32).step_by(7) {
                    for zi in (0..32).step_by(7) {
                        let s: f32 = (0..2).map(|c| probs[[b, c, xi, yi, zi]]).sum();
                        assert!((s - 1.0).abs() < 1e-5);
                        assert!(probs[[b, 0, xi, yi, zi]] >= 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let net = small_net(3, 2);
        let mut rng = crate::rng::stream(2, "segnet-input", &[]);
        let x = random_feat([1, 1, 16, 16, 16], &mut rng);
        let (p1, _, _) = net.forward_segmentation(&x).unwrap();
        let (p2, _, _) = net.forward_segmentation(&x).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn rejects_bad_input_shapes() {
        let net = small_net(3, 3);
        let bad_axis = Feat::zeros((1, 1, 10, 16, 16)); // 10 not a multiple of 4
        assert!(matches!(
            net.forward_encoder(&bad_axis, true),
            Err(Error::BadInputShape { multiple: 4, .. })
        ));
        let bad_channels = Feat::zeros((1, 2, 16, 16, 16));
        assert!(matches!(
            net.forward_encoder(&bad_channels, true),
            Err(Error::BadChannels { expected: 1, got: 2 })
        ));
    }

    #[test]
    fn segmentation_gradients_match_finite_differences() {
        let mut net = small_net(2, 4);
        // Park activations away from the LeakyReLU kink: instance norm
        // centres its output at zero, exactly where the activation is not
        // differentiable, so finite differences would straddle the corner.
        let shift = |b: &mut ConvBlock| b.norm.beta.fill(4.0);
        for st in &mut net.encoder {
            shift(&mut st.a);
            shift(&mut st.b);
        }
        for dec in &mut net.decoder {
            shift(&mut dec.a);
            shift(&mut dec.b);
        }

        let mut rng = crate::rng::stream(4, "segnet-fd", &[]);
        let x = random_feat([1, 1, 8, 8, 8], &mut rng);
        let r = random_feat([1, 2, 8, 8, 8], &mut rng);

        net.zero_grad();
        let (_probs, _, cache) = net.forward_segmentation(&x).unwrap();
        let dx = net.backward_segmentation(&cache, &r);
        let analytic = net.grad_vector();
        let loss = |n: &SegNet| {
            let (p, _, _) = n.forward_segmentation(&x).unwrap();
            loss_inner(&p, &r)
        };

        // Whole-network f32 forwards are too noisy for per-coordinate
        // differences on near-zero gradients, so: the largest gradients are
        // probed individually, and random directional derivatives cover the
        // full vector (including the skip-connection merge) in aggregate.
        check_param_fd_largest(&mut net, loss, &analytic, 40, 8e-2);
        let mut dirs = crate::rng::stream(4, "segnet-fd-dirs", &[]);
        check_directional_fd(&mut net, loss, &analytic, 3, &mut dirs, 5e-2);

        // Input gradient.
        check_input_fd(
            &x,
            |xp| {
                let (p, _, _) = net.forward_segmentation(xp).unwrap();
                loss_inner(&p, &r)
            },
            &dx,
            20,
            8e-2,
        );
    }

    #[test]
    fn encoder_prefix_backward_stops_at_the_stage() {
        let mut net = small_net(3, 5);
        let mut rng = crate::rng::stream(5, "segnet-prefix", &[]);
        let x = random_feat([1, 1, 16, 16, 16], &mut rng);

        net.zero_grad();
        let (taps, cache) = net.forward_encoder(&x, false).unwrap();
        let dtap = random_feat_like(&taps[1].feat, &mut rng); // stage 2
        net.backward_encoder_prefix(&cache, 2, &dtap);

        let grads = |st: &mut EncoderStage| {
            let mut g = st.a.grad_vector();
            g.extend(st.b.grad_vector());
            g
        };
        for (i, expect_grad) in [(0, true), (1, true), (2, false)] {
            let g = grads(&mut net.encoder[i]);
            let nonzero = g.iter().any(|&v| v != 0.0);
            assert_eq!(nonzero, expect_grad, "stage {}", i + 1);
        }
        // Decoder and head untouched.
        for dec in &mut net.decoder {
            assert!(dec.up.grad_vector().iter().all(|&v| v == 0.0));
        }
        assert!(net.head.grad_vector().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn prefix_optimiser_step_only_moves_prefix_parameters() {
        let mut net = small_net(3, 6);
        let mut rng = crate::rng::stream(6, "segnet-prefix-step", &[]);
        let x = random_feat([1, 1, 16, 16, 16], &mut rng);

        net.zero_grad();
        let (taps, cache) = net.forward_encoder(&x, false).unwrap();
        let dtap = random_feat_like(&taps[1].feat, &mut rng);
        net.backward_encoder_prefix(&cache, 2, &dtap);

        let before = net.param_vector();
        let before_prefix_len: usize =
            EncoderPrefix { net: &mut net, max_stage: 2 }.param_count();
        let mut sgd = Sgd::new(1e-2, 0.0, false);
        sgd.step(&mut EncoderPrefix { net: &mut net, max_stage: 2 });
        let after = net.param_vector();

        // Visit order puts stages 1..=2 first, so the prefix is a contiguous
        // leading span of the flat parameter vector.
        let moved: Vec<usize> =
            (0..before.len()).filter(|&i| before[i] != after[i]).collect();
        assert!(!moved.is_empty());
        assert!(moved.iter().all(|&i| i < before_prefix_len));
        // Every block in the prefix moved somewhere.
        let a0 = net.encoder[0].a.param_count();
        assert!(moved.iter().any(|&i| i < a0));
        assert!(moved.iter().any(|&i| i >= a0));
    }

    #[test]
    fn finite_difference_check_covers_encoder_prefix() {
        let mut net = small_net(2, 7);
        let shift = |b: &mut ConvBlock| b.norm.beta.fill(4.0);
        for st in &mut net.encoder {
            shift(&mut st.a);
            shift(&mut st.b);
        }
        let mut rng = crate::rng::stream(7, "segnet-prefix-fd", &[]);
        let x = random_feat([1, 1, 8, 8, 8], &mut rng);

        let (taps, _) = net.forward_encoder(&x, false).unwrap();
        let r = random_feat_like(&taps[1].feat, &mut rng); // stage 2 tap

        let mut prefix = EncoderPrefix { net: &mut net, max_stage: 2 };
        prefix.zero_grad();
        let (_, cache) = prefix.net.forward_encoder(&x, false).unwrap();
        prefix.net.backward_encoder_prefix(&cache, 2, &r);
        let analytic = prefix.grad_vector();
        let loss = |pf: &EncoderPrefix| {
            let (taps, _) = pf.net.forward_encoder(&x, false).unwrap();
            loss_inner(&taps[1].feat, &r)
        };

        check_param_fd_largest(&mut prefix, loss, &analytic, 30, 8e-2);
        let mut dirs = crate::rng::stream(7, "segnet-prefix-dirs", &[]);
        check_directional_fd(&mut prefix, loss, &analytic, 3, &mut dirs, 5e-2);
    }
}
