//! The conv → instance norm → LeakyReLU unit both networks are built from.

use serde::{Deserialize, Serialize};

use super::conv::Conv3d;
use super::norm::{InstanceNorm3d, NormCache};
use super::ops::{leaky_relu, leaky_relu_backward};
use super::visit::{ParamSlot, VisitParams};
use super::{Feat, LEAKY_SLOPE};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvBlock {
    pub conv: Conv3d,
    pub norm: InstanceNorm3d,
}

/// Everything the block's backward pass needs.
#[derive(Debug, Clone)]
pub struct ConvBlockCache {
    pub x: Feat,
    pub norm: NormCache,
    /// Block output; its sign decides the LeakyReLU gradient factor.
    pub y: Feat,
}

impl ConvBlock {
    pub fn new(ci: usize, co: usize, stride: [usize; 3], rng: &mut ChaCha8Rng) -> Self {
        ConvBlock { conv: Conv3d::new(ci, co, 3, stride, rng), norm: InstanceNorm3d::new(co) }
    }

    pub fn out_spatial(&self, input: [usize; 3]) -> [usize; 3] {
        self.conv.out_spatial(input)
    }

    pub fn forward(&self, x: &Feat) -> (Feat, ConvBlockCache) {
        let z = self.conv.forward(x);
        let (n, norm_cache) = self.norm.forward(&z);
        let y = leaky_relu(&n, LEAKY_SLOPE);
        (y.clone(), ConvBlockCache { x: x.clone(), norm: norm_cache, y })
    }

    pub fn backward(&mut self, cache: &ConvBlockCache, dy: &Feat) -> Feat {
        let dn = leaky_relu_backward(&cache.y, dy, LEAKY_SLOPE);
        let dz = self.norm.backward(&cache.norm, &dn);
        self.conv.backward(&cache.x, &dz)
    }

    pub fn backward_data(&self, cache: &ConvBlockCache, dy: &Feat) -> Feat {
        let dn = leaky_relu_backward(&cache.y, dy, LEAKY_SLOPE);
        let dz = self.norm.backward_data(&cache.norm, &dn);
        self.conv.backward_data(&cache.x, &dz)
    }
}

impl VisitParams for ConvBlock {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamSlot<'_>)) {
        self.conv.visit_params(f);
        self.norm.visit_params(f);
    }
}
