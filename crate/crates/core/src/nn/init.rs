//! Weight initialisation: He (Kaiming) normal, `N(0, sqrt(2 / fan_in))`,
//! matched to the LeakyReLU nonlinearity used everywhere. Draw order is
//! fixed by construction order, so a given seed always produces the same
//! network.

use ndarray::{Array, Dimension, IntoDimension};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn he_normal<D: Dimension, Sh: IntoDimension<Dim = D>>(
    shape: Sh,
    fan_in: usize,
    rng: &mut ChaCha8Rng,
) -> Array<f32, D> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("std is finite and positive");
    let mut arr = Array::zeros(shape.into_dimension());
    for v in arr.iter_mut() {
        *v = dist.sample(rng) as f32;
    }
    arr
}
