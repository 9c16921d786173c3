//! The layer zoo: exactly the pieces the two networks need, nothing more.
//!
//! All feature maps are `f32` arrays of shape `[batch, channels, x, y, z]`
//! ([`Feat`]). Every layer exposes an explicit `forward` that returns the
//! output plus whatever the backward pass will need, and two backward
//! flavours:
//!
//! * `backward(&mut self, ...)` accumulates parameter gradients *and* returns
//!   the input gradient — used when the layer itself is being trained;
//! * `backward_data(&self, ...)` returns only the input gradient and cannot
//!   touch parameter state — used when gradients merely pass *through* a
//!   frozen layer (the domain classifiers during unlearning).
//!
//! Making the frozen path take `&self` turns "classifier weights must not
//! move during unlearning" from a convention into a type-system fact.
//!
//! Gradients are accumulated in the layers themselves (`zero_grad`, then one
//! or more backward passes, then an optimiser step via [`visit::VisitParams`]).
//! Visit order is deterministic, which keeps optimiser state aligned across
//! save/load and is what makes training bit-reproducible.

pub mod block;
pub mod conv;
pub mod init;
pub mod linear;
pub mod norm;
pub mod ops;
pub mod optim;
#[cfg(test)]
pub(crate) mod testutil;
pub mod visit;

pub use block::{ConvBlock, ConvBlockCache};
pub use conv::{Conv3d, ConvTranspose3d};
pub use linear::Linear;
pub use norm::InstanceNorm3d;
pub use optim::{Adam, Sgd};
pub use visit::VisitParams;

/// Batched 3D feature map: `[batch, channels, x, y, z]`.
pub type Feat = ndarray::Array5<f32>;

/// Negative slope shared by every LeakyReLU in both networks.
pub const LEAKY_SLOPE: f32 = 0.01;
