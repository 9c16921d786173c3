//! Whole-volume prediction: sliding-window tiling plus an 8-way
//! axis-mirroring ensemble.
//!
//! Volumes rarely match the training patch size. Larger volumes are tiled
//! with 50 %-overlapping windows whose predictions are averaged; smaller
//! axes are zero-padded up to the patch and the result is cropped back.
//! Each window is optionally predicted as the average over all eight axis
//! mirrorings (each prediction un-mirrored before averaging).
//!
//! The mirror ensemble commutes with axis flips by construction — flipping
//! the input volume flips the ensembled prediction — which is the symmetry
//! the averaging buys. Individual stride-2 encoder stages are *not* flip
//! equivariant (their downsampling grid is anchored at the array origin),
//! so a single un-ensembled pass does not have this property.

use ndarray::{s, Array3, Axis};

use super::segnet::SegNet;
use crate::error::Result;
use crate::nn::Feat;

/// Window origins covering `0..len` with `patch`-sized windows, stepping by
/// half a patch and clamping the final window flush with the end.
pub fn sliding_windows(len: usize, patch: usize) -> Vec<usize> {
    assert!(patch >= 2 && len >= patch);
    let step = (patch / 2).max(1);
    let mut origins = vec![0];
    while origins.last().unwrap() + patch < len {
        let next = (origins.last().unwrap() + step).min(len - patch);
        origins.push(next);
    }
    origins
}

/// Foreground probability for a single patch-sized volume.
///
/// With `mirror`, all eight axis-mirrorings are pushed through the network
/// as one batch (instance norm is per-sample, so this matches eight single
/// passes exactly) and their un-mirrored probability maps are averaged.
pub fn predict_patch(net: &SegNet, patch: &Array3<f32>, mirror: bool) -> Result<Array3<f32>> {
    let (px, py, pz) = patch.dim();
    let n = if mirror { 8 } else { 1 };
    let mut batch = Feat::zeros((n, 1, px, py, pz));
    for f in 0..n {
        let mut v = patch.view();
        for (bit, axis) in [(1, 0), (2, 1), (4, 2)] {
            if f & bit != 0 {
                v.invert_axis(Axis(axis));
            }
        }
        batch.slice_mut(s![f, 0, .., .., ..]).assign(&v);
    }

    let (probs, _, _) = net.forward_segmentation(&batch)?;

    let mut acc = Array3::<f64>::zeros((px, py, pz));
    for f in 0..n {
        let mut fg = probs.slice(s![f, 1, .., .., ..]);
        for (bit, axis) in [(1, 0), (2, 1), (4, 2)] {
            if f & bit != 0 {
                fg.invert_axis(Axis(axis));
            }
        }
        acc.zip_mut_with(&fg, |a, &p| *a += p as f64);
    }
    Ok(acc.mapv(|a| (a / n as f64) as f32))
}

/// Foreground probability map for a whole volume, any shape.
pub fn predict_volume(
    net: &SegNet,
    volume: &Array3<f32>,
    patch: [usize; 3],
    mirror: bool,
) -> Result<Array3<f32>> {
    let dim = volume.dim();
    let orig = [dim.0, dim.1, dim.2];
    let padded_shape = [orig[0].max(patch[0]), orig[1].max(patch[1]), orig[2].max(patch[2])];
    let mut padded = Array3::<f32>::zeros(padded_shape);
    padded
        .slice_mut(s![..orig[0], ..orig[1], ..orig[2]])
        .assign(&volume.view());

    let origins: Vec<Vec<usize>> = (0..3)
        .map(|a| sliding_windows(padded_shape[a], patch[a]))
        .collect();

    let mut acc = Array3::<f64>::zeros(padded_shape);
    let mut weight = Array3::<f64>::zeros(padded_shape);
    for &ox in &origins[0] {
        for &oy in &origins[1] {
            for &oz in &origins[2] {
                let window = s![ox..ox + patch[0], oy..oy + patch[1], oz..oz + patch[2]];
                let tile = padded.slice(window).to_owned();
                let fg = predict_patch(net, &tile, mirror)?;
                acc.slice_mut(window).zip_mut_with(&fg, |a, &p| *a += p as f64);
                weight.slice_mut(window).mapv_inplace(|w| w + 1.0);
            }
        }
    }

    let mut out = Array3::<f32>::zeros(padded_shape);
    ndarray::azip!((o in &mut out, &a in &acc, &w in &weight) *o = (a / w) as f32);
    Ok(out.slice(s![..orig[0], ..orig[1], ..orig[2]]).to_owned())
}

/// Mirror-ensembled whole-volume prediction.
pub fn predict_with_mirroring(net: &SegNet, volume: &Array3<f32>, patch: [usize; 3]) -> Result<Array3<f32>> {
    predict_volume(net, volume, patch, true)
}
