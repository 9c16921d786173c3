//! 3D convolution (im2col + GEMM) and the 2x2x2 stride-2 transposed
//! convolution used for decoder upsampling.
//!
//! im2col unrolls each input window into a column so the convolution becomes
//! one matrix product per sample, `[co, ci*k^3] x [ci*k^3, n_out]`, which is
//! where virtually all training time goes. The backward pass reuses the same
//! unrolling: `dW = dY * cols^T` and `dX = col2im(W^T * dY)`. Columns are
//! rebuilt in the backward pass instead of cached — at 3x3x3 kernels the
//! unrolled matrix is 27x the activation size, far too large to keep per layer.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array5, ArrayView4, ArrayViewMut4, Axis};
use serde::{Deserialize, Serialize};

use super::init::he_normal;
use super::visit::{ParamSlot, VisitParams};
use super::Feat;
use rand_chacha::ChaCha8Rng;

/// Output extent of one axis for kernel `k`, padding `p`, stride `s`.
fn out_len(n: usize, k: usize, p: usize, s: usize) -> usize {
    (n + 2 * p - k) / s + 1
}

/// Unroll `x` (`[ci, X, Y, Z]`) into `[ci * k^3, ox * oy * oz]` columns.
///
/// Out-of-bounds taps read as zero. The inner z run is a contiguous slice
/// copy when `stride == 1`, which is the common case for every first-stage
/// convolution.
fn im2col(
    x: &ArrayView4<f32>,
    k: usize,
    p: usize,
    stride: [usize; 3],
    out: [usize; 3],
) -> Array2<f32> {
    let (ci, xs, ys, zs) = x.dim();
    let [ox, oy, oz] = out;
    let n = ox * oy * oz;
    let mut cols = Array2::<f32>::zeros((ci * k * k * k, n));
    let x_flat = x.as_slice().expect("im2col input must be standard layout");
    let cols_flat = cols.as_slice_mut().unwrap();
    let [sx, sy, sz] = stride;

    let mut r = 0usize;
    for c in 0..ci {
        for kx in 0..k {
            for ky in 0..k {
                for kz in 0..k {
                    let row = &mut cols_flat[r * n..(r + 1) * n];
                    for oxi in 0..ox {
                        let src_x = (oxi * sx + kx) as isize - p as isize;
                        if src_x < 0 || src_x >= xs as isize {
                            continue; // whole plane out of bounds, stays zero
                        }
                        for oyi in 0..oy {
                            let src_y = (oyi * sy + ky) as isize - p as isize;
                            if src_y < 0 || src_y >= ys as isize {
                                continue;
                            }
                            let dst_base = (oxi * oy + oyi) * oz;
                            let src_base = ((c * xs + src_x as usize) * ys + src_y as usize) * zs;
                            if sz == 1 && p <= kz && kz - p + oz <= zs {
                                // full-width contiguous run
                                let s0 = src_base + (kz - p);
                                row[dst_base..dst_base + oz]
                                    .copy_from_slice(&x_flat[s0..s0 + oz]);
                            } else {
                                for ozi in 0..oz {
                                    let src_z = (ozi * sz + kz) as isize - p as isize;
                                    if src_z >= 0 && src_z < zs as isize {
                                        row[dst_base + ozi] = x_flat[src_base + src_z as usize];
                                    }
                                }
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back onto an input gradient.
fn col2im_add(
    cols: &Array2<f32>,
    dx: &mut ArrayViewMut4<f32>,
    k: usize,
    p: usize,
    stride: [usize; 3],
    out: [usize; 3],
) {
    let (ci, xs, ys, zs) = dx.dim();
    let [ox, oy, oz] = out;
    let n = ox * oy * oz;
    let cols_flat = cols.as_slice().unwrap();
    let dx_flat = dx.as_slice_mut().expect("col2im target must be standard layout");
    let [sx, sy, sz] = stride;

    let mut r = 0usize;
    for c in 0..ci {
        for kx in 0..k {
            for ky in 0..k {
                for kz in 0..k {
                    let row = &cols_flat[r * n..(r + 1) * n];
                    for oxi in 0..ox {
                        let src_x = (oxi * sx + kx) as isize - p as isize;
                        if src_x < 0 || src_x >= xs as isize {
                            continue;
                        }
                        for oyi in 0..oy {
                            let src_y = (oyi * sy + ky) as isize - p as isize;
                            if src_y < 0 || src_y >= ys as isize {
                                continue;
                            }
                            let dst_base = (oxi * oy + oyi) * oz;
                            let src_base = ((c * xs + src_x as usize) * ys + src_y as usize) * zs;
                            if sz == 1 && p <= kz && kz - p + oz <= zs {
                                let s0 = src_base + (kz - p);
                                for (d, v) in dx_flat[s0..s0 + oz]
                                    .iter_mut()
                                    .zip(&row[dst_base..dst_base + oz])
                                {
                                    *d += v;
                                }
                            } else {
                                for ozi in 0..oz {
                                    let src_z = (ozi * sz + kz) as isize - p as isize;
                                    if src_z >= 0 && src_z < zs as isize {
                                        dx_flat[src_base + src_z as usize] += row[dst_base + ozi];
                                    }
                                }
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

/// 3D convolution with cubic kernel, "same" padding (`k/2`), per-axis stride.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Conv3d {
    pub w: Array5<f32>, // [co, ci, k, k, k]
    pub b: Array1<f32>,
    pub gw: Array5<f32>,
    pub gb: Array1<f32>,
    pub kernel: usize,
    pub stride: [usize; 3],
}

impl Conv3d {
    pub fn new(ci: usize, co: usize, kernel: usize, stride: [usize; 3], rng: &mut ChaCha8Rng) -> Self {
        let w = he_normal([co, ci, kernel, kernel, kernel], ci * kernel.pow(3), rng);
        Conv3d {
            gw: Array5::zeros(w.raw_dim()),
            w,
            b: Array1::zeros(co),
            gb: Array1::zeros(co),
            kernel,
            stride,
        }
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_spatial(&self, input: [usize; 3]) -> [usize; 3] {
        let p = self.pad();
        [
            out_len(input[0], self.kernel, p, self.stride[0]),
            out_len(input[1], self.kernel, p, self.stride[1]),
            out_len(input[2], self.kernel, p, self.stride[2]),
        ]
    }

    pub fn forward(&self, x: &Feat) -> Feat {
        let (bs, ci, xs, ys, zs) = x.dim();
        let co = self.w.dim().0;
        debug_assert_eq!(ci, self.w.dim().1);
        let o = self.out_spatial([xs, ys, zs]);
        let n = o[0] * o[1] * o[2];
        let k3 = self.kernel.pow(3);
        let w2 = self.w.view().into_shape_with_order((co, ci * k3)).unwrap();
        let mut y = Feat::zeros((bs, co, o[0], o[1], o[2]));
        for bi in 0..bs {
            let cols = im2col(&x.index_axis(Axis(0), bi), self.kernel, self.pad(), self.stride, o);
            let mut y2 = Array2::<f32>::zeros((co, n));
            for (c, mut row) in y2.axis_iter_mut(Axis(0)).enumerate() {
                row.fill(self.b[c]);
            }
            general_mat_mul(1.0, &w2, &cols.view(), 1.0, &mut y2);
            y.index_axis_mut(Axis(0), bi)
                .assign(&y2.into_shape_with_order((co, o[0], o[1], o[2])).unwrap());
        }
        y
    }

    fn backward_impl(&self, x: &Feat, dy: &Feat, mut grads: Option<(&mut Array5<f32>, &mut Array1<f32>)>) -> Feat {
        let (bs, ci, xs, ys, zs) = x.dim();
        let co = self.w.dim().0;
        let o = self.out_spatial([xs, ys, zs]);
        let n = o[0] * o[1] * o[2];
        let k3 = self.kernel.pow(3);
        let w2 = self.w.view().into_shape_with_order((co, ci * k3)).unwrap();
        let mut dx = Feat::zeros(x.raw_dim());
        let mut dcols = Array2::<f32>::zeros((ci * k3, n));
        for bi in 0..bs {
            let dy2 = dy
                .index_axis(Axis(0), bi)
                .into_shape_with_order((co, n))
                .unwrap();
            if let Some((gw, gb)) = grads.as_mut() {
                let cols =
                    im2col(&x.index_axis(Axis(0), bi), self.kernel, self.pad(), self.stride, o);
                let mut gw2 = gw.view_mut().into_shape_with_order((co, ci * k3)).unwrap();
                general_mat_mul(1.0, &dy2, &cols.t(), 1.0, &mut gw2);
                **gb += &dy2.sum_axis(Axis(1));
            }
            general_mat_mul(1.0, &w2.t(), &dy2, 0.0, &mut dcols);
            col2im_add(
                &dcols,
                &mut dx.index_axis_mut(Axis(0), bi),
                self.kernel,
                self.pad(),
                self.stride,
                o,
            );
        }
        dx
    }

    /// Backward pass that accumulates `gw`/`gb` and returns the input gradient.
    pub fn backward(&mut self, x: &Feat, dy: &Feat) -> Feat {
        // Split borrows: weights are read, gradients are written.
        let mut gw = std::mem::take(&mut self.gw);
        let mut gb = std::mem::take(&mut self.gb);
        let dx = self.backward_impl(x, dy, Some((&mut gw, &mut gb)));
        self.gw = gw;
        self.gb = gb;
        dx
    }

    /// Gradient w.r.t. the input only; parameter state is untouchable.
    pub fn backward_data(&self, x: &Feat, dy: &Feat) -> Feat {
        self.backward_impl(x, dy, None)
    }
}

impl VisitParams for Conv3d {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamSlot<'_>)) {
        f(ParamSlot {
            value: self.w.as_slice_mut().unwrap(),
            grad: self.gw.as_slice_mut().unwrap(),
        });
        f(ParamSlot {
            value: self.b.as_slice_mut().unwrap(),
            grad: self.gb.as_slice_mut().unwrap(),
        });
    }
}

/// Transposed convolution with 2x2x2 kernel and stride 2 (exact doubling).
///
/// Because kernel size equals stride, every output voxel is produced by
/// exactly one input voxel and one kernel offset, so forward is eight
/// scatter GEMMs and backward is the mirror image — no overlap bookkeeping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvTranspose3d {
    pub w: Array5<f32>, // [ci, co, 2, 2, 2]
    pub b: Array1<f32>,
    pub gw: Array5<f32>,
    pub gb: Array1<f32>,
}

impl ConvTranspose3d {
    pub fn new(ci: usize, co: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = he_normal([ci, co, 2, 2, 2], ci * 8, rng);
        ConvTranspose3d {
            gw: Array5::zeros(w.raw_dim()),
            w,
            b: Array1::zeros(co),
            gb: Array1::zeros(co),
        }
    }

    pub fn forward(&self, x: &Feat) -> Feat {
        let (bs, ci, xs, ys, zs) = x.dim();
        let co = self.w.dim().1;
        debug_assert_eq!(ci, self.w.dim().0);
        let mut y = Feat::zeros((bs, co, 2 * xs, 2 * ys, 2 * zs));
        let n = xs * ys * zs;
        for bi in 0..bs {
            let xmat = x
                .index_axis(Axis(0), bi)
                .into_shape_with_order((ci, n))
                .unwrap();
            for kx in 0..2 {
                for ky in 0..2 {
                    for kz in 0..2 {
                        let wk = self.w.slice(s![.., .., kx, ky, kz]); // [ci, co]
                        let mut ymat = Array2::<f32>::zeros((co, n));
                        for (c, mut row) in ymat.axis_iter_mut(Axis(0)).enumerate() {
                            row.fill(self.b[c]);
                        }
                        general_mat_mul(1.0, &wk.t(), &xmat, 1.0, &mut ymat);
                        y.slice_mut(s![bi, .., kx..;2, ky..;2, kz..;2])
                            .assign(&ymat.into_shape_with_order((co, xs, ys, zs)).unwrap());
                    }
                }
            }
        }
        y
    }

    fn backward_impl(
        &self,
        x: &Feat,
        dy: &Feat,
        mut grads: Option<(&mut Array5<f32>, &mut Array1<f32>)>,
    ) -> Feat {
        let (bs, ci, xs, ys, zs) = x.dim();
        let co = self.w.dim().1;
        let n = xs * ys * zs;
        let mut dx = Feat::zeros(x.raw_dim());
        for bi in 0..bs {
            let xmat = x
                .index_axis(Axis(0), bi)
                .into_shape_with_order((ci, n))
                .unwrap();
            let mut dxmat = Array2::<f32>::zeros((ci, n));
            for kx in 0..2 {
                for ky in 0..2 {
                    for kz in 0..2 {
                        let dyk = dy
                            .slice(s![bi, .., kx..;2, ky..;2, kz..;2])
                            .to_owned()
                            .into_shape_with_order((co, n))
                            .unwrap();
                        if let Some((gw, gb)) = grads.as_mut() {
                            let mut gwk = gw.slice_mut(s![.., .., kx, ky, kz]);
                            general_mat_mul(1.0, &xmat, &dyk.t(), 1.0, &mut gwk);
                            **gb += &dyk.sum_axis(Axis(1));
                        }
                        let wk = self.w.slice(s![.., .., kx, ky, kz]);
                        general_mat_mul(1.0, &wk, &dyk.view(), 1.0, &mut dxmat);
                    }
                }
            }
            dx.index_axis_mut(Axis(0), bi)
                .assign(&dxmat.into_shape_with_order((ci, xs, ys, zs)).unwrap());
        }
        dx
    }

    pub fn backward(&mut self, x: &Feat, dy: &Feat) -> Feat {
        let mut gw = std::mem::take(&mut self.gw);
        let mut gb = std::mem::take(&mut self.gb);
        let dx = self.backward_impl(x, dy, Some((&mut gw, &mut gb)));
        self.gw = gw;
        self.gb = gb;
        dx
    }

    pub fn backward_data(&self, x: &Feat, dy: &Feat) -> Feat {
        self.backward_impl(x, dy, None)
    }
}

impl VisitParams for ConvTranspose3d {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamSlot<'_>)) {
        f(ParamSlot {
            value: self.w.as_slice_mut().unwrap(),
            grad: self.gw.as_slice_mut().unwrap(),
        });
        f(ParamSlot {
            value: self.b.as_slice_mut().unwrap(),
            grad: self.gb.as_slice_mut().unwrap(),
        });
    }
}
