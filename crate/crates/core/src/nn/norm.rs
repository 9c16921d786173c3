//! Instance normalisation over the spatial extent of each `(sample, channel)`
//! slice, with learnable per-channel affine parameters.
//!
//! Forward caches the normalised activations and inverse standard deviations;
//! backward uses the standard three-term expression
//! `dx = invstd/n * (n*dxhat - sum(dxhat) - xhat * sum(dxhat * xhat))`
//! with `dxhat = dy * gamma`. Statistics are accumulated in `f64`: spatial
//! slices run to 128^3 voxels and naive `f32` sums lose enough precision to
//! bias the variance.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::visit::{ParamSlot, VisitParams};
use super::Feat;

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceNorm3d {
    pub gamma: Array1<f32>,
    pub beta: Array1<f32>,
    pub ggamma: Array1<f32>,
    pub gbeta: Array1<f32>,
}

/// What backward needs: normalised activations and `1/sqrt(var + eps)`.
#[derive(Debug, Clone)]
pub struct NormCache {
    pub xhat: Feat,
    pub invstd: Array2<f32>, // [batch, channels]
}

impl InstanceNorm3d {
    pub fn new(channels: usize) -> Self {
        InstanceNorm3d {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            ggamma: Array1::zeros(channels),
            gbeta: Array1::zeros(channels),
        }
    }

    pub fn forward(&self, x: &Feat) -> (Feat, NormCache) {
        let (bs, ch, _, _, _) = x.dim();
        let mut xhat = Feat::zeros(x.raw_dim());
        let mut invstd = Array2::<f32>::zeros((bs, ch));
        for bi in 0..bs {
            for c in 0..ch {
                let slice = x.index_axis(Axis(0), bi);
                let slice = slice.index_axis(Axis(0), c);
                let n = slice.len() as f64;
                let mean = slice.iter().map(|&v| v as f64).sum::<f64>() / n;
                let var = slice.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
                let istd = 1.0 / (var + NORM_EPS).sqrt();
                invstd[[bi, c]] = istd as f32;
                let mut out = xhat.index_axis_mut(Axis(0), bi);
                let mut out = out.index_axis_mut(Axis(0), c);
                for (o, &v) in out.iter_mut().zip(slice.iter()) {
                    *o = ((v as f64 - mean) * istd) as f32;
                }
            }
        }
        let mut y = xhat.clone();
        for bi in 0..bs {
            for c in 0..ch {
                let (g, b) = (self.gamma[c], self.beta[c]);
                let mut out = y.index_axis_mut(Axis(0), bi);
                let mut out = out.index_axis_mut(Axis(0), c);
                out.mapv_inplace(|v| v * g + b);
            }
        }
        (y, NormCache { xhat, invstd })
    }

    fn backward_impl(
        &self,
        cache: &NormCache,
        dy: &Feat,
        mut grads: Option<(&mut Array1<f32>, &mut Array1<f32>)>,
    ) -> Feat {
        let (bs, ch, _, _, _) = dy.dim();
        let mut dx = Feat::zeros(dy.raw_dim());
        for bi in 0..bs {
            for c in 0..ch {
                let dy_s = dy.index_axis(Axis(0), bi);
                let dy_s = dy_s.index_axis(Axis(0), c);
                let xh_s = cache.xhat.index_axis(Axis(0), bi);
                let xh_s = xh_s.index_axis(Axis(0), c);
                let n = dy_s.len() as f64;
                let g = self.gamma[c] as f64;

                let mut sum_dxhat = 0.0f64;
                let mut sum_dxhat_xhat = 0.0f64;
                let mut sum_dy = 0.0f64;
                for (&d, &xh) in dy_s.iter().zip(xh_s.iter()) {
                    let dxhat = d as f64 * g;
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xh as f64;
                    sum_dy += d as f64;
                }
                if let Some((gg, gb)) = grads.as_mut() {
                    // sum(dy * xhat) = sum(dxhat * xhat) / gamma, but compute
                    // it directly to stay defined at gamma == 0.
                    let s: f64 = dy_s
                        .iter()
                        .zip(xh_s.iter())
                        .map(|(&d, &xh)| d as f64 * xh as f64)
                        .sum();
                    gg[c] += s as f32;
                    gb[c] += sum_dy as f32;
                }
                let istd = cache.invstd[[bi, c]] as f64;
                let mut dx_s = dx.index_axis_mut(Axis(0), bi);
                let mut dx_s = dx_s.index_axis_mut(Axis(0), c);
                for ((o, &d), &xh) in dx_s.iter_mut().zip(dy_s.iter()).zip(xh_s.iter()) {
                    let dxhat = d as f64 * g;
                    *o = (istd / n * (n * dxhat - sum_dxhat - xh as f64 * sum_dxhat_xhat)) as f32;
                }
            }
        }
        dx
    }

    pub fn backward(&mut self, cache: &NormCache, dy: &Feat) -> Feat {
        let mut gg = std::mem::take(&mut self.ggamma);
        let mut gb = std::mem::take(&mut self.gbeta);
        let dx = self.backward_impl(cache, dy, Some((&mut gg, &mut gb)));
        self.ggamma = gg;
        self.gbeta = gb;
        dx
    }

    pub fn backward_data(&self, cache: &NormCache, dy: &Feat) -> Feat {
        self.backward_impl(cache, dy, None)
    }
}

impl VisitParams for InstanceNorm3d {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamSlot<'_>)) {
        f(ParamSlot {
            value: self.gamma.as_slice_mut().unwrap(),
            grad: self.ggamma.as_slice_mut().unwrap(),
        });
        f(ParamSlot {
            value: self.beta.as_slice_mut().unwrap(),
            grad: self.gbeta.as_slice_mut().unwrap(),
        });
    }
}
