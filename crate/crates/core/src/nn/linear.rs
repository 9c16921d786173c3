//! Fully connected layer for the classifier heads.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::init::he_normal;
use super::visit::{ParamSlot, VisitParams};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear {
    pub w: Array2<f32>, // [out, in]
    pub b: Array1<f32>,
    pub gw: Array2<f32>,
    pub gb: Array1<f32>,
}

impl Linear {
    pub fn new(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = he_normal([outputs, inputs], inputs, rng);
        Linear {
            gw: Array2::zeros(w.raw_dim()),
            w,
            b: Array1::zeros(outputs),
            gb: Array1::zeros(outputs),
        }
    }

    /// `[batch, in] -> [batch, out]`.
    pub fn forward(&self, x: &Array2<f32>) -> Array2<f32> {
        let (bs, _) = x.dim();
        let out = self.w.dim().0;
        let mut y = Array2::<f32>::zeros((bs, out));
        for mut row in y.axis_iter_mut(Axis(0)) {
            row.assign(&self.b);
        }
        general_mat_mul(1.0, x, &self.w.t(), 1.0, &mut y);
        y
    }

    fn backward_impl(
        &self,
        x: &Array2<f32>,
        dy: &Array2<f32>,
        grads: Option<(&mut Array2<f32>, &mut Array1<f32>)>,
    ) -> Array2<f32> {
        if let Some((gw, gb)) = grads {
            general_mat_mul(1.0, &dy.t(), x, 1.0, gw);
            *gb += &dy.sum_axis(Axis(0));
        }
        let mut dx = Array2::<f32>::zeros(x.raw_dim());
        general_mat_mul(1.0, dy, &self.w, 0.0, &mut dx);
        dx
    }

    pub fn backward(&mut self, x: &Array2<f32>, dy: &Array2<f32>) -> Array2<f32> {
        let mut gw = std::mem::take(&mut self.gw);
        let mut gb = std::mem::take(&mut self.gb);
        let dx = self.backward_impl(x, dy, Some((&mut gw, &mut gb)));
        self.gw = gw;
        self.gb = gb;
        dx
    }

    pub fn backward_data(&self, x: &Array2<f32>, dy: &Array2<f32>) -> Array2<f32> {
        self.backward_impl(x, dy, None)
    }
}

impl VisitParams for Linear {
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
