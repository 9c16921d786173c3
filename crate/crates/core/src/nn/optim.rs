//! Optimisers: SGD (optionally Nesterov momentum and polynomial LR decay)
//! and Adam.
//!
//! State buffers are allocated lazily on the first step and addressed by the
//! slot's position in the model's parameter visit order. That order is fixed
//! (see [`super::visit`]), so state survives checkpointing as plain vectors.
//!
//! The unlearning optimiser is momentum-free SGD on purpose: with no
//! velocity, a parameter whose gradient is zero is *provably* unchanged by
//! the step, which is what keeps encoder stages above the tapped one frozen
//! during unlearning.

use serde::{Deserialize, Serialize};

use super::visit::VisitParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyDecay {
    pub power: f64,
    pub total_steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub poly: Option<PolyDecay>,
    pub step_count: usize,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, nesterov: bool) -> Self {
        Sgd { lr, momentum, nesterov, poly: None, step_count: 0, velocity: Vec::new() }
    }

    pub fn with_poly_decay(mut self, power: f64, total_steps: usize) -> Self {
        self.poly = Some(PolyDecay { power, total_steps });
        self
    }

    /// Learning rate for the upcoming step.
    pub fn current_lr(&self) -> f64 {
        match &self.poly {
            None => self.lr,
            Some(p) => {
                let frac = (self.step_count as f64 / p.total_steps as f64).min(1.0);
                self.lr * (1.0 - frac).powf(p.power)
            }
        }
    }

    pub fn step(&mut self, model: &mut dyn VisitParams) {
        let lr = self.current_lr() as f32;
        let mu = self.momentum as f32;
        let nesterov = self.nesterov;
        let velocity = &mut self.velocity;
        let mut slot = 0usize;
        model.visit_params(&mut |p| {
            if velocity.len() == slot {
                velocity.push(vec![0.0; p.value.len()]);
            }
            let v = &mut velocity[slot];
            assert_eq!(v.len(), p.value.len(), "parameter layout changed under optimiser");
            if mu == 0.0 {
                for (w, &g) in p.value.iter_mut().zip(p.grad.iter()) {
                    *w -= lr * g;
                }
            } else {
                for ((w, &g), v) in p.value.iter_mut().zip(p.grad.iter()).zip(v.iter_mut()) {
                    *v = mu * *v + g;
                    let d = if nesterov { g + mu * *v } else { *v };
                    *w -= lr * d;
                }
            }
            slot += 1;
        });
        self.step_count += 1;
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: usize,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step_count: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step(&mut self, model: &mut dyn VisitParams) {
        self.step_count += 1;
        let t = self.step_count as f64;
        let (b1, b2) = (self.beta1, self.beta2);
        let bias1 = 1.0 - b1.powf(t);
        let bias2 = 1.0 - b2.powf(t);
        let lr = self.lr;
        let eps = self.eps;
        let (m, v) = (&mut self.m, &mut self.v);
        let mut slot = 0usize;
        model.visit_params(&mut |p| {
            if m.len() == slot {
                m.push(vec![0.0; p.value.len()]);
                v.push(vec![0.0; p.value.len()]);
            }
            let (ms, vs) = (&mut m[slot], &mut v[slot]);
            assert_eq!(ms.len(), p.value.len(), "parameter layout changed under optimiser");
            for i in 0..p.value.len() {
                let g = p.grad[i] as f64;
                let mi = b1 * ms[i] as f64 + (1.0 - b1) * g;
                let vi = b2 * vs[i] as f64 + (1.0 - b2) * g * g;
                ms[i] = mi as f32;
                vs[i] = vi as f32;
                let update = lr * (mi / bias1) / ((vi / bias2).sqrt() + eps);
                p.value[i] -= update as f32;
            }
            slot += 1;
        });
    }
}
