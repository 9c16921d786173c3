//! Parameter traversal.
//!
//! Optimisers, `zero_grad`, and parameter counting all walk layers through
//! one trait so they agree on ordering. The order is part of the contract:
//! optimiser state (momentum, Adam moments) is stored positionally and
//! checkpointed, so a layer must always visit its tensors in the same
//! sequence (weights before bias, layers in construction order).

/// One named parameter tensor with its gradient, both as flat slices.
pub struct ParamSlot<'a> {
    pub value: &'a mut [f32],
    pub grad: &'a mut [f32],
}

pub trait VisitParams {
    /// Call `f` once per parameter tensor, in a fixed deterministic order.
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamSlot<'_>));

    /// Zero every gradient buffer.
    fn zero_grad(&mut self) {
        self.visit_params(&mut |slot| slot.grad.fill(0.0));
    }

    /// Total number of scalar parameters.
    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |slot| n += slot.value.len());
        n
    }

    /// Snapshot all parameter values (for change-detection in tests).
    fn param_vector(&mut self) -> Vec<f32> {
        let mut v = Vec::new();
        self.visit_params(&mut |slot| v.extend_from_slice(slot.value));
        v
    }

    /// Snapshot all gradients.
    fn grad_vector(&mut self) -> Vec<f32> {
        let mut v = Vec::new();
        self.visit_params(&mut |slot| v.extend_from_slice(slot.grad));
        v
    }
}
