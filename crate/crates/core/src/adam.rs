//! Adam optimizer with per-kernel update masking.
//!
//! The update plan decides which parameters may move: body kernels by kernel
//! bit, body biases by filter bit, and whole slots (output heads) by slot
//! index. Everything else is bit-identical before and after a step, and the
//! moment accumulators of masked-out parameters are not advanced.

use crate::bitset::Bitset;
use crate::error::{Error, Result};
use crate::masks::KernelLayout;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

/// Which parameters a training phase is allowed to update.
#[derive(Debug, Clone)]
pub struct UpdatePlan {
    /// Trainable kernels over the body layout.
    pub kernels: Bitset,
    /// Filters whose bias is trainable.
    pub filters: Bitset,
    /// Store slots updated wholesale (output heads).
    pub full_slots: Vec<usize>,
}

impl UpdatePlan {
    pub fn everything(layout: &KernelLayout, full_slots: Vec<usize>) -> Self {
        UpdatePlan {
            kernels: Bitset::ones(layout.kernel_count()),
            filters: Bitset::ones(layout.filter_count()),
            full_slots,
        }
    }

    pub fn trainable_param_count(&self) -> usize {
        self.kernels.count() + self.filters.count() + self.full_slots.len()
    }
}

#[derive(Debug, Clone)]
struct SlotMoments<S: Scalar> {
    m_kernels: Tensor<S>,
    v_kernels: Tensor<S>,
    m_bias: Vec<S>,
    v_bias: Vec<S>,
}

/// Optimizer state: first/second moment per parameter plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState<S: Scalar> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    step: u64,
    slots: Vec<SlotMoments<S>>,
}

/// Outcome of one step; `updated` counts moved parameter elements.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepStats {
    pub updated: usize,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(store: &ParamStore<S>, lr: f64) -> Self {
        let slots = store
            .iter()
            .map(|slot| SlotMoments {
                m_kernels: Tensor::zeros(slot.params.kernels.shape()),
                v_kernels: Tensor::zeros(slot.params.kernels.shape()),
                m_bias: vec![S::zero(); slot.params.bias.len()],
                v_bias: vec![S::zero(); slot.params.bias.len()],
            })
            .collect();
        AdamState {
            lr: S::from_f64(lr),
            beta1: S::from_f64(0.9),
            beta2: S::from_f64(0.999),
            eps: S::from_f64(1e-8),
            step: 0,
            slots,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Register moments for a slot appended to the store after `new` (a task
    /// head created mid-run).
    pub fn sync_slots(&mut self, store: &ParamStore<S>) {
        for slot in store.iter().skip(self.slots.len()) {
            self.slots.push(SlotMoments {
                m_kernels: Tensor::zeros(slot.params.kernels.shape()),
                v_kernels: Tensor::zeros(slot.params.kernels.shape()),
                m_bias: vec![S::zero(); slot.params.bias.len()],
                v_bias: vec![S::zero(); slot.params.bias.len()],
            });
        }
    }

    /// One Adam step over the plan's trainable parameters. Gradients must
    /// already be populated. Returns how many elements moved; an empty plan
    /// is a no-op, not an error.
    pub fn step(
        &mut self,
        store: &mut ParamStore<S>,
        layout: &KernelLayout,
        plan: &UpdatePlan,
    ) -> Result<StepStats> {
        if self.slots.len() != store.len() {
            return Err(Error::State(format!(
                "optimizer tracks {} slots, store has {}",
                self.slots.len(),
                store.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = S::one() - self.beta1.powi(t);
        let bc2 = S::one() - self.beta2.powi(t);
        let one = S::one();
        let mut updated = 0usize;

        let body_layers = layout.layer_count();
        for (slot_idx, moments) in self.slots.iter_mut().enumerate() {
            let slot = store.slot_mut(slot_idx);
            let is_body = slot_idx < body_layers;
            let full = plan.full_slots.contains(&slot_idx);
            if !is_body && !full {
                continue;
            }

            // kernels: (oc, ic, r, r) blocks share one trainability bit
            let kshape = slot.params.kernels.shape();
            let block = kshape.h * kshape.w;
            let values = slot.params.kernels.data_mut();
            let grads = slot.grads.kernels.data();
            let m = moments.m_kernels.data_mut();
            let v = moments.v_kernels.data_mut();
            let kernel_count = kshape.n * kshape.c;
            for k in 0..kernel_count {
                let trainable = if full {
                    true
                } else {
                    // layer index == slot index for body layers
                    let dims = layout.layer_dims(slot_idx);
                    debug_assert_eq!(dims.out_ch * dims.in_ch, kernel_count);
                    let addr = crate::masks::KernelAddress {
                        layer: slot_idx,
                        out_ch: k / dims.in_ch,
                        in_ch: k % dims.in_ch,
                    };
                    plan.kernels.get(layout.kernel_index(addr))
                };
                if !trainable {
                    continue;
                }
                let lo = k * block;
                for i in lo..lo + block {
                    let g = grads[i];
                    m[i] = self.beta1 * m[i] + (one - self.beta1) * g;
                    v[i] = self.beta2 * v[i] + (one - self.beta2) * g * g;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    values[i] = values[i] - self.lr * m_hat / (v_hat.sqrt() + self.eps);
                    updated += 1;
                }
            }

            // biases: one trainability bit per filter
            for (oc, b) in slot.params.bias.iter_mut().enumerate() {
                let trainable = if full {
                    true
                } else {
                    plan.filters.get(layout.filter_index(slot_idx, oc))
                };
                if !trainable {
                    continue;
                }
                let g = slot.grads.bias[oc];
                let m = &mut moments.m_bias[oc];
                let v = &mut moments.v_bias[oc];
                *m = self.beta1 * *m + (one - self.beta1) * g;
                *v = self.beta2 * *v + (one - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *b = *b - self.lr * m_hat / (v_hat.sqrt() + self.eps);
                updated += 1;
            }
        }
        if updated == 0 {
            log::warn!("adam step with empty trainable set: no-op");
        }
        Ok(StepStats { updated })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::LayerDims;
    use crate::params::ConvParams;
    use crate::tensor::Shape;

    fn one_param_store(w: f32) -> (ParamStore<f32>, KernelLayout) {
        let mut store = ParamStore::new();
        let params = ConvParams::new(
            Tensor::from_vec(Shape::new(1, 1, 1, 1).unwrap(), vec![w]).unwrap(),
            vec![0.5],
            1,
            0,
        )
        .unwrap();
        store.push("conv0", params).unwrap();
        let layout = KernelLayout::new(vec![LayerDims { out_ch: 1, in_ch: 1 }]);
        (store, layout)
    }

    /// Independent single-scalar Adam reference.
    fn adam_reference(theta: f64, g: f64, lr: f64, steps: usize) -> f64 {
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let (mut m, mut v, mut th) = (0.0, 0.0, theta);
        for t in 1..=steps {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh: f64 = v / (1.0 - b2.powi(t as i32));
            th -= lr * mh / (vh.sqrt() + eps);
        }
        th
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let (mut store, layout) = one_param_store(1.0);
        let mut adam = AdamState::new(&store, 0.1);
        let plan = UpdatePlan::everything(&layout, vec![]);
        adam.step(&mut store, &layout, &plan).unwrap();
        assert_eq!(store.slot(0).params.kernels.data(), &[1.0]);
        assert_eq!(store.slot(0).params.bias, vec![0.5]);
    }

    #[test]
    fn single_step_matches_hand_reference() {
        let (mut store, layout) = one_param_store(1.0);
        store.slot_mut(0).grads.kernels.data_mut()[0] = 1.0;
        let mut adam = AdamState::new(&store, 0.1);
        let plan = UpdatePlan::everything(&layout, vec![]);
        adam.step(&mut store, &layout, &plan).unwrap();
        let expect = adam_reference(1.0, 1.0, 0.1, 1) as f32;
        let got = store.slot(0).params.kernels.data()[0];
        assert!((got - expect).abs() < 1e-6, "{got} vs {expect}");
        // decreases by roughly lr
        assert!((got - (1.0 - 0.1)).abs() < 1e-6);
    }

    #[test]
    fn multi_step_matches_hand_reference() {
        let (mut store, layout) = one_param_store(0.3);
        let mut adam = AdamState::new(&store, 0.05);
        let plan = UpdatePlan::everything(&layout, vec![]);
        for _ in 0..7 {
            store.slot_mut(0).grads.kernels.data_mut()[0] = -0.5;
            adam.step(&mut store, &layout, &plan).unwrap();
        }
        let expect = adam_reference(0.3, -0.5, 0.05, 7) as f32;
        let got = store.slot(0).params.kernels.data()[0];
        assert!((got - expect).abs() < 1e-5, "{got} vs {expect}");
    }

    #[test]
    fn frozen_parameter_with_nonzero_gradient_is_bit_identical() {
        let (mut store, layout) = one_param_store(1.0);
        store.slot_mut(0).grads.kernels.data_mut()[0] = 5.0;
        store.slot_mut(0).grads.bias[0] = 5.0;
        let mut adam = AdamState::new(&store, 0.1);
        let plan = UpdatePlan {
            kernels: Bitset::zeros(layout.kernel_count()),
            filters: Bitset::zeros(layout.filter_count()),
            full_slots: vec![],
        };
        let before_k = store.slot(0).params.kernels.data()[0].to_bits();
        let before_b = store.slot(0).params.bias[0].to_bits();
        let stats = adam.step(&mut store, &layout, &plan).unwrap();
        assert_eq!(stats.updated, 0);
        assert_eq!(store.slot(0).params.kernels.data()[0].to_bits(), before_k);
        assert_eq!(store.slot(0).params.bias[0].to_bits(), before_b);
        // moments not advanced for masked-out parameters
        assert_eq!(adam.slots[0].m_kernels.data(), &[0.0]);
        assert_eq!(adam.slots[0].v_bias, vec![0.0]);
    }

    #[test]
    fn full_slot_flag_updates_head_slots() {
        let (mut store, layout) = one_param_store(1.0);
        // append a head slot outside the layout
        let head = ConvParams::new(
            Tensor::from_vec(Shape::new(1, 1, 1, 1).unwrap(), vec![2.0]).unwrap(),
            vec![0.0],
            1,
            0,
        )
        .unwrap();
        store.push("head0", head).unwrap();
        store.slot_mut(1).grads.kernels.data_mut()[0] = 1.0;
        let mut adam = AdamState::new(&store, 0.1);
        let plan = UpdatePlan {
            kernels: Bitset::zeros(layout.kernel_count()),
            filters: Bitset::zeros(layout.filter_count()),
            full_slots: vec![1],
        };
        adam.step(&mut store, &layout, &plan).unwrap();
        assert_eq!(store.slot(0).params.kernels.data(), &[1.0]); // untouched
        assert!(store.slot(1).params.kernels.data()[0] < 2.0);
    }
}
