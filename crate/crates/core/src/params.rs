//! Convolution parameters and the ordered parameter store.

use crate::error::{Error, Result};
use crate::rng::uniform_range_f64;
use num_traits::Float;
use crate::tensor::{Scalar, Shape, Tensor};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand_core::RngCore;

/// Weights of one convolution layer: kernels (out, in, r, r) plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<S: Scalar = f32> {
    pub kernels: Tensor<S>,
    pub bias: Vec<S>,
    pub stride: usize,
    pub padding: usize,
}

impl<S: Scalar> ConvParams<S> {
    pub fn new(kernels: Tensor<S>, bias: Vec<S>, stride: usize, padding: usize) -> Result<Self> {
        let shape = kernels.shape();
        if shape.h != shape.w {
            return Err(Error::shape(
                "ConvParams::new",
                format!("kernels must be square, got {}x{}", shape.h, shape.w),
            ));
        }
        if bias.len() != shape.n {
            return Err(Error::shape(
                "ConvParams::new",
                format!("bias length {} != out channels {}", bias.len(), shape.n),
            ));
        }
        if stride == 0 {
            return Err(Error::Config("stride must be positive".into()));
        }
        Ok(ConvParams {
            kernels,
            bias,
            stride,
            padding,
        })
    }

    /// Fan-in scaled uniform initialization: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn init(
        out_ch: usize,
        in_ch: usize,
        ksize: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl RngCore,
    ) -> Result<Self> {
        let fan_in = (in_ch * ksize * ksize) as f64;
        let bound = (1.0 / fan_in).sqrt();
        let shape = Shape::new(out_ch, in_ch, ksize, ksize)?;
        let kernels = Tensor::from_fn(shape, |_| {
            S::from_f64(uniform_range_f64(rng, -bound, bound))
        });
        let bias = (0..out_ch)
            .map(|_| S::from_f64(uniform_range_f64(rng, -bound, bound)))
            .collect();
        ConvParams::new(kernels, bias, stride, padding)
    }

    pub fn out_ch(&self) -> usize {
        self.kernels.shape().n
    }

    pub fn in_ch(&self) -> usize {
        self.kernels.shape().c
    }

    pub fn ksize(&self) -> usize {
        self.kernels.shape().h
    }

    /// The r*r weights of kernel (out_ch, in_ch).
    #[inline]
    pub fn kernel(&self, out_ch: usize, in_ch: usize) -> &[S] {
        self.kernels.channel(out_ch, in_ch)
    }

    pub fn param_count(&self) -> usize {
        self.kernels.shape().count() + self.bias.len()
    }
}

/// Gradients matching one layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<S: Scalar = f32> {
    pub kernels: Tensor<S>,
    pub bias: Vec<S>,
}

impl<S: Scalar> ConvGrads<S> {
    pub fn zeros_like(params: &ConvParams<S>) -> Self {
        ConvGrads {
            kernels: Tensor::zeros(params.kernels.shape()),
            bias: vec![S::zero(); params.bias.len()],
        }
    }

    pub fn zero(&mut self) {
        self.kernels.fill(S::zero());
        for b in &mut self.bias {
            *b = S::zero();
        }
    }
}

/// One named parameter slot (a layer's weights and its gradients).
#[derive(Debug, Clone, PartialEq)]
pub struct Slot<S: Scalar = f32> {
    pub name: String,
    pub params: ConvParams<S>,
    pub grads: ConvGrads<S>,
}

/// Ordered list of named parameter slots. Gradient shapes always equal value
/// shapes by construction; names are unique.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<S: Scalar = f32> {
    slots: Vec<Slot<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { slots: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, params: ConvParams<S>) -> Result<usize> {
        let name = name.into();
        if self.slots.iter().any(|s| s.name == name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let grads = ConvGrads::zeros_like(&params);
        self.slots.push(Slot { name, params, grads });
        Ok(self.slots.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    #[inline]
    pub fn slot(&self, idx: usize) -> &Slot<S> {
        &self.slots[idx]
    }

    #[inline]
    pub fn slot_mut(&mut self, idx: usize) -> &mut Slot<S> {
        &mut self.slots[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Slot<S>> {
        self.slots.iter()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.slots.iter().position(|s| s.name == name)
    }

    pub fn zero_grads(&mut self) {
        for slot in &mut self.slots {
            slot.grads.zero();
        }
    }

    pub fn param_count(&self) -> usize {
        self.slots.iter().map(|s| s.params.param_count()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            slots: self
                .slots
                .iter()
                .map(|s| Slot {
                    name: s.name.clone(),
                    params: ConvParams {
                        kernels: s.params.kernels.cast(),
                        bias: s.params.bias.iter().map(|b| T::from_f64(b.as_f64())).collect(),
                        stride: s.params.stride,
                        padding: s.params.padding,
                    },
                    grads: ConvGrads {
                        kernels: s.grads.kernels.cast(),
                        bias: s.grads.bias.iter().map(|b| T::from_f64(b.as_f64())).collect(),
                    },
                })
                .collect(),
        }
    }
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn conv_params_validation() {
        let k = Tensor::<f32>::zeros(Shape::new(2, 1, 3, 3).unwrap());
        assert!(ConvParams::new(k.clone(), vec![0.0; 3], 1, 1).is_err());
        assert!(ConvParams::new(k.clone(), vec![0.0; 2], 0, 1).is_err());
        assert!(ConvParams::new(k, vec![0.0; 2], 1, 1).is_ok());
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let mut rng = stream(11, &["init"]);
        let p = ConvParams::<f32>::init(4, 3, 3, 1, 1, &mut rng).unwrap();
        let bound = (1.0f32 / 27.0).sqrt();
        assert!(p.kernels.data().iter().all(|v| v.abs() <= bound));
        assert!(p.bias.iter().all(|v| v.abs() <= bound));
        // deterministic for a fixed stream
        let mut rng2 = stream(11, &["init"]);
        let p2 = ConvParams::<f32>::init(4, 3, 3, 1, 1, &mut rng2).unwrap();
        assert_eq!(p.kernels.data(), p2.kernels.data());
    }

    #[test]
    fn store_rejects_duplicate_names() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = stream(1, &["init"]);
        let p = ConvParams::init(1, 1, 1, 1, 0, &mut rng).unwrap();
        store.push("a", p.clone()).unwrap();
        assert!(store.push("a", p).is_err());
    }

    #[test]
    fn grads_match_value_shapes() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = stream(2, &["init"]);
        let p = ConvParams::init(3, 2, 3, 1, 1, &mut rng).unwrap();
        store.push("conv", p).unwrap();
        let s = store.slot(0);
        assert_eq!(s.grads.kernels.shape(), s.params.kernels.shape());
        assert_eq!(s.grads.bias.len(), s.params.bias.len());
    }
}
