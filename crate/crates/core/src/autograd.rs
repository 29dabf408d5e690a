//! Recorded forward computations and reverse-mode differentiation.
//!
//! A [`Trace`] is an append-only list of executed layer applications. Each
//! node stores its operation, input node ids and output tensor; backward
//! walks the list in reverse and fills the parameter gradients in the
//! [`ParamStore`]. Calling backward again on the same trace recomputes the
//! same gradients from scratch (gradients are reset, not accumulated across
//! calls).
//!
//! If the trace was recorded under a kernel mask, the same mask is applied on
//! the way back, so inactive kernels neither receive nor propagate gradient.

use crate::bitset::Bitset;
use crate::error::{Error, Result};
use crate::masks::{KernelLayout, LayerKernels};
use crate::ops;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

const NO_INPUT: usize = usize::MAX;

/// Handle to a node inside a [`Trace`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    /// Convolution by store slot; `layer` is the mask-layout index for body
    /// layers and `None` for never-masked convolutions (output heads).
    Conv { slot: usize, layer: Option<usize> },
    Relu,
    Sigmoid,
    MaxPool2 { indices: Vec<u32> },
    Upsample2,
    Concat { a_channels: usize },
}

#[derive(Debug, Clone)]
struct Node<S: Scalar> {
    op: Op,
    in0: usize,
    in1: usize,
    out: Tensor<S>,
}

/// A recorded forward computation.
#[derive(Debug, Clone)]
pub struct Trace<S: Scalar> {
    nodes: Vec<Node<S>>,
    masking: Option<(KernelLayout, Bitset)>,
}

impl<S: Scalar> Trace<S> {
    pub fn new(masking: Option<(KernelLayout, Bitset)>) -> Self {
        Trace {
            nodes: Vec::new(),
            masking,
        }
    }

    fn push(&mut self, op: Op, in0: usize, in1: usize, out: Tensor<S>) -> NodeId {
        self.nodes.push(Node { op, in0, in1, out });
        NodeId(self.nodes.len() - 1)
    }

    fn view(&self, layer: Option<usize>) -> Option<LayerKernels<'_>> {
        match (layer, &self.masking) {
            (Some(l), Some((layout, bits))) => Some(layout.layer_kernels(bits, l)),
            _ => None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn output(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].out
    }

    /// First input of a node, if any.
    pub fn predecessor(&self, id: NodeId) -> Option<NodeId> {
        let in0 = self.nodes[id.0].in0;
        (in0 != NO_INPUT).then_some(NodeId(in0))
    }

    /// Recorded convolution applications: (store slot, mask layer, input).
    pub fn conv_inputs(&self) -> impl Iterator<Item = (usize, Option<usize>, &Tensor<S>)> {
        self.nodes.iter().filter_map(|node| match node.op {
            Op::Conv { slot, layer } => Some((slot, layer, &self.nodes[node.in0].out)),
            _ => None,
        })
    }

    /// Distance of the recorded computation from its nearest branch points:
    /// the smallest |x| over all ReLU inputs and the smallest winner margin
    /// over all pooling windows. A finite-difference probe is trustworthy
    /// only when its perturbation is well below both.
    pub fn branch_margins(&self) -> (f64, f64) {
        let mut relu_margin = f64::INFINITY;
        let mut pool_margin = f64::INFINITY;
        for node in &self.nodes {
            match node.op {
                Op::Relu => {
                    for &x in self.nodes[node.in0].out.data() {
                        relu_margin = relu_margin.min(x.as_f64().abs());
                    }
                }
                Op::MaxPool2 { .. } => {
                    let input = &self.nodes[node.in0].out;
                    let shape = input.shape();
                    let w = shape.w;
                    for n in 0..shape.n {
                        for c in 0..shape.c {
                            let plane = input.channel(n, c);
                            for oh in 0..shape.h / 2 {
                                for ow in 0..w / 2 {
                                    let i = 2 * oh * w + 2 * ow;
                                    let vals =
                                        [plane[i], plane[i + 1], plane[i + w], plane[i + w + 1]];
                                    let mut best = f64::NEG_INFINITY;
                                    let mut second = f64::NEG_INFINITY;
                                    for v in vals {
                                        let v = v.as_f64();
                                        if v > best {
                                            second = best;
                                            best = v;
                                        } else if v > second {
                                            second = v;
                                        }
                                    }
                                    pool_margin = pool_margin.min(best - second);
                                }
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        (relu_margin, pool_margin)
    }

    pub fn input(&mut self, tensor: Tensor<S>) -> NodeId {
        self.push(Op::Input, NO_INPUT, NO_INPUT, tensor)
    }

    pub fn conv(
        &mut self,
        store: &ParamStore<S>,
        slot: usize,
        layer: Option<usize>,
        x: NodeId,
    ) -> Result<NodeId> {
        let slot_ref = store.slot(slot);
        let out = {
            let view = self.view(layer);
            ops::conv2d(&self.nodes[x.0].out, &slot_ref.params, view.as_ref()).map_err(|e| {
                match e {
                    Error::Shape { detail, .. } => Error::shape(slot_ref.name.clone(), detail),
                    Error::NonFinite { .. } => Error::non_finite(slot_ref.name.clone()),
                    other => other,
                }
            })?
        };
        Ok(self.push(Op::Conv { slot, layer }, x.0, NO_INPUT, out))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = ops::relu(&self.nodes[x.0].out);
        self.push(Op::Relu, x.0, NO_INPUT, out)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = ops::sigmoid(&self.nodes[x.0].out);
        self.push(Op::Sigmoid, x.0, NO_INPUT, out)
    }

    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId> {
        let (out, indices) = ops::maxpool2(&self.nodes[x.0].out)?;
        Ok(self.push(Op::MaxPool2 { indices }, x.0, NO_INPUT, out))
    }

    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let out = ops::upsample2(&self.nodes[x.0].out);
        self.push(Op::Upsample2, x.0, NO_INPUT, out)
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = ops::concat_channels(&self.nodes[a.0].out, &self.nodes[b.0].out)?;
        let a_channels = self.nodes[a.0].out.shape().c;
        Ok(self.push(Op::Concat { a_channels }, a.0, b.0, out))
    }

    /// Reverse pass seeded at `output` with `loss_grad`. Resets and fills the
    /// parameter gradients in `store`; the trace itself is unmodified.
    pub fn backprop(
        &self,
        store: &mut ParamStore<S>,
        output: NodeId,
        loss_grad: &Tensor<S>,
    ) -> Result<()> {
        if loss_grad.shape() != self.nodes[output.0].out.shape() {
            return Err(Error::shape(
                "backprop",
                format!(
                    "loss gradient shape {} != output shape {}",
                    loss_grad.shape(),
                    self.nodes[output.0].out.shape()
                ),
            ));
        }
        store.zero_grads();
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(loss_grad.clone());

        for idx in (0..=output.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Conv { slot, layer } => {
                    let input = &self.nodes[node.in0].out;
                    let (din, dparams) = {
                        let view = self.view(*layer);
                        ops::conv2d_backward(input, &store.slot(*slot).params, view.as_ref(), &gout)?
                    };
                    let slot_grads = &mut store.slot_mut(*slot).grads;
                    for (acc, g) in slot_grads
                        .kernels
                        .data_mut()
                        .iter_mut()
                        .zip(dparams.kernels.data())
                    {
                        *acc = *acc + *g;
                    }
                    for (acc, g) in slot_grads.bias.iter_mut().zip(&dparams.bias) {
                        *acc = *acc + *g;
                    }
                    accumulate(&mut grads[node.in0], din);
                }
                Op::Relu => {
                    let din = ops::relu_backward(&self.nodes[node.in0].out, &gout);
                    accumulate(&mut grads[node.in0], din);
                }
                Op::Sigmoid => {
                    let din = ops::sigmoid_backward(&node.out, &gout);
                    accumulate(&mut grads[node.in0], din);
                }
                Op::MaxPool2 { indices } => {
                    let din =
                        ops::maxpool2_backward(indices, self.nodes[node.in0].out.shape(), &gout);
                    accumulate(&mut grads[node.in0], din);
                }
                Op::Upsample2 => {
                    let din = ops::upsample2_backward(&gout)?;
                    accumulate(&mut grads[node.in0], din);
                }
                Op::Concat { a_channels } => {
                    let (ga, gb) = ops::concat_backward(*a_channels, &gout)?;
                    accumulate(&mut grads[node.in0], ga);
                    accumulate(&mut grads[node.in1], gb);
                }
            }
        }
        Ok(())
    }
}

fn accumulate<S: Scalar>(slot: &mut Option<Tensor<S>>, grad: Tensor<S>) {
    match slot {
        None => *slot = Some(grad),
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(grad.data()) {
                *a = *a + *b;
            }
        }
    }
}
