//! Forward and backward primitives for the layer set a U-Net needs:
//! convolution, ReLU, sigmoid, 2x2 max-pooling, nearest-neighbour x2
//! upsampling and channel concatenation.
//!
//! Convolutions accept an optional per-layer kernel activity view; inactive
//! kernels contribute exactly zero in both directions, as if their weights
//! were zero, while biases always propagate.

use crate::error::{Error, Result};
use crate::masks::LayerKernels;
use crate::params::{ConvParams, ConvGrads};
use crate::tensor::{Scalar, Shape, Tensor};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[inline]
fn axpy<S: Scalar>(y: &mut [S], a: S, x: &[S]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o = *o + a * v;
    }
}

/// Dot product with a fixed 8-lane accumulation order (deterministic and
/// vectorizable).
#[inline]
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = [S::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for j in 0..8 {
            acc[j] = acc[j] + xa[j] * xb[j];
        }
    }
    let mut tail = S::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail = tail + x * y;
    }
    (((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]))) + tail
}

#[inline]
fn sum_slice<S: Scalar>(a: &[S]) -> S {
    let mut acc = [S::zero(); 8];
    let mut ca = a.chunks_exact(8);
    for xa in &mut ca {
        for j in 0..8 {
            acc[j] = acc[j] + xa[j];
        }
    }
    let mut tail = S::zero();
    for &x in ca.remainder() {
        tail = tail + x;
    }
    (((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]))) + tail
}

/// Output spatial size of a convolution along one axis.
fn conv_out_size(input: usize, ksize: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if padded < ksize {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {ksize} larger than padded input {padded}"),
        ));
    }
    Ok((padded - ksize) / stride + 1)
}

fn check_conv_input<S: Scalar>(input: &Tensor<S>, params: &ConvParams<S>) -> Result<Shape> {
    let ishape = input.shape();
    if ishape.c != params.in_ch() {
        return Err(Error::shape(
            "conv2d",
            format!(
                "input channels {} != kernel in-channels {}",
                ishape.c,
                params.in_ch()
            ),
        ));
    }
    let ho = conv_out_size(ishape.h, params.ksize(), params.stride, params.padding)?;
    let wo = conv_out_size(ishape.w, params.ksize(), params.stride, params.padding)?;
    Shape::new(ishape.n, params.out_ch(), ho, wo)
}

/// 2-D convolution. Kernels absent from `active` are treated as zero-valued;
/// biases are always added.
pub fn conv2d<S: Scalar>(
    input: &Tensor<S>,
    params: &ConvParams<S>,
    active: Option<&LayerKernels<'_>>,
) -> Result<Tensor<S>> {
    let out_shape = check_conv_input(input, params)?;
    let mut out = Tensor::zeros(out_shape);
    let ishape = input.shape();
    let (h, w) = (ishape.h, ishape.w);
    let (ho, wo) = (out_shape.h, out_shape.w);
    let r = params.ksize();
    let s = params.stride;
    let p = params.padding;

    for n in 0..ishape.n {
        for oc in 0..params.out_ch() {
            let bias = params.bias[oc];
            let out_ch = out.channel_mut(n, oc);
            out_ch.fill(bias);
            for ic in 0..params.in_ch() {
                if let Some(mask) = active {
                    if !mask.active(oc, ic) {
                        continue;
                    }
                }
                let kernel = params.kernel(oc, ic);
                let inp = input.channel(n, ic);
                if s == 1 {
                    for kh in 0..r {
                        let oh_lo = p.saturating_sub(kh);
                        let oh_hi = (h + p).saturating_sub(kh).min(ho);
                        for kw in 0..r {
                            let kv = kernel[kh * r + kw];
                            let ow_lo = p.saturating_sub(kw);
                            let ow_hi = (w + p).saturating_sub(kw).min(wo);
                            if ow_hi <= ow_lo {
                                continue;
                            }
                            let span = ow_hi - ow_lo;
                            for oh in oh_lo..oh_hi {
                                let ih = oh + kh - p;
                                let iw = ow_lo + kw - p;
                                let in_row = &inp[ih * w + iw..][..span];
                                let out_row = &mut out_ch[oh * wo + ow_lo..][..span];
                                axpy(out_row, kv, in_row);
                            }
                        }
                    }
                } else {
                    // general stride; used rarely, kept simple
                    for oh in 0..ho {
                        for ow in 0..wo {
                            let mut acc = S::zero();
                            for kh in 0..r {
                                let ih = oh * s + kh;
                                if ih < p || ih - p >= h {
                                    continue;
                                }
                                for kw in 0..r {
                                    let iw = ow * s + kw;
                                    if iw < p || iw - p >= w {
                                        continue;
                                    }
                                    acc = acc + kernel[kh * r + kw] * inp[(ih - p) * w + (iw - p)];
                                }
                            }
                            out_ch[oh * wo + ow] = out_ch[oh * wo + ow] + acc;
                        }
                    }
                }
            }
        }
    }
    out.ensure_finite("conv2d output")?;
    Ok(out)
}

/// Gradients of a convolution with respect to input, kernels and bias.
/// Inactive kernels receive zero gradient and propagate none.
pub fn conv2d_backward<S: Scalar>(
    input: &Tensor<S>,
    params: &ConvParams<S>,
    active: Option<&LayerKernels<'_>>,
    grad_out: &Tensor<S>,
) -> Result<(Tensor<S>, ConvGrads<S>)> {
    let out_shape = check_conv_input(input, params)?;
    if grad_out.shape() != out_shape {
        return Err(Error::shape(
            "conv2d_backward",
            format!("grad shape {} != output shape {}", grad_out.shape(), out_shape),
        ));
    }
    let ishape = input.shape();
    let (h, w) = (ishape.h, ishape.w);
    let (ho, wo) = (out_shape.h, out_shape.w);
    let r = params.ksize();
    let s = params.stride;
    let p = params.padding;

    let mut grad_input = Tensor::zeros(ishape);
    let mut grads = ConvGrads::zeros_like(params);

    for n in 0..ishape.n {
        for oc in 0..params.out_ch() {
            let dout = grad_out.channel(n, oc);
            grads.bias[oc] = grads.bias[oc] + sum_slice(dout);
            for ic in 0..params.in_ch() {
                if let Some(mask) = active {
                    if !mask.active(oc, ic) {
                        continue;
                    }
                }
                let kernel = params.kernel(oc, ic);
                let inp = input.channel(n, ic);
                let din = grad_input.channel_mut(n, ic);
                let kbase = (oc * params.in_ch() + ic) * r * r;
                let dk = &mut grads.kernels.data_mut()[kbase..kbase + r * r];
                if s == 1 {
                    for kh in 0..r {
                        let oh_lo = p.saturating_sub(kh);
                        let oh_hi = (h + p).saturating_sub(kh).min(ho);
                        for kw in 0..r {
                            let kv = kernel[kh * r + kw];
                            let ow_lo = p.saturating_sub(kw);
                            let ow_hi = (w + p).saturating_sub(kw).min(wo);
                            if ow_hi <= ow_lo {
                                continue;
                            }
                            let span = ow_hi - ow_lo;
                            let mut dk_acc = S::zero();
                            for oh in oh_lo..oh_hi {
                                let ih = oh + kh - p;
                                let iw = ow_lo + kw - p;
                                let dout_row = &dout[oh * wo + ow_lo..][..span];
                                let din_row = &mut din[ih * w + iw..][..span];
                                axpy(din_row, kv, dout_row);
                                let in_row = &inp[ih * w + iw..][..span];
                                dk_acc = dk_acc + dot(in_row, dout_row);
                            }
                            dk[kh * r + kw] = dk[kh * r + kw] + dk_acc;
                        }
                    }
                } else {
                    for oh in 0..ho {
                        for ow in 0..wo {
                            let g = dout[oh * wo + ow];
                            for kh in 0..r {
                                let ih = oh * s + kh;
                                if ih < p || ih - p >= h {
                                    continue;
                                }
                                for kw in 0..r {
                                    let iw = ow * s + kw;
                                    if iw < p || iw - p >= w {
                                        continue;
                                    }
                                    let ii = (ih - p) * w + (iw - p);
                                    din[ii] = din[ii] + kernel[kh * r + kw] * g;
                                    dk[kh * r + kw] = dk[kh * r + kw] + inp[ii] * g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((grad_input, grads))
}

pub fn relu<S: Scalar>(input: &Tensor<S>) -> Tensor<S> {
    let mut out = input.clone();
    for x in out.data_mut() {
        if *x < S::zero() {
            *x = S::zero();
        }
    }
    out
}

pub fn relu_backward<S: Scalar>(input: &Tensor<S>, grad_out: &Tensor<S>) -> Tensor<S> {
    debug_assert_eq!(input.shape(), grad_out.shape());
    let mut grad = grad_out.clone();
    for (g, &x) in grad.data_mut().iter_mut().zip(input.data()) {
        if x <= S::zero() {
            *g = S::zero();
        }
    }
    grad
}

pub fn sigmoid<S: Scalar>(input: &Tensor<S>) -> Tensor<S> {
    let one = S::one();
    let mut out = input.clone();
    for x in out.data_mut() {
        *x = one / (one + (-*x).exp());
    }
    out
}

/// Backward through sigmoid given the forward *output*.
pub fn sigmoid_backward<S: Scalar>(output: &Tensor<S>, grad_out: &Tensor<S>) -> Tensor<S> {
    debug_assert_eq!(output.shape(), grad_out.shape());
    let one = S::one();
    let mut grad = grad_out.clone();
    for (g, &y) in grad.data_mut().iter_mut().zip(output.data()) {
        *g = *g * y * (one - y);
    }
    grad
}

/// 2x2 max pooling with stride 2. Returns the pooled tensor and, per output
/// cell, the flat index of the winning input pixel within its channel plane.
/// Ties resolve to the first pixel in scan order.
pub fn maxpool2<S: Scalar>(input: &Tensor<S>) -> Result<(Tensor<S>, Vec<u32>)> {
    let ishape = input.shape();
    if ishape.h % 2 != 0 || ishape.w % 2 != 0 {
        return Err(Error::shape(
            "maxpool2",
            format!("spatial size {}x{} not divisible by 2", ishape.h, ishape.w),
        ));
    }
    let out_shape = Shape::new(ishape.n, ishape.c, ishape.h / 2, ishape.w / 2)?;
    let mut out = Tensor::zeros(out_shape);
    let mut indices = vec![0u32; out_shape.count()];
    let w = ishape.w;
    let wo = out_shape.w;
    let mut cell = 0usize;
    for n in 0..ishape.n {
        for c in 0..ishape.c {
            let inp = input.channel(n, c);
            let out_ch = out.channel_mut(n, c);
            for oh in 0..out_shape.h {
                let base = 2 * oh * w;
                for ow in 0..wo {
                    let i00 = base + 2 * ow;
                    let cand = [i00, i00 + 1, i00 + w, i00 + w + 1];
                    let mut best = cand[0];
                    let mut best_v = inp[cand[0]];
                    for &i in &cand[1..] {
                        if inp[i] > best_v {
                            best_v = inp[i];
                            best = i;
                        }
                    }
                    out_ch[oh * wo + ow] = best_v;
                    indices[cell] = best as u32;
                    cell += 1;
                }
            }
        }
    }
    Ok((out, indices))
}

pub fn maxpool2_backward<S: Scalar>(
    indices: &[u32],
    input_shape: Shape,
    grad_out: &Tensor<S>,
) -> Tensor<S> {
    let oshape = grad_out.shape();
    debug_assert_eq!(indices.len(), oshape.count());
    let mut grad = Tensor::zeros(input_shape);
    let mut cell = 0usize;
    for n in 0..oshape.n {
        for c in 0..oshape.c {
            let dout = grad_out.channel(n, c);
            let din = grad.channel_mut(n, c);
            for &g in dout.iter() {
                let idx = indices[cell] as usize;
                din[idx] = din[idx] + g;
                cell += 1;
            }
        }
    }
    grad
}

/// Nearest-neighbour x2 upsampling.
pub fn upsample2<S: Scalar>(input: &Tensor<S>) -> Tensor<S> {
    let ishape = input.shape();
    let out_shape = Shape {
        n: ishape.n,
        c: ishape.c,
        h: ishape.h * 2,
        w: ishape.w * 2,
    };
    let mut out = Tensor::zeros(out_shape);
    let w = ishape.w;
    let wo = out_shape.w;
    for n in 0..ishape.n {
        for c in 0..ishape.c {
            let inp = input.channel(n, c);
            let out_ch = out.channel_mut(n, c);
            for h in 0..ishape.h {
                for iw in 0..w {
                    let v = inp[h * w + iw];
                    let o = 2 * h * wo + 2 * iw;
                    out_ch[o] = v;
                    out_ch[o + 1] = v;
                    out_ch[o + wo] = v;
                    out_ch[o + wo + 1] = v;
                }
            }
        }
    }
    out
}

pub fn upsample2_backward<S: Scalar>(grad_out: &Tensor<S>) -> Result<Tensor<S>> {
    let oshape = grad_out.shape();
    if oshape.h % 2 != 0 || oshape.w % 2 != 0 {
        return Err(Error::shape(
            "upsample2_backward",
            format!("gradient spatial size {}x{} not even", oshape.h, oshape.w),
        ));
    }
    let in_shape = Shape::new(oshape.n, oshape.c, oshape.h / 2, oshape.w / 2)?;
    let mut grad = Tensor::zeros(in_shape);
    let w = in_shape.w;
    let wo = oshape.w;
    for n in 0..oshape.n {
        for c in 0..oshape.c {
            let dout = grad_out.channel(n, c);
            let din = grad.channel_mut(n, c);
            for h in 0..in_shape.h {
                for iw in 0..w {
                    let o = 2 * h * wo + 2 * iw;
                    din[h * w + iw] =
                        (dout[o] + dout[o + 1]) + (dout[o + wo] + dout[o + wo + 1]);
                }
            }
        }
    }
    Ok(grad)
}

/// Concatenate along the channel axis: output channels are `a`'s then `b`'s.
pub fn concat_channels<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
        return Err(Error::shape(
            "concat",
            format!("incompatible shapes {sa} and {sb}"),
        ));
    }
    let out_shape = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w)?;
    let mut out = Tensor::zeros(out_shape);
    for n in 0..sa.n {
        for c in 0..sa.c {
            out.channel_mut(n, c).copy_from_slice(a.channel(n, c));
        }
        for c in 0..sb.c {
            out.channel_mut(n, sa.c + c).copy_from_slice(b.channel(n, c));
        }
    }
    Ok(out)
}

/// Split a concat gradient back into the two input gradients.
pub fn concat_backward<S: Scalar>(
    a_channels: usize,
    grad_out: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let oshape = grad_out.shape();
    if a_channels == 0 || a_channels >= oshape.c {
        return Err(Error::shape(
            "concat_backward",
            format!("cannot split {} channels at {a_channels}", oshape.c),
        ));
    }
    let sa = Shape::new(oshape.n, a_channels, oshape.h, oshape.w)?;
    let sb = Shape::new(oshape.n, oshape.c - a_channels, oshape.h, oshape.w)?;
    let mut ga = Tensor::zeros(sa);
    let mut gb = Tensor::zeros(sb);
    for n in 0..oshape.n {
        for c in 0..sa.c {
            ga.channel_mut(n, c).copy_from_slice(grad_out.channel(n, c));
        }
        for c in 0..sb.c {
            gb.channel_mut(n, c)
                .copy_from_slice(grad_out.channel(n, sa.c + c));
        }
    }
    Ok((ga, gb))
}
