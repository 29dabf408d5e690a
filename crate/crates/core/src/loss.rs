//! Intersection-over-union score and the smoothed, differentiable IoU loss.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use alloc::format;

/// IoU of two binary masks: |intersection| / |union|.
///
/// When both masks are empty the score is 1 by convention (a defect-free
/// prediction on a defect-free ground truth is perfect); the raw ratio is
/// 0/0 there.
pub fn iou_score(pred: &[u8], truth: &[u8]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape(
            "iou_score",
            format!("mask lengths {} and {}", pred.len(), truth.len()),
        ));
    }
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&p, &t) in pred.iter().zip(truth) {
        if p > 1 || t > 1 {
            return Err(Error::Data("iou_score: masks must be binary 0/1".into()));
        }
        inter += u64::from(p & t);
        union += u64::from(p | t);
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

fn check_loss_inputs<S: Scalar>(probs: &Tensor<S>, target: &Tensor<S>, eps: S) -> Result<()> {
    if probs.shape() != target.shape() {
        return Err(Error::shape(
            "iou_loss",
            format!("probs {} vs target {}", probs.shape(), target.shape()),
        ));
    }
    if eps <= S::zero() {
        return Err(Error::Config("iou_loss: smoothing must be positive".into()));
    }
    Ok(())
}

/// Smoothed IoU loss, averaged over the batch:
/// `1 - (sum(p*y) + eps) / (sum(p + y - p*y) + eps)` per image.
///
/// Probabilities must lie in [0, 1] and targets must be binary.
pub fn iou_loss<S: Scalar>(probs: &Tensor<S>, target: &Tensor<S>, eps: S) -> Result<S> {
    Ok(iou_loss_and_grad(probs, target, eps)?.0)
}

/// Loss plus its gradient with respect to the probabilities.
pub fn iou_loss_and_grad<S: Scalar>(
    probs: &Tensor<S>,
    target: &Tensor<S>,
    eps: S,
) -> Result<(S, Tensor<S>)> {
    check_loss_inputs(probs, target, eps)?;
    let shape = probs.shape();
    let per_image = shape.c * shape.plane();
    let batch = shape.n;
    let inv_batch = S::one() / S::from_f64(batch as f64);
    let one = S::one();

    let mut grad = Tensor::zeros(shape);
    let mut total = S::zero();
    for n in 0..batch {
        let lo = n * per_image;
        let p = &probs.data()[lo..lo + per_image];
        let y = &target.data()[lo..lo + per_image];
        let mut inter = S::zero();
        let mut union = S::zero();
        for (&pi, &yi) in p.iter().zip(y) {
            inter = inter + pi * yi;
            union = union + pi + yi - pi * yi;
        }
        let num = inter + eps;
        let den = union + eps;
        total = total + (one - num / den);
        let den2 = den * den;
        let g = &mut grad.data_mut()[lo..lo + per_image];
        for (gi, (&pi, &yi)) in g.iter_mut().zip(p.iter().zip(y)) {
            let _ = pi;
            // d/dp [ -(inter+eps)/(union+eps) ] with d inter = y, d union = 1 - y
            *gi = -(yi * den - num * (one - yi)) / den2 * inv_batch;
        }
    }
    let loss = total * inv_batch;
    if !loss.is_finite() {
        return Err(Error::non_finite("iou_loss"));
    }
    Ok((loss, grad))
}
