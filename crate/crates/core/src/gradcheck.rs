//! Central finite-difference verification of the analytic gradients.
//!
//! Runs in 64-bit. The relative error of a parameter is
//! `|analytic - central| / max(|analytic|, |central|, floor)`; the check
//! reports the maximum over all parameters.

use crate::error::{Error, Result};
use crate::loss;
use crate::tensor::Tensor;
use crate::unet::UNetModel;
use alloc::format;
use alloc::string::String;

/// Loss driving the check.
#[derive(Debug, Clone, Copy)]
pub enum LossKind {
    /// Sum of the pre-sigmoid logits; linear in the head parameters.
    SumLogits,
    /// The smoothed IoU loss on the sigmoid output.
    Iou { eps: f64 },
}

/// Default denominator floor of the relative error.
pub const DEFAULT_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub params_checked: usize,
}

impl FdReport {
    pub fn passes(&self, threshold: f64) -> bool {
        self.max_rel_error <= threshold
    }
}

/// Loss of a forward pass without touching gradients.
pub fn eval_loss(
    model: &UNetModel<f64>,
    batch: &Tensor<f64>,
    target: &Tensor<f64>,
    loss: LossKind,
) -> Result<f64> {
    let (trace, out) = model.forward_traced(batch, None, 0)?;
    match loss {
        LossKind::SumLogits => {
            let logits = trace.predecessor(out).expect("sigmoid has an input");
            Ok(trace.output(logits).data().iter().copied().sum())
        }
        LossKind::Iou { eps } => loss::iou_loss(trace.output(out), target, eps),
    }
}

/// Forward + backward, leaving the analytic gradients in the model's store.
/// Returns the loss value.
pub fn run_backprop(
    model: &mut UNetModel<f64>,
    batch: &Tensor<f64>,
    target: &Tensor<f64>,
    loss: LossKind,
) -> Result<f64> {
    let (trace, out) = model.forward_traced(batch, None, 0)?;
    match loss {
        LossKind::SumLogits => {
            let logits = trace.predecessor(out).expect("sigmoid has an input");
            let value = trace.output(logits).data().iter().copied().sum();
            let ones = Tensor::filled(trace.output(logits).shape(), 1.0);
            model.backprop(&trace, logits, &ones)?;
            Ok(value)
        }
        LossKind::Iou { eps } => {
            let (value, grad) = loss::iou_loss_and_grad(trace.output(out), target, eps)?;
            model.backprop(&trace, out, &grad)?;
            Ok(value)
        }
    }
}

/// Compare the gradients currently stored in the model against central
/// finite differences. Useful on its own for fault-injection tests.
pub fn fd_check_stored_grads(
    model: &mut UNetModel<f64>,
    batch: &Tensor<f64>,
    target: &Tensor<f64>,
    loss: LossKind,
    perturbation: f64,
    floor: f64,
) -> Result<FdReport> {
    if perturbation <= 0.0 || floor <= 0.0 {
        return Err(Error::Config(
            "perturbation and floor must be positive".into(),
        ));
    }
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        params_checked: 0,
    };
    let slots = model.store().len();
    for slot_idx in 0..slots {
        let (name, kernel_count, bias_count) = {
            let slot = model.store().slot(slot_idx);
            (
                slot.name.clone(),
                slot.params.kernels.shape().count(),
                slot.params.bias.len(),
            )
        };
        for elem in 0..kernel_count + bias_count {
            let analytic = {
                let slot = model.store().slot(slot_idx);
                if elem < kernel_count {
                    slot.grads.kernels.data()[elem]
                } else {
                    slot.grads.bias[elem - kernel_count]
                }
            };
            let read = |m: &UNetModel<f64>| {
                let slot = m.store().slot(slot_idx);
                if elem < kernel_count {
                    slot.params.kernels.data()[elem]
                } else {
                    slot.params.bias[elem - kernel_count]
                }
            };
            let write = |m: &mut UNetModel<f64>, v: f64| {
                let slot = m.store_mut().slot_mut(slot_idx);
                if elem < kernel_count {
                    slot.params.kernels.data_mut()[elem] = v;
                } else {
                    slot.params.bias[elem - kernel_count] = v;
                }
            };
            let original = read(model);
            write(model, original + perturbation);
            let plus = eval_loss(model, batch, target, loss)?;
            write(model, original - perturbation);
            let minus = eval_loss(model, batch, target, loss)?;
            write(model, original);
            let central = (plus - minus) / (2.0 * perturbation);
            let rel = (analytic - central).abs() / analytic.abs().max(central.abs()).max(floor);
            report.params_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = format!("{name}[{elem}]");
            }
        }
    }
    Ok(report)
}

/// Full check: compute analytic gradients, then compare every parameter
/// against central differences.
pub fn finite_difference_check(
    model: &mut UNetModel<f64>,
    batch: &Tensor<f64>,
    target: &Tensor<f64>,
    loss: LossKind,
    perturbation: f64,
) -> Result<FdReport> {
    run_backprop(model, batch, target, loss)?;
    fd_check_stored_grads(model, batch, target, loss, perturbation, DEFAULT_FLOOR)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Trace;
    use crate::params::{ConvParams, ParamStore};
    use crate::tensor::Shape;
    use alloc::vec;

    #[test]
    fn linear_scalar_net_is_exact() {
        // y = w*x with loss = y: central differences are exact for linear maps
        let mut store = ParamStore::<f64>::new();
        let params = ConvParams::new(
            Tensor::from_vec(Shape::new(1, 1, 1, 1).unwrap(), vec![0.7]).unwrap(),
            vec![0.2],
            1,
            0,
        )
        .unwrap();
        store.push("lin", params).unwrap();
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 1).unwrap(), vec![3.0]).unwrap();
        let mut tr = Trace::new(None);
        let xin = tr.input(x.clone());
        let y = tr.conv(&store, 0, None, xin).unwrap();
        let ones = Tensor::filled(tr.output(y).shape(), 1.0);
        tr.backprop(&mut store, y, &ones).unwrap();
        let analytic_w = store.slot(0).grads.kernels.data()[0];
        let analytic_b = store.slot(0).grads.bias[0];

        let delta = 1e-4;
        let eval = |store: &ParamStore<f64>| {
            let mut tr = Trace::new(None);
            let xin = tr.input(x.clone());
            let y = tr.conv(store, 0, None, xin).unwrap();
            tr.output(y).data()[0]
        };
        for (elem, analytic) in [(0usize, analytic_w), (1, analytic_b)] {
            let orig = if elem == 0 {
                store.slot(0).params.kernels.data()[0]
            } else {
                store.slot(0).params.bias[0]
            };
            let mut set = |s: &mut ParamStore<f64>, v: f64| {
                if elem == 0 {
                    s.slot_mut(0).params.kernels.data_mut()[0] = v;
                } else {
                    s.slot_mut(0).params.bias[0] = v;
                }
            };
            set(&mut store, orig + delta);
            let lp = eval(&store);
            set(&mut store, orig - delta);
            let lm = eval(&store);
            set(&mut store, orig);
            let fd = (lp - lm) / (2.0 * delta);
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
            assert!(rel <= 1e-10, "elem {elem}: rel {rel}");
        }
    }
}
