//! Central finite-difference gradient oracle.
//!
//! Both the analytic gradient and the finite differences are evaluated in
//! 64-bit precision. When a perturbation flips the sign of any leaky-relu
//! input the difference quotient straddles a kink; the step is then shrunk by
//! 10x (at most four times) until the activation pattern is stable.
//!
//! Inputs of every top-level layer are computed once, so a perturbed
//! parameter only re-runs the layers from its own onward.

use super::engine::{backward, layer_inputs, training_loss_from};
use super::layer::Stack;
use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::Result;

const MIN_DENOMINATOR: f64 = 1e-6;
const MAX_REFINEMENTS: usize = 4;

/// Max over trainable parameter elements of
/// `|analytic - central| / max(|central|, 1e-6)`. Zero for stacks without
/// trainable parameters.
pub fn check_gradients(
    stack: &Stack,
    params: &ParamSet,
    input: &Tensor,
    target: &Tensor,
    step: f64,
) -> Result<f64> {
    let mut params64: ParamSet<f64> = params.cast();
    let input64 = input.cast::<f64>();
    let target64 = target.cast::<f64>();
    let (_, analytic) = backward(stack, &params64, &input64, &target64)?;
    let inputs = layer_inputs(stack, &params64, &input64)?;
    let owner: Vec<Vec<String>> = stack
        .layers()
        .iter()
        .map(|l| l.param_specs().into_iter().map(|p| p.name).collect())
        .collect();

    let mut worst = 0.0f64;
    for (name, grad) in analytic.iter() {
        let start = owner.iter().position(|names| names.iter().any(|n| n == name)).unwrap_or(0);
        let x = &inputs[start];
        let (_, base_pattern) = training_loss_from(stack, &params64, start, x.clone(), &target64)?;
        for idx in 0..grad.tensor.numel() {
            let original = params64.tensor(name)?.data()[idx];
            let mut h = step;
            let mut numeric = 0.0;
            for attempt in 0..=MAX_REFINEMENTS {
                let mut eval = |value: f64| -> Result<(f64, Vec<bool>)> {
                    params64.get_mut(name).expect("name from gradient set").tensor.data_mut()[idx] = value;
                    training_loss_from(stack, &params64, start, x.clone(), &target64)
                };
                let (plus, p_plus) = eval(original + h)?;
                let (minus, p_minus) = eval(original - h)?;
                numeric = (plus - minus) / (2.0 * h);
                if (p_plus == base_pattern && p_minus == base_pattern) || attempt == MAX_REFINEMENTS {
                    break;
                }
                h /= 10.0;
            }
            params64.get_mut(name).expect("name from gradient set").tensor.data_mut()[idx] = original;
            let a = grad.tensor.data()[idx];
            let rel = (a - numeric).abs() / numeric.abs().max(MIN_DENOMINATOR);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
