//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates loss values, so it stays independent
//! of the backward rules it is checking.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use super::{Tape, Var};
use crate::error::Result;
use crate::math;
use crate::tensor::Tensor;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    math::abs(analytic - numeric) / (math::abs(analytic) + math::abs(numeric) + 1e-12)
}

/// Check a scalar function built directly from tape ops.
///
/// `f` receives a fresh tape and one leaf per input tensor and must return a
/// scalar root. Returns the max over all input coordinates of the relative
/// error between the analytic gradient and the central difference.
pub fn grad_check_fn<F>(f: F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t, false)).collect();
        let root = f(&mut tape, &vars)?;
        Ok(tape.scalar_value(root))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t, true)).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get_or_zeros(&tape, *v)).collect();

    let mut max_rel: f64 = 0.0;
    for i in 0..inputs.len() {
        for c in 0..inputs[i].numel() {
            let mut perturbed = inputs.to_vec();
            perturbed[i].data_mut()[c] += step;
            let hi = eval(&perturbed)?;
            perturbed[i].data_mut()[c] -= 2.0 * step;
            let lo = eval(&perturbed)?;
            let numeric = (hi - lo) / (2.0 * step);
            max_rel = math::max(max_rel, rel_err(analytic[i].data()[c], numeric));
        }
    }
    Ok(max_rel)
}

/// Check a scalar function of a named parameter set.
///
/// `value` evaluates the loss at an arbitrary (perturbed) parameter map and
/// must be deterministic; `analytic` supplies the gradients claimed for the
/// unperturbed parameters. Only parameters listed in `paths` are perturbed.
pub fn grad_check_params<F>(
    params: &BTreeMap<String, Tensor>,
    paths: &[String],
    analytic: &BTreeMap<String, Tensor>,
    value: F,
    step: f64,
) -> Result<f64>
where
    F: Fn(&BTreeMap<String, Tensor>) -> Result<f64>,
{
    let mut max_rel: f64 = 0.0;
    for path in paths {
        let base = params
            .get(path)
            .unwrap_or_else(|| panic!("unknown parameter path {path}"));
        let grad = analytic
            .get(path)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(base.shape()));
        for c in 0..base.numel() {
            let mut perturbed = params.clone();
            perturbed.get_mut(path).expect("present").data_mut()[c] += step;
            let hi = value(&perturbed)?;
            perturbed.get_mut(path).expect("present").data_mut()[c] -= 2.0 * step;
            let lo = value(&perturbed)?;
            let numeric = (hi - lo) / (2.0 * step);
            max_rel = math::max(max_rel, rel_err(grad.data()[c], numeric));
        }
    }
    Ok(max_rel)
}
