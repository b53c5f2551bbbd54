//! Finite-difference verification of the analytic gradients.

use super::{Graph, Mode, NodeId, Tensor};
use crate::error::Result;

/// Central-difference gradient of the scalar at `loss` with respect to one
/// parameter entry. Works on a scratch copy of the parameters.
pub fn numeric_gradient(
    graph: &Graph,
    input: &Tensor,
    loss: NodeId,
    mode: Mode,
    param: &str,
    index: usize,
    eps: f64,
) -> Result<f64> {
    let mut scratch = graph.clone();
    let original = scratch.param(param).expect("parameter exists").data()[index];

    scratch.param_mut(param).unwrap().data_mut()[index] = original + eps;
    let plus = scratch.forward(input, mode)?.value(loss).data()[0];

    scratch.param_mut(param).unwrap().data_mut()[index] = original - eps;
    let minus = scratch.forward(input, mode)?.value(loss).data()[0];

    Ok((plus - minus) / (2.0 * eps))
}

/// Compare analytic and central finite-difference gradients of every
/// trainable parameter entry against the scalar at `loss`.
///
/// Returns the maximum of |analytic - numeric| / max(|analytic|, |numeric|,
/// 1e-8); zero for graphs without trainable parameters, infinity when any
/// evaluation turns non-finite.
pub fn check_gradients(graph: &Graph, input: &Tensor, loss: NodeId, mode: Mode, eps: f64) -> Result<f64> {
    let acts = graph.forward(input, mode)?;
    if !acts.value(loss).all_finite() {
        return Ok(f64::INFINITY);
    }
    let analytic = graph.backward(&acts, loss)?;

    let mut worst: f64 = 0.0;
    let names: Vec<String> = graph.trainable_names().cloned().collect();
    for name in names {
        let len = graph.param(&name).unwrap().len();
        for i in 0..len {
            let a = analytic[&name].data()[i];
            let n = numeric_gradient(graph, input, loss, mode, &name, i, eps)?;
            if !a.is_finite() || !n.is_finite() {
                return Ok(f64::INFINITY);
            }
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
